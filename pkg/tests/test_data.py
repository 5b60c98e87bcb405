import struct

import numpy as np
import pytest

from speaker_naming.audio import Waveform
from speaker_naming.data import (SynthConfig, export_synth, load_manifest, read_pnm,
                                 read_wav, resize_bilinear, synth_dataset, write_pnm,
                                 write_wav)
from speaker_naming.exceptions import (DataError, ManifestError, ParseError,
                                       UnsupportedFormatError)

TINY = dict(n_identities=3, train_per_identity=4, test_per_identity=2, n_frames=5)


def wav_bytes(samples, rate=16000, format_tag=1, channels=1, bits=16):
    payload = np.asarray(samples, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", format_tag, channels, rate, rate * 2, 2, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + \
        struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 0.999, 500)
    write_wav(tmp_path / "a.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768


def test_wav_full_scale_sample(tmp_path):
    (tmp_path / "b.wav").write_bytes(wav_bytes([32767, -32768, 0]))
    np.testing.assert_array_equal(read_wav(tmp_path / "b.wav").samples,
                                  [32767 / 32768, -1.0, 0.0])


@pytest.mark.parametrize("kwargs,field", [({"format_tag": 3}, "format_tag"),
                                          ({"channels": 2}, "channels"),
                                          ({"bits": 8}, "bits_per_sample")])
def test_wav_unsupported_names_field(tmp_path, kwargs, field):
    (tmp_path / "c.wav").write_bytes(wav_bytes([0, 1], **kwargs))
    with pytest.raises(UnsupportedFormatError, match=field):
        read_wav(tmp_path / "c.wav")


def test_wav_truncated(tmp_path):
    (tmp_path / "d.wav").write_bytes(wav_bytes(np.arange(10))[:-5])
    with pytest.raises(ParseError):
        read_wav(tmp_path / "d.wav")


def test_pnm_decode_p6(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    img = read_pnm(tmp_path / "a.ppm")
    assert img.shape == (3, 1, 2)
    np.testing.assert_array_equal(img[:, 0, 0], [1, 0, 0])
    np.testing.assert_array_equal(img[:, 0, 1], [0, 0, 1])


def test_pnm_gray_to_rgb_and_round_trip(tmp_path):
    (tmp_path / "g.pgm").write_bytes(b"P5 2 2 255\n" + bytes([0, 51, 102, 255]))
    img = read_pnm(tmp_path / "g.pgm", to_rgb=True)
    assert img.shape == (3, 2, 2) and np.array_equal(img[0], img[2])
    write_pnm(tmp_path / "h.ppm", img)
    np.testing.assert_allclose(read_pnm(tmp_path / "h.ppm"), img, atol=0.5 / 255)


def test_pnm_errors(tmp_path):
    (tmp_path / "w.ppm").write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(UnsupportedFormatError, match="maxval"):
        read_pnm(tmp_path / "w.ppm")
    (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ParseError):
        read_pnm(tmp_path / "t.ppm")
    (tmp_path / "p.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(UnsupportedFormatError):
        read_pnm(tmp_path / "p.ppm")


def test_resize_identity_constant_and_center():
    img = np.random.default_rng(1).random((3, 5, 4))
    np.testing.assert_allclose(resize_bilinear(img, 5, 4), img, atol=1e-15)
    np.testing.assert_allclose(resize_bilinear(np.full((1, 3, 7), 0.3), 50, 40), 0.3,
                               atol=1e-15)
    checker = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    out = resize_bilinear(checker, 3, 3)
    assert out[0, 1, 1] == pytest.approx(0.5)
    with pytest.raises(DataError):
        resize_bilinear(np.ones((1, 1, 5)))


MANIFEST = """# header line
class\tann
class\tbob
face\tf1\tfaces/1.ppm\tann\t-\t-
face\tf2\tfaces/2.ppm\tbob\tfr1\t0.5
face\tf3\tfaces/3.ppm\tann\tfr1\t0.5
utterance\tu1\taudio/1.wav\tbob
speaking-frame\tfr1\t0.5\tf2,f3\tu1\tf2
speaking-frame\tfr1\t0.6\tf2,f3\tu1\t-
"""


def test_manifest_parse(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text(MANIFEST)
    man = load_manifest(path)
    assert man.classes == ["ann", "bob"]
    assert man.faces["f2"].frame_id == "fr1" and man.faces["f1"].timestamp is None
    # repeated frame ids are kept as separate frames
    assert [f.timestamp for f in man.frames] == [0.5, 0.6]
    assert man.frames[1].speaker_face_id is None
    assert man.resolve("faces/1.ppm") == tmp_path / "faces/1.ppm"


@pytest.mark.parametrize("bad,needle", [
    ("speaking-frame\tfr2\t1.0\tf9\tu1\t-\n", "line 10.*missing face 'f9'"),
    ("face\tf4\tx.ppm\tcarl\t-\t-\n", "line 10.*unknown label"),
    ("face\tf1\tx.ppm\tann\t-\t-\n", "line 10.*duplicate record id"),
    ("speaking-frame\tfr3\tsoon\tf2\tu1\t-\n", "line 10"),
    ("bogus\tx\n", "line 10.*unknown record kind"),
])
def test_manifest_errors_carry_line(tmp_path, bad, needle):
    path = tmp_path / "m.tsv"
    path.write_text(MANIFEST + bad)
    with pytest.raises(ManifestError, match=needle):
        load_manifest(path)


def test_synth_counts_and_determinism():
    cfg = SynthConfig(**TINY, seed=3)
    a, b = synth_dataset(cfg), synth_dataset(cfg)
    assert a.train.images.shape == (12, 3, 50, 40)
    assert len(a.test.waves) == 6 and len(a.frames) == 5
    assert np.array_equal(a.train.images, b.train.images)
    assert np.array_equal(a.frames[2].audio.samples, b.frames[2].audio.samples)
    for fr in a.frames:
        assert 2 <= len(fr.faces) <= 4
        assert fr.candidate_labels[fr.speaker_index] == fr.speaker_label
        assert len(set(fr.candidate_labels)) == len(fr.candidate_labels)
    assert np.all((a.train.images >= 0) & (a.train.images <= 1))


def test_synth_faces_nearest_own_centroid():
    ds = synth_dataset(SynthConfig(n_identities=3, train_per_identity=20,
                                   test_per_identity=20, n_frames=1, seed=0))
    x = ds.train.images.reshape(len(ds.train.images), -1)
    y = ds.train.image_labels
    centroids = np.stack([x[y == k].mean(axis=0) for k in range(3)])
    xt = ds.test.images.reshape(len(ds.test.images), -1)
    dist = np.linalg.norm(xt[:, None, :] - centroids[None], axis=2)
    assert np.mean(dist.argmin(axis=1) == ds.test.image_labels) > 0.9


def test_synth_config_validation():
    with pytest.raises(DataError):
        SynthConfig(n_identities=1)
    with pytest.raises(DataError):
        SynthConfig(n_identities=2, tone_freqs=((100.0,), (9000.0,)))


def test_export_synth_round_trip(tmp_path):
    ds = synth_dataset(SynthConfig(**TINY, seed=1))
    train_path, test_path = export_synth(ds, tmp_path, header="synthetic export")
    train = load_manifest(train_path)
    test = load_manifest(test_path)
    assert len(train.faces) == 12 and len(train.utterances) == 12
    assert len(test.frames) == 5
    face = train.faces["train_face00000"]
    np.testing.assert_allclose(read_pnm(train.resolve(face.path)), ds.train.images[0],
                               atol=0.5 / 255)
    assert train_path.read_text().startswith("# synthetic export")
