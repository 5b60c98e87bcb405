"""Dataset ingestion and the synthetic multimodal generator.

Readers cover exactly one variant of each format: PCM16 mono RIFF/WAVE audio,
binary PNM (P5/P6, maxval 255) images and a tab-delimited manifest. Anything
else is rejected with an error naming the offending field.

Manifest format, one record per line, ``#`` starts a comment::

    class           <label>
    face            <record_id> <path> <subject> <frame_id|-> <timestamp|->
    utterance       <record_id> <path> <subject>
    speaking-frame  <frame_id> <timestamp> <face_id,face_id,...> <utterance_id> <speaker_face_id|->

Fields are separated by single tabs. Paths are relative to the manifest.
"""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform
from .exceptions import (DataError, ManifestError, ParseError,
                         UnsupportedFormatError)

# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a 16-bit mono little-endian PCM RIFF/WAVE file."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"{path}: not a RIFF/WAVE file (riff header)")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise ParseError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise ParseError(f"{path}: missing fmt chunk")
    if payload is None:
        raise ParseError(f"{path}: missing data chunk")
    format_tag, channels, rate, _, block_align, bits = fmt
    if format_tag != 1:
        raise UnsupportedFormatError(
            f"{path}: format_tag={format_tag}, only PCM (1) is supported")
    if channels != 1:
        raise UnsupportedFormatError(
            f"{path}: channels={channels}, only mono is supported")
    if bits != 16:
        raise UnsupportedFormatError(
            f"{path}: bits_per_sample={bits}, only 16 is supported")
    if block_align != 2:
        raise UnsupportedFormatError(f"{path}: block_align={block_align}")
    if rate <= 0:
        raise UnsupportedFormatError(f"{path}: sample_rate={rate}")
    if len(payload) % 2:
        raise ParseError(f"{path}: odd number of data bytes")
    samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wav: Waveform) -> None:
    """Write ``wav`` as PCM16 mono, rounding and clipping to the int16 range."""
    ints = np.clip(np.round(np.asarray(wav.samples) * 32768.0), -32768, 32767)
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wav.sample_rate))
        fh.writeframes(ints.astype("<i2").tobytes())


# ---------------------------------------------------------------------------
# PNM
# ---------------------------------------------------------------------------


def _pnm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise ParseError("truncated PNM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() \
                    and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path, to_rgb: bool = False) -> np.ndarray:
    """Decode a binary P5/P6 image into a ``(C, H, W)`` array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"{path}: magic={magic!r}, need P5 or P6")
    try:
        (w_tok, h_tok, max_tok), start = _pnm_tokens(data[2:], 3)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise ParseError(f"{path}: bad PNM header") from exc
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval={maxval}, only 255 is supported")
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: bad extents {width}x{height}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = data[2 + start:2 + start + need]
    if len(raster) < need:
        raise ParseError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    img = img.reshape(height, width, channels).transpose(2, 0, 1)
    if to_rgb and channels == 1:
        img = np.repeat(img, 3, axis=0)
    return np.ascontiguousarray(img)


def write_pnm(path, img: np.ndarray) -> None:
    """Write a ``(1|3, H, W)`` image in [0, 1] as binary P5/P6."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {img.shape}")
    c, h, w = img.shape
    raster = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + raster.transpose(1, 2, 0).tobytes())


def resize_bilinear(img: np.ndarray, out_h: int = 50, out_w: int = 40) -> np.ndarray:
    """Bilinear resize of a ``(C, H, W)`` image on a corner-aligned grid."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DataError(f"expected (C, H, W) image, got {img.shape}")
    _, h, w = img.shape
    if h < 2 or w < 2:
        raise DataError(f"source extents must be at least 2, got {h}x{w}")
    if out_h < 1 or out_w < 1:
        raise DataError(f"bad output extents {out_h}x{out_w}")

    def grid(n_in, n_out):
        if n_out == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        return lo, pos - lo

    y0, fy = grid(h, out_h)
    x0, fx = grid(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x0 + 1] * fx
    bot = img[:, y0 + 1][:, :, x0] * (1 - fx) + img[:, y0 + 1][:, :, x0 + 1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class FaceRecord:
    record_id: str
    path: str
    subject: str
    frame_id: str | None = None
    timestamp: float | None = None


@dataclass
class UtteranceRecord:
    record_id: str
    path: str
    subject: str


@dataclass
class FrameRecord:
    frame_id: str
    timestamp: float
    face_ids: list[str]
    utterance_id: str
    speaker_face_id: str | None


@dataclass
class Manifest:
    classes: list[str] = field(default_factory=list)
    faces: dict[str, FaceRecord] = field(default_factory=dict)
    utterances: dict[str, UtteranceRecord] = field(default_factory=dict)
    frames: list[FrameRecord] = field(default_factory=list)
    root: Path = Path(".")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def class_index(self, label: str) -> int:
        return self.classes.index(label)


_FIELD_COUNTS = {"class": 2, "face": 6, "utterance": 4, "speaking-frame": 6}


def _opt(value: str):
    return None if value == "-" else value


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest file; errors carry the line number."""
    path = Path(path)
    man = Manifest(root=path.parent)
    lines: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.rstrip().split("\t")
        kind = fields[0]
        if kind not in _FIELD_COUNTS:
            raise ManifestError(f"line {lineno}: unknown record kind {kind!r}")
        if len(fields) != _FIELD_COUNTS[kind]:
            raise ManifestError(
                f"line {lineno}: {kind} record needs {_FIELD_COUNTS[kind]} "
                f"fields, got {len(fields)}")
        lines.append((lineno, fields))

    for lineno, f in lines:
        if f[0] == "class":
            if f[1] in man.classes:
                raise ManifestError(f"line {lineno}: duplicate class {f[1]!r}")
            man.classes.append(f[1])

    ids: set[str] = set()

    def check_id(lineno, rid):
        if rid in ids:
            raise ManifestError(f"line {lineno}: duplicate record id {rid!r}")
        ids.add(rid)

    def check_label(lineno, label):
        if label not in man.classes:
            raise ManifestError(f"line {lineno}: unknown label {label!r}")

    try:
        for lineno, f in lines:
            if f[0] == "face":
                check_id(lineno, f[1])
                check_label(lineno, f[3])
                ts = _opt(f[5])
                man.faces[f[1]] = FaceRecord(
                    f[1], f[2], f[3], _opt(f[4]), None if ts is None else float(ts))
            elif f[0] == "utterance":
                check_id(lineno, f[1])
                check_label(lineno, f[3])
                man.utterances[f[1]] = UtteranceRecord(f[1], f[2], f[3])
        for lineno, f in lines:
            if f[0] != "speaking-frame":
                continue
            face_ids = [v for v in f[3].split(",") if v]
            if not face_ids:
                raise ManifestError(f"line {lineno}: frame {f[1]!r} has no faces")
            for fid in face_ids:
                if fid not in man.faces:
                    raise ManifestError(
                        f"line {lineno}: frame {f[1]!r} references missing face {fid!r}")
            if f[4] not in man.utterances:
                raise ManifestError(
                    f"line {lineno}: frame {f[1]!r} references missing utterance {f[4]!r}")
            speaker = _opt(f[5])
            if speaker is not None and speaker not in face_ids:
                raise ManifestError(
                    f"line {lineno}: speaker {speaker!r} is not a candidate of frame {f[1]!r}")
            man.frames.append(FrameRecord(f[1], float(f[2]), face_ids, f[4], speaker))
    except ValueError as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"line {lineno}: {exc}") from exc
    return man


def write_manifest(path, man: Manifest, header: str = "") -> None:
    out = [f"# {line}" for line in header.splitlines()]
    out += [f"class\t{c}" for c in man.classes]
    for r in man.faces.values():
        ts = "-" if r.timestamp is None else repr(r.timestamp)
        out.append(f"face\t{r.record_id}\t{r.path}\t{r.subject}\t{r.frame_id or '-'}\t{ts}")
    for r in man.utterances.values():
        out.append(f"utterance\t{r.record_id}\t{r.path}\t{r.subject}")
    for r in man.frames:
        out.append(f"speaking-frame\t{r.frame_id}\t{r.timestamp!r}\t"
                   f"{','.join(r.face_ids)}\t{r.utterance_id}\t{r.speaker_face_id or '-'}")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Knobs of the synthetic multimodal dataset.

    ``tone_freqs`` holds one tuple of sine frequencies (Hz) per identity; when
    None, three frequencies per identity are drawn from the seed.
    """

    n_identities: int = 6
    train_per_identity: int = 200
    test_per_identity: int = 50
    n_frames: int = 300
    image_noise: float = 0.25
    audio_noise: float = 0.05
    jitter: float = 3.0
    n_blobs: int = 5
    n_distractors: int = 2
    tone_freqs: tuple | None = None
    sample_rate: int = 16000
    utterance_seconds: float = 0.5
    frame_spacing: float = 0.04
    image_shape: tuple = (3, 50, 40)
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 2:
            raise DataError("need at least two identities")
        if self.train_per_identity < 1 or self.test_per_identity < 1:
            raise DataError("need at least one sample per identity and split")
        if self.tone_freqs is not None:
            if len(self.tone_freqs) != self.n_identities:
                raise DataError("need one tone tuple per identity")
            nyquist = self.sample_rate / 2
            if any(f <= 0 or f >= nyquist for fs in self.tone_freqs for f in fs):
                raise DataError("tone frequencies must lie in (0, Nyquist)")


@dataclass
class SpeakingFrameSample:
    frame_id: str
    timestamp: float
    faces: np.ndarray  # (N, C, H, W)
    face_ids: list[str]
    audio: Waveform
    speaker_index: int
    speaker_label: int
    candidate_labels: list[int]


@dataclass
class SynthSplit:
    images: np.ndarray  # (n, C, H, W)
    image_labels: np.ndarray
    waves: list[Waveform]
    wave_labels: np.ndarray


@dataclass
class SynthDataset:
    config: SynthConfig
    classes: list[str]
    train: SynthSplit
    test: SynthSplit
    frames: list[SpeakingFrameSample]


class _Identity:
    def __init__(self, rng: np.random.Generator, cfg: SynthConfig, tones):
        _, h, w = cfg.image_shape
        self.centers = np.column_stack([rng.uniform(0.15 * h, 0.85 * h, cfg.n_blobs),
                                        rng.uniform(0.15 * w, 0.85 * w, cfg.n_blobs)])
        self.sigmas = rng.uniform(2.5, 6.0, cfg.n_blobs)
        self.colors = rng.uniform(-0.5, 0.5, (cfg.n_blobs, 3))
        self.tones = np.asarray(tones, dtype=np.float64)
        self.tone_amps = rng.uniform(0.4, 1.0, len(self.tones))


def _blobs(shape, centers, sigmas, colors):
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((3, h, w))
    for (cy, cx), s, col in zip(centers, sigmas, colors):
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += col[:, None, None] * g
    return img


def _render_face(ident: _Identity, cfg: SynthConfig, rng: np.random.Generator):
    shift = rng.uniform(-cfg.jitter, cfg.jitter, 2)
    img = 0.5 + _blobs(cfg.image_shape, ident.centers + shift, ident.sigmas, ident.colors)
    _, h, w = cfg.image_shape
    if cfg.n_distractors:
        d_centers = np.column_stack([rng.uniform(0, h, cfg.n_distractors),
                                     rng.uniform(0, w, cfg.n_distractors)])
        img += _blobs(cfg.image_shape, d_centers,
                      rng.uniform(2.5, 6.0, cfg.n_distractors),
                      rng.uniform(-0.5, 0.5, (cfg.n_distractors, 3)))
    img *= rng.uniform(0.8, 1.2)
    img += rng.normal(0.0, cfg.image_noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if cfg.image_shape[0] == 1:
        img = img.mean(axis=0, keepdims=True)
    return img


def _render_utterance(ident: _Identity, cfg: SynthConfig, rng: np.random.Generator):
    n = int(round(cfg.utterance_seconds * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    amps = ident.tone_amps * rng.uniform(0.7, 1.3, len(ident.tones))
    phases = rng.uniform(0, 2 * np.pi, len(ident.tones))
    freqs = ident.tones * rng.uniform(0.98, 1.02)
    sig = np.sum(amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]),
                 axis=0)
    sig = sig / np.abs(sig).max() * rng.uniform(0.3, 0.6)
    sig += rng.normal(0.0, cfg.audio_noise, n)
    return Waveform(np.clip(sig, -1.0, 1.0), cfg.sample_rate)


def _default_tones(rng: np.random.Generator, n_identities: int, nyquist: float):
    pool = np.geomspace(150.0, min(4000.0, 0.45 * nyquist), 6 * n_identities)
    return [tuple(sorted(rng.choice(pool, 3, replace=False))) for _ in range(n_identities)]


def synth_dataset(cfg: SynthConfig | None = None) -> SynthDataset:
    """Generate train/test faces and utterances plus test speaking frames.

    Every random draw comes from one generator seeded by ``cfg.seed``; train
    and test samples consume distinct draws, so the splits never share a
    sample.
    """
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    tones = cfg.tone_freqs or _default_tones(rng, cfg.n_identities, cfg.sample_rate / 2)
    idents = [_Identity(rng, cfg, tones[i]) for i in range(cfg.n_identities)]
    classes = [f"id{i}" for i in range(cfg.n_identities)]

    def make_split(per_identity):
        labels = np.repeat(np.arange(cfg.n_identities), per_identity)
        images = np.stack([_render_face(idents[k], cfg, rng) for k in labels])
        waves = [_render_utterance(idents[k], cfg, rng) for k in labels]
        return SynthSplit(images, labels.copy(), waves, labels.copy())

    train = make_split(cfg.train_per_identity)
    test = make_split(cfg.test_per_identity)

    frames = []
    max_n = min(4, cfg.n_identities)
    for i in range(cfg.n_frames):
        n = int(rng.integers(2, max_n + 1)) if max_n >= 2 else 1
        members = rng.choice(cfg.n_identities, n, replace=False)
        speaker = int(rng.integers(n))
        faces = np.stack([_render_face(idents[k], cfg, rng) for k in members])
        audio = _render_utterance(idents[members[speaker]], cfg, rng)
        frames.append(SpeakingFrameSample(
            frame_id=f"f{i:05d}", timestamp=round(i * cfg.frame_spacing, 6),
            faces=faces, face_ids=[f"f{i:05d}_b{j}" for j in range(n)],
            audio=audio, speaker_index=speaker, speaker_label=int(members[speaker]),
            candidate_labels=[int(m) for m in members]))
    return SynthDataset(cfg, classes, train, test, frames)


def export_synth(ds: SynthDataset, out_dir, header: str = "") -> tuple[Path, Path]:
    """Write the dataset as PNM/WAV files plus ``train.tsv`` and ``test.tsv``."""
    out_dir = Path(out_dir)
    (out_dir / "faces").mkdir(parents=True, exist_ok=True)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    def dump_split(name, split: SynthSplit, frames):
        man = Manifest(classes=list(ds.classes))
        for i, (img, lab) in enumerate(zip(split.images, split.image_labels)):
            rid = f"{name}_face{i:05d}"
            rel = f"faces/{rid}.ppm"
            write_pnm(out_dir / rel, img)
            man.faces[rid] = FaceRecord(rid, rel, ds.classes[lab])
        for i, (wav, lab) in enumerate(zip(split.waves, split.wave_labels)):
            rid = f"{name}_utt{i:05d}"
            rel = f"audio/{rid}.wav"
            write_wav(out_dir / rel, wav)
            man.utterances[rid] = UtteranceRecord(rid, rel, ds.classes[lab])
        for fr in frames:
            for j, (fid, img) in enumerate(zip(fr.face_ids, fr.faces)):
                rel = f"faces/{fid}.ppm"
                write_pnm(out_dir / rel, img)
                man.faces[fid] = FaceRecord(fid, rel, ds.classes[fr.candidate_labels[j]],
                                            fr.frame_id, fr.timestamp)
            uid = f"{fr.frame_id}_utt"
            rel = f"audio/{uid}.wav"
            write_wav(out_dir / rel, fr.audio)
            man.utterances[uid] = UtteranceRecord(uid, rel, ds.classes[fr.speaker_label])
            man.frames.append(FrameRecord(fr.frame_id, fr.timestamp, list(fr.face_ids),
                                          uid, fr.face_ids[fr.speaker_index]))
        path = out_dir / f"{name}.tsv"
        write_manifest(path, man, header)
        return path

    return dump_split("train", ds.train, []), dump_split("test", ds.test, ds.frames)
