"""Per-frame speaker naming, scoring, and speaking-activity timelines."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DataError, EvaluationError
from .models import SpeakerNet, predict_identity
from .rejection import LinearMarginModel, variant_features


@dataclass
class SpeakingFrame:
    """One video frame with ``N`` candidate faces and the utterance heard.

    ``speaker_index`` and ``speaker_identity`` are ground truth, used only for
    evaluation.
    """

    frame_id: str
    timestamp: float
    faces: np.ndarray  # (N, C, H, W)
    box_ids: Sequence[int]
    audio: np.ndarray  # 75-D
    speaker_index: int | None = None
    speaker_identity: int | None = None

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.float64)
        if self.faces.ndim == 3:
            self.faces = self.faces[None]
        if len(self.box_ids) != len(self.faces):
            raise DataError(f"frame {self.frame_id}: {len(self.faces)} faces "
                            f"but {len(self.box_ids)} box ids")


@dataclass
class NamingResult:
    frame_id: str
    timestamp: float
    face_index: int
    identity: int
    margin: float
    probability: float
    rejected_all: bool


def name_frame(face_model: SpeakerNet | None, fused_model: SpeakerNet,
               margin_model: LinearMarginModel, frame: SpeakingFrame,
               threshold: float = 0.0) -> NamingResult:
    """Pick the most confident matched face-audio pair and name it.

    Every candidate is scored by the margin model; candidates below
    ``threshold`` are rejected and the highest-scoring survivor wins (ties go
    to the lowest box id). When every candidate is rejected the overall best
    one is still returned, flagged ``rejected_all``.
    """
    n = len(frame.faces)
    if n == 0:
        raise DataError(f"frame {frame.frame_id} has no candidate faces")
    audio = np.tile(np.asarray(frame.audio, dtype=np.float64).reshape(1, -1), (n, 1))
    feats = variant_features(margin_model.variant, face_model, fused_model,
                             frame.faces, audio)
    margins = np.atleast_1d(margin_model.margin(feats))
    order = sorted(range(n), key=lambda i: (-margins[i], frame.box_ids[i]))
    best = order[0]
    label, probs = predict_identity(fused_model, frame.faces[best], audio[best])
    return NamingResult(frame.frame_id, float(frame.timestamp), best, label,
                        float(margins[best]), float(probs[label]),
                        bool(margins[best] < threshold))


def name_frames(face_model, fused_model, margin_model, frames, threshold=0.0):
    return [name_frame(face_model, fused_model, margin_model, fr, threshold)
            for fr in frames]


@dataclass
class NamingEvaluation:
    accuracy: float
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    n_frames: int
    n_correct: int
    n_face_correct: int


def evaluate_naming(results: Sequence[NamingResult], frames: Sequence[SpeakingFrame],
                    n_classes: int) -> NamingEvaluation:
    """Score naming results against ground truth.

    A frame counts as correct when both the chosen face and the assigned
    identity are right. The confusion matrix (rows true, columns predicted)
    covers the frames whose face was chosen correctly.
    """
    by_id = {r.frame_id: r for r in results}
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    per_class_total = np.zeros(n_classes, dtype=np.int64)
    per_class_hit = np.zeros(n_classes, dtype=np.int64)
    correct = face_correct = 0
    for fr in frames:
        if fr.speaker_index is None or fr.speaker_identity is None:
            raise EvaluationError(f"frame {fr.frame_id} has no ground truth")
        res = by_id.get(fr.frame_id)
        if res is None:
            raise EvaluationError(f"no result for frame {fr.frame_id}")
        truth = fr.speaker_identity
        per_class_total[truth] += 1
        if res.face_index == fr.speaker_index:
            face_correct += 1
            confusion[truth, res.identity] += 1
            if res.identity == truth:
                correct += 1
                per_class_hit[truth] += 1
    n = len(frames)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(per_class_total > 0, per_class_hit / per_class_total, np.nan)
    return NamingEvaluation(correct / n if n else 0.0, confusion, per_class,
                            n, correct, face_correct)


@dataclass(frozen=True)
class Interval:
    identity: int
    start: float
    end: float


def export_timeline(results: Sequence[NamingResult], gap_tolerance: float = 0.5) -> list[Interval]:
    """Merge consecutive same-identity frames no further apart than the tolerance."""
    ordered = sorted(results, key=lambda r: r.timestamp)
    intervals: list[Interval] = []
    cur = None
    for r in ordered:
        if cur is not None and r.identity == cur[0] and r.timestamp - cur[2] <= gap_tolerance:
            cur[2] = r.timestamp
            continue
        if cur is not None:
            intervals.append(Interval(*cur))
        cur = [r.identity, r.timestamp, r.timestamp]
    if cur is not None:
        intervals.append(Interval(*cur))
    return sorted(intervals, key=lambda iv: iv.start)


# ---------------------------------------------------------------------------
# text outputs
# ---------------------------------------------------------------------------


def _name(classes, k):
    return classes[k] if classes is not None else str(k)


def format_naming(results, classes=None, header="") -> str:
    lines = [f"# {h}" for h in header.splitlines()]
    lines.append("frame_id\ttimestamp\tface_index\tidentity\tmargin\tprobability\trejected")
    for r in results:
        lines.append(f"{r.frame_id}\t{r.timestamp:.6f}\t{r.face_index}\t"
                     f"{_name(classes, r.identity)}\t{r.margin:.9g}\t{r.probability:.9g}\t"
                     f"{int(r.rejected_all)}")
    return "\n".join(lines) + "\n"


def format_timeline(intervals, classes=None, header="") -> str:
    lines = [f"# {h}" for h in header.splitlines()]
    lines.append("identity\tstart_seconds\tend_seconds")
    for iv in intervals:
        lines.append(f"{_name(classes, iv.identity)}\t{iv.start:.6f}\t{iv.end:.6f}")
    return "\n".join(lines) + "\n"


def format_confusion(confusion, classes=None, header="") -> str:
    n = len(confusion)
    names = list(classes) if classes is not None else [str(k) for k in range(n)]
    lines = [f"# {h}" for h in header.splitlines()]
    lines.append("\t".join(["true\\pred", *names]))
    for k, row in enumerate(confusion):
        lines.append("\t".join([names[k], *(str(int(v)) for v in row)]))
    return "\n".join(lines) + "\n"


def write_text(path, text: str) -> None:
    Path(path).write_text(text)
