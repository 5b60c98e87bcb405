"""Command-line entry point: ``speaker-naming <command> [flags]``.

Settings come from a ``key=value`` config file (``--config``) and are
overridden by flags. Every output file starts with a header naming the tool
version and seed; metrics go to stdout both as prose and as a ``key=value``
block. Usage errors exit with status 2, runtime failures with status 1, each
with a single ``error: type=... message=...`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path


from . import __version__
from .audio import MfccConfig
from .data import SynthConfig, export_synth, synth_dataset
from .exceptions import SpeakerNamingError, UsageError
from .gradcheck import run_suite
from .layers import init_params
from .models import (FACE_EPOCHS, FINETUNE_EPOCHS, FINETUNE_LR_FACTOR, SpeakerNet,
                     TrainingConfig, architecture_summary, face_net_spec, feature_shapes,
                     fused_net_spec)
from .naming import (evaluate_naming, export_timeline, format_confusion, format_naming,
                     format_timeline, name_frames, write_text)
from .pipeline import (face_accuracy, fit_face, fit_fused, fit_rejection, rejection_accuracy,
                       split_from_manifest)
from .rejection import VARIANTS, LinearMarginModel

log = logging.getLogger("speaker_naming")

TOOL = "speaker-naming"
COMMANDS = ("synth", "train-face", "finetune-fused", "train-reject", "eval-face",
            "eval-reject", "name", "gradcheck", "params")
GRADCHECK_TOLERANCE = 1e-4
SVM_EPOCHS = 20


@dataclass
class RunConfig:
    """Every setting a command may read. Empty paths mean "not given"."""

    seed: int = 0
    out_dir: str = "."
    data_dir: str = ""
    train_manifest: str = ""
    test_manifest: str = ""
    model: str = ""
    face_model: str = ""
    fused_model: str = ""
    reject_model: str = ""
    variant: str = "C"
    threshold: float = 0.0
    # training; ``epochs`` of 0 means the stage default
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 0
    momentum: float = 0.9
    optimizer: str = "adam"
    fan_in_power: float = 0.5
    finetune_lr_factor: float = FINETUNE_LR_FACTOR
    pairs_per_face: int = 5
    # margin classifier
    svm_lambda: float = 1e-2
    negatives_per_positive: float = 1.0
    # audio features
    window_ms: float = 20.0
    shift_ms: float = 10.0
    n_coeffs: int = 25
    n_mel_filters: int = 40
    fft_size: int = 512
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10
    delta_window: int = 2
    # synthetic data
    n_identities: int = 6
    train_per_identity: int = 200
    test_per_identity: int = 50
    n_frames: int = 300
    image_noise: float = 0.25
    audio_noise: float = 0.05
    jitter: float = 3.0
    # naming output and reporting
    gap_tolerance: float = 0.5
    arch: str = "fused"
    n_classes: int = 6
    gradcheck_seeds: int = 10

    def mfcc(self) -> MfccConfig:
        return MfccConfig(self.window_ms, self.shift_ms, self.n_coeffs, self.n_mel_filters,
                          self.fft_size, self.pre_emphasis, self.log_floor, self.delta_window)

    def synth(self) -> SynthConfig:
        return SynthConfig(n_identities=self.n_identities,
                           train_per_identity=self.train_per_identity,
                           test_per_identity=self.test_per_identity, n_frames=self.n_frames,
                           image_noise=self.image_noise, audio_noise=self.audio_noise,
                           jitter=self.jitter, seed=self.seed)

    def training(self, n_classes, lr, epochs) -> TrainingConfig:
        return TrainingConfig(lr=lr, batch_size=self.batch, epochs=epochs,
                              momentum=self.momentum, seed=self.seed, n_classes=n_classes,
                              optimizer=self.optimizer)

    def header(self, command: str) -> str:
        return f"{TOOL} {__version__} seed={self.seed} command={command}"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise UsageError(f"config key {key!r} expects {kind}, got {value!r}") from None
    return value


def parse_config_text(text: str, source: str = "config") -> dict:
    """``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source} line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise UsageError(f"{source} line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


_FLAG_KEYS = {"seed": "seed", "out_dir": "out_dir", "model": "model",
              "face_model": "face_model", "fused_model": "fused_model",
              "reject_model": "reject_model", "variant": "variant", "threshold": "threshold",
              "epochs": "epochs", "lr": "lr", "batch": "batch",
              "train_manifest": "train_manifest", "test_manifest": "test_manifest",
              "data_dir": "data_dir", "arch": "arch"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {args.config!r} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    if cfg.variant not in VARIANTS:
        raise UsageError(f"variant must be one of {', '.join(VARIANTS)}")
    if cfg.arch not in ("face", "fused"):
        raise UsageError("arch must be face or fused")
    if cfg.epochs < 0 or cfg.batch < 1 or cfg.lr < 0:
        raise UsageError("epochs must be non-negative, batch positive, lr non-negative")
    return cfg


def log_config(cfg: RunConfig, command: str) -> None:
    log.info("%s", cfg.header(command))
    for key, value in dataclasses.asdict(cfg).items():
        log.info("config %s=%s", key, value)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, key: str, command: str) -> str:
    value = getattr(cfg, key)
    if not value:
        raise UsageError(f"{command} needs --{key.replace('_', '-')}")
    return value


def _load_net(path: str, fused: bool | None, role: str) -> SpeakerNet:
    if not Path(path).is_file():
        raise UsageError(f"{role} model {path!r} not found")
    net, _ = SpeakerNet.load(path)
    if fused is not None and net.is_fused != fused:
        kind = "fused" if fused else "face-alone"
        raise UsageError(f"{role} model {path!r} is not a {kind} network")
    return net


def _models_for_variant(cfg: RunConfig, variant: str, command: str):
    face = fused = None
    if variant == "B":
        face = _load_net(_require(cfg, "face_model", command), False, "face")
    else:
        fused = _load_net(_require(cfg, "fused_model", command), True, "fused")
    return face, fused


def _out_path(cfg: RunConfig, name: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _meta(cfg: RunConfig, command: str, **extra) -> dict:
    return {"tool": TOOL, "version": __version__, "seed": cfg.seed, "command": command,
            **extra}


def _format_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report(cfg: RunConfig, command: str, prose: list[str], metrics: dict) -> None:
    """Print metrics and store them in ``<out_dir>/<command>.metrics.txt``."""
    block = ["[metrics]", *(f"{k}={_format_value(v)}" for k, v in metrics.items())]
    text = "\n".join([*prose, "", *block]) + "\n"
    sys.stdout.write(text)
    if command not in ("params", "gradcheck"):
        write_text(_out_path(cfg, f"{command}.metrics.txt"), f"# {cfg.header(command)}\n" + text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    ds = synth_dataset(cfg.synth())
    target = Path(cfg.data_dir or cfg.out_dir)
    train_path, test_path = export_synth(ds, target, cfg.header("synth"))
    prose = [f"wrote {train_path} and {test_path}",
             f"{len(ds.train.images)} train faces, {len(ds.test.images)} test faces, "
             f"{len(ds.frames)} speaking frames"]
    report(cfg, "synth", prose, {"train_faces": len(ds.train.images),
                                 "test_faces": len(ds.test.images),
                                 "speaking_frames": len(ds.frames)})
    return 0


def cmd_train_face(cfg: RunConfig) -> int:
    split = split_from_manifest(_require(cfg, "train_manifest", "train-face"), cfg.mfcc())
    tcfg = cfg.training(split.n_classes, cfg.lr, cfg.epochs or FACE_EPOCHS)
    model, history = fit_face(split, tcfg, cfg.fan_in_power)
    path = _out_path(cfg, "face.model")
    model.save(path, _meta(cfg, "train-face", classes=split.classes, loss_history=history))
    acc, _ = face_accuracy(model, split, cfg.seed)
    prose = [f"saved {path}",
             *(f"epoch {i}: mean loss {h:.6f}" for i, h in enumerate(history, 1)),
             f"training accuracy {acc:.4f}"]
    report(cfg, "train-face", prose, {"final_loss": history[-1], "train_accuracy": acc,
                                      "epochs": len(history)})
    return 0


def cmd_finetune_fused(cfg: RunConfig) -> int:
    face = _load_net(_require(cfg, "face_model", "finetune-fused"), False, "face")
    split = split_from_manifest(_require(cfg, "train_manifest", "finetune-fused"), cfg.mfcc())
    lr = cfg.lr * cfg.finetune_lr_factor
    tcfg = cfg.training(split.n_classes, lr, cfg.epochs or FINETUNE_EPOCHS)
    model, history = fit_fused(face, split, tcfg, cfg.fan_in_power, cfg.pairs_per_face)
    path = _out_path(cfg, "fused.model")
    model.save(path, _meta(cfg, "finetune-fused", classes=split.classes,
                           loss_history=history, lr=lr))
    prose = [f"saved {path}", f"fine-tuning learning rate {lr:g}",
             *(f"epoch {i}: mean loss {h:.6f}" for i, h in enumerate(history, 1))]
    report(cfg, "finetune-fused", prose, {"final_loss": history[-1], "lr": lr,
                                          "epochs": len(history)})
    return 0


def cmd_train_reject(cfg: RunConfig) -> int:
    face, fused = _models_for_variant(cfg, cfg.variant, "train-reject")
    split = split_from_manifest(_require(cfg, "train_manifest", "train-reject"), cfg.mfcc())
    model = fit_rejection(cfg.variant, face, fused, split, cfg.svm_lambda,
                          cfg.epochs or SVM_EPOCHS, cfg.seed, cfg.pairs_per_face,
                          cfg.negatives_per_positive)
    path = _out_path(cfg, f"reject_{cfg.variant}.model")
    model.save(path, cfg.header("train-reject"))
    acc = rejection_accuracy(model, face, fused, split, cfg.seed, cfg.pairs_per_face,
                             cfg.negatives_per_positive)
    prose = [f"saved {path}", f"variant {cfg.variant}, {model.dim} features",
             f"objective {model.history[0]:.4f} -> {model.history[-1]:.4f}",
             f"training pair accuracy {acc:.4f}"]
    report(cfg, "train-reject", prose, {"variant": cfg.variant, "train_pair_accuracy": acc,
                                        "final_objective": model.history[-1]})
    return 0


def cmd_eval_face(cfg: RunConfig) -> int:
    model = _load_net(_require(cfg, "model", "eval-face"), None, "evaluated")
    split = split_from_manifest(_require(cfg, "test_manifest", "eval-face"), cfg.mfcc())
    if model.spec.n_classes != split.n_classes:
        raise UsageError(f"model has {model.spec.n_classes} classes, "
                         f"manifest declares {split.n_classes}")
    acc, conf = face_accuracy(model, split, cfg.seed)
    path = _out_path(cfg, "eval-face.confusion.tsv")
    write_text(path, format_confusion(conf, split.classes, cfg.header("eval-face")))
    kind = "fused" if model.is_fused else "face-alone"
    prose = [f"{kind} accuracy {acc:.4f} on {len(split.images)} test faces",
             f"confusion matrix in {path}"]
    report(cfg, "eval-face", prose, {"model": kind, "accuracy": acc,
                                     "n_faces": len(split.images)})
    return 0


def cmd_eval_reject(cfg: RunConfig) -> int:
    margin = LinearMarginModel.load(_require(cfg, "reject_model", "eval-reject"))
    face, fused = _models_for_variant(cfg, margin.variant, "eval-reject")
    split = split_from_manifest(_require(cfg, "test_manifest", "eval-reject"), cfg.mfcc())
    acc = rejection_accuracy(margin, face, fused, split, cfg.seed + 1, cfg.pairs_per_face,
                             cfg.negatives_per_positive)
    prose = [f"variant {margin.variant} pair accuracy {acc:.4f}"]
    report(cfg, "eval-reject", prose, {"variant": margin.variant, "pair_accuracy": acc})
    return 0


def cmd_name(cfg: RunConfig) -> int:
    margin = LinearMarginModel.load(_require(cfg, "reject_model", "name"))
    face = None
    if margin.variant == "B":
        face = _load_net(_require(cfg, "face_model", "name"), False, "face")
    fused = _load_net(_require(cfg, "fused_model", "name"), True, "fused")
    split = split_from_manifest(_require(cfg, "test_manifest", "name"), cfg.mfcc())
    if not split.frames:
        raise UsageError("test manifest has no speaking frames")
    results = name_frames(face, fused, margin, split.frames, cfg.threshold)
    header = cfg.header("name")
    naming_path = _out_path(cfg, "naming.tsv")
    timeline_path = _out_path(cfg, "timeline.tsv")
    write_text(naming_path, format_naming(results, split.classes, header))
    write_text(timeline_path, format_timeline(export_timeline(results, cfg.gap_tolerance),
                                              split.classes, header))
    rejected = sum(r.rejected_all for r in results)
    prose = [f"named {len(results)} frames; per-frame results in {naming_path}",
             f"timeline in {timeline_path}",
             f"{rejected} frames had every candidate rejected"]
    metrics = {"frames": len(results), "rejected_all": rejected}
    if all(f.speaker_index is not None for f in split.frames):
        ev = evaluate_naming(results, split.frames, split.n_classes)
        conf_path = _out_path(cfg, "name.confusion.tsv")
        write_text(conf_path, format_confusion(ev.confusion, split.classes, header))
        prose.append(f"naming accuracy {ev.accuracy:.4f} ({ev.n_correct}/{ev.n_frames}); "
                     f"speaker face chosen in {ev.n_face_correct} frames")
        metrics.update(accuracy=ev.accuracy, correct=ev.n_correct,
                       face_correct=ev.n_face_correct)
    report(cfg, "name", prose, metrics)
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    worst = run_suite(range(cfg.seed, cfg.seed + cfg.gradcheck_seeds))
    top = max(worst.values())
    prose = [f"{name:<28}{err:.3e}" for name, err in sorted(worst.items())]
    status = "pass" if top < GRADCHECK_TOLERANCE else "fail"
    prose.append(f"max relative error {top:.3e} ({status}, tolerance {GRADCHECK_TOLERANCE:g})")
    report(cfg, "gradcheck", prose, {"max_relative_error": f"{top:.3e}", "status": status})
    return 0 if status == "pass" else 1


def cmd_params(cfg: RunConfig) -> int:
    if cfg.model:
        net = _load_net(cfg.model, None, "inspected")
    else:
        build = fused_net_spec if cfg.arch == "fused" else face_net_spec
        spec = build(cfg.n_classes)
        net = SpeakerNet(spec, init_params(spec, cfg.seed))
    total = sum(a.size for _, a in net.params.named_arrays())
    stages = " -> ".join("x".join(map(str, s)) for s in feature_shapes(net))
    prose = [architecture_summary(net), "", f"shapes: {stages}"]
    report(cfg, "params", prose, {"arch": "fused" if net.is_fused else "face",
                                  "n_classes": net.spec.n_classes,
                                  "total_parameters": total})
    return 0


HANDLERS = {"synth": cmd_synth, "train-face": cmd_train_face,
            "finetune-fused": cmd_finetune_fused, "train-reject": cmd_train_reject,
            "eval-face": cmd_eval_face, "eval-reject": cmd_eval_reject, "name": cmd_name,
            "gradcheck": cmd_gradcheck, "params": cmd_params}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _error_line(kind: str, message: str) -> str:
    flat = " ".join(str(message).split())
    return f"error: type={kind} message={flat}"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(_error_line("UsageError", message) + "\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=TOOL, description="Multimodal speaker naming toolkit.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    parser.add_argument("command", choices=COMMANDS, metavar="command",
                        help="one of: " + ", ".join(COMMANDS))
    parser.add_argument("--config", help="key=value settings file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--data-dir", dest="data_dir", help="synth output directory")
    parser.add_argument("--train-manifest", dest="train_manifest")
    parser.add_argument("--test-manifest", dest="test_manifest")
    parser.add_argument("--model", help="model to evaluate or inspect")
    parser.add_argument("--face-model", dest="face_model")
    parser.add_argument("--fused-model", dest="fused_model")
    parser.add_argument("--reject-model", dest="reject_model")
    parser.add_argument("--variant", choices=VARIANTS)
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--arch", choices=("face", "fused"), help="architecture for params")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress the config log")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        log_config(cfg, args.command)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(_error_line("UsageError", exc) + "\n")
        return 2
    except (SpeakerNamingError, OSError, ValueError) as exc:
        sys.stderr.write(_error_line(type(exc).__name__, exc) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
