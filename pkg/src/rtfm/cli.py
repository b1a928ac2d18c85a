"""Command-line entry point wiring the library into reproducible runs.

Subcommands: ``gen`` (synthetic dataset), ``train`` (fit a model, write
checkpoint + log + curves), ``eval`` (score a dataset against a
checkpoint, write report + per-video CSVs + figures), ``simulate``
(separability curve + shape check), ``gradcheck`` (finite-difference
audit of the objective's gradients), ``sweep`` (retrain across k or
margin values).

Configuration layering, lowest to highest precedence: dataclass
defaults, then a JSON config file (``--config``), then per-field flags.
Unknown config keys are hard errors — silent typos corrupt experiments.
Every run writes ``resolved_config.json`` into its output directory with
enough information to reproduce it.

Exit codes: 0 success, 1 validation error (bad config, bad inputs),
2 runtime failure (training divergence, failed gradient or shape check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dio
from . import losses as ls
from . import metrics
from . import model as md
from . import plots
from . import theory
from . import trainer

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class CliError(ValueError):
    """Bad invocation or configuration; maps to exit code 1."""


@dataclass(frozen=True)
class EvalOptions:
    """Evaluation plumbing: snippet-to-frame expansion factor and how
    many per-video figures to render."""

    expand_frames: int = 1
    plot_limit: int = 8

    def __post_init__(self):
        if self.expand_frames < 1:
            raise ValueError(f"EvalOptions: expand_frames "
                             f"{self.expand_frames} < 1")
        if self.plot_limit < 0:
            raise ValueError(f"EvalOptions: plot_limit {self.plot_limit} < 0")


@dataclass(frozen=True)
class GradcheckOptions:
    """Shape of the micro-batch audited by ``gradcheck`` and the
    finite-difference settings."""

    t: int = 8
    d: int = 16
    n_abnormal: int = 2
    n_normal: int = 2
    layer_widths: tuple = (32, 16, 1)
    k: int = 3
    margin: float = 100.0
    step: float = 1e-4
    tolerance: float = 1e-4
    max_coords: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.t < 2 or self.d < 4 or self.d % 4:
            raise ValueError(f"GradcheckOptions: need t >= 2 and d a "
                             f"positive multiple of 4, got t={self.t} "
                             f"d={self.d}")
        if self.n_abnormal < 1 or self.n_normal < 1:
            raise ValueError("GradcheckOptions: need at least one video "
                             "of each class")
        if not 1 <= self.k <= self.t:
            raise ValueError(f"GradcheckOptions: k {self.k} outside "
                             f"[1, t={self.t}]")
        if self.max_coords < 0:
            raise ValueError(f"GradcheckOptions: max_coords "
                             f"{self.max_coords} < 0")


@dataclass(frozen=True)
class SweepOptions:
    """Which hyperparameter to sweep and over which values."""

    axis: str = "k"
    values: tuple = ()

    def __post_init__(self):
        if self.axis not in ("k", "m"):
            raise ValueError(f"SweepOptions: axis {self.axis!r} not in "
                             f"('k', 'm')")
        if not self.values:
            raise ValueError("SweepOptions: values is empty")
        if self.axis == "k" and any(v != int(v) for v in self.values):
            raise ValueError(f"SweepOptions: k values must be integers, "
                             f"got {self.values}")


def _parse_int_tuple(text):
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated "
                                         f"integers, got {text!r}")


def _parse_float_tuple(text):
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated "
                                         f"numbers, got {text!r}")


_FIELD_TYPES = {
    # integers
    "n_normal": int, "n_abnormal": int, "t": int, "d": int, "mu": int,
    "rng_seed": int, "trials": int, "k": int, "epochs": int,
    "batch_abnormal": int, "batch_normal": int, "expand_frames": int,
    "plot_limit": int, "max_coords": int,
    # reals
    "base_mean": float, "base_std": float, "perturbation_magnitude": float,
    "noise_std": float, "epsilon": float, "abnormal_mean": float,
    "abnormal_std": float, "normal_mean": float, "normal_std": float,
    "dropout_rate": float, "learning_rate": float, "weight_decay": float,
    "margin": float, "smoothness_weight": float, "sparsity_weight": float,
    "step": float, "tolerance": float,
    # strings and tuples
    "attention_norm": str, "axis": str,
    "dilation_rates": _parse_int_tuple, "layer_widths": _parse_int_tuple,
    "k_values": _parse_int_tuple, "values": _parse_float_tuple,
}

_SKIP_FIELDS = {"perturbation_direction", "loss"}

_SECTION_CLASSES = {
    "synthetic": dio.SyntheticSpec,
    "mtn": md.MtnConfig,
    "classifier": md.ClassifierConfig,
    "train": trainer.TrainConfig,
    "loss": ls.LossConfig,
    "sim": theory.SimSpec,
    "eval": EvalOptions,
    "gradcheck": GradcheckOptions,
    "sweep": SweepOptions,
}

_COMMAND_SECTIONS = {
    "gen": ("synthetic",),
    "train": ("mtn", "classifier", "train", "loss"),
    "eval": ("eval",),
    "simulate": ("sim",),
    "gradcheck": ("gradcheck",),
    "sweep": ("mtn", "classifier", "train", "loss", "sweep"),
}

def _config_fields(cls):
    return [f for f in dataclasses.fields(cls) if f.name not in _SKIP_FIELDS]


def _add_section_flags(parser, section):
    for f in _config_fields(_SECTION_CLASSES[section]):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, type=_FIELD_TYPES[f.name],
                            default=None,
                            help=f"override config key {section}.{f.name}")


def _load_config_file(path, command):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            sections = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path}: invalid JSON ({exc})")
    if not isinstance(sections, dict):
        raise CliError(f"config {path}: top level must be an object")
    allowed = set(_COMMAND_SECTIONS[command])
    unknown = set(sections) - allowed
    if unknown:
        raise CliError(f"config {path}: unknown sections {sorted(unknown)}; "
                       f"{command} accepts {sorted(allowed)}")
    return sections


def _build_section(section, file_sections, args, extra=None):
    """Merge defaults <- config file <- flags into one config object."""
    cls = _SECTION_CLASSES[section]
    valid = {f.name for f in _config_fields(cls)}
    merged = {}
    file_part = file_sections.get(section, {})
    if not isinstance(file_part, dict):
        raise CliError(f"config section {section!r} must be an object")
    unknown = set(file_part) - valid
    if unknown:
        raise CliError(f"config section {section!r}: unknown keys "
                       f"{sorted(unknown)}; valid keys are {sorted(valid)}")
    for key, value in file_part.items():
        if isinstance(value, list):
            value = tuple(value)
        merged[key] = value
    if ("rng_seed" in valid and getattr(args, "seed", None) is not None
            and getattr(args, "rng_seed", None) is None):
        merged["rng_seed"] = args.seed
    for key in valid:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    if extra:
        merged.update(extra)
    try:
        return cls(**merged)
    except TypeError as exc:
        raise CliError(f"config section {section!r}: {exc}")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    raise TypeError(f"not JSON-serializable: {type(value)!r}")


def _write_snapshot(out_dir, command, sections, inputs=None):
    payload = {"command": command,
               "sections": {name: dataclasses.asdict(cfg)
                            for name, cfg in sections.items()}}
    if inputs:
        payload["inputs"] = {k: str(v) for k, v in inputs.items() if v}
    path = Path(out_dir) / "resolved_config.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_jsonable)
        fh.write("\n")
    return path


def _prepare_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_videos(manifest_path, role):
    path = Path(manifest_path)
    if not path.is_file():
        raise CliError(f"{role} manifest not found: {path}")
    return dio.read_manifest(path), dio.load_dataset(path)


def _check_dims(mtn_config, manifest, source):
    if mtn_config.t != manifest.t or mtn_config.d != manifest.d:
        raise CliError(f"{source} expects snippets (t={mtn_config.t}, "
                       f"d={mtn_config.d}) but the dataset provides "
                       f"(t={manifest.t}, d={manifest.d})")


def _train_configs(args, file_sections, manifest):
    mtn_defaults = {}
    if getattr(args, "t", None) is None and "t" not in file_sections.get("mtn", {}):
        mtn_defaults["t"] = manifest.t
    if getattr(args, "d", None) is None and "d" not in file_sections.get("mtn", {}):
        mtn_defaults["d"] = manifest.d
    mtn_config = _build_section("mtn", file_sections, args, extra=mtn_defaults)
    classifier_config = _build_section("classifier", file_sections, args)
    loss_config = _build_section("loss", file_sections, args)
    train_config = _build_section("train", file_sections, args,
                                  extra={"loss": loss_config})
    return mtn_config, classifier_config, loss_config, train_config


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    file_sections = _load_config_file(args.config, "gen")
    spec = _build_section("synthetic", file_sections, args)
    out = _prepare_out(args)
    manifest = dio.generate_synthetic_dataset(spec, out)
    _write_snapshot(out, "gen", {"synthetic": spec})
    n_abn = sum(1 for e in manifest.entries if e.label == 1)
    print(f"wrote {len(manifest.entries)} videos "
          f"({n_abn} abnormal, {len(manifest.entries) - n_abn} normal) "
          f"to {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_train(args):
    file_sections = _load_config_file(args.config, "train")
    manifest, videos = _load_videos(args.data, "training")
    mtn_config, classifier_config, _, train_config = \
        _train_configs(args, file_sections, manifest)
    _check_dims(mtn_config, manifest, "model config")
    val_videos = None
    if args.val_data:
        val_manifest, val_videos = _load_videos(args.val_data, "validation")
        _check_dims(mtn_config, val_manifest, "model config")
    out = _prepare_out(args)
    _write_snapshot(out, "train",
                    {"mtn": mtn_config, "classifier": classifier_config,
                     "train": train_config},
                    inputs={"data": args.data, "val_data": args.val_data})
    result = trainer.train(videos, mtn_config, classifier_config,
                           train_config, val_videos=val_videos,
                           log_path=out / "training_log.csv",
                           checkpoint_path=out / "model.ckpt")
    if result.log_rows:
        plots.plot_training_curves(result.log_rows,
                                   out / "training_curves.png")
    if result.diverged:
        print(f"training diverged: {result.message}", file=sys.stderr)
        print(f"checkpoint holds the last finite parameters: "
              f"{out / 'model.ckpt'}", file=sys.stderr)
        return EXIT_RUNTIME
    closing = (f", best val AUC {result.best_val_auc:.4f} (checkpoint keeps "
               f"that epoch)" if result.best_val_auc is not None else "")
    print(f"trained {train_config.epochs} epochs "
          f"({len(result.log_rows)} steps){closing}; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    file_sections = _load_config_file(args.config, "eval")
    options = _build_section("eval", file_sections, args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    params, mtn_config, classifier_config = md.load_model(ckpt)
    manifest, videos = _load_videos(args.data, "evaluation")
    _check_dims(mtn_config, manifest, f"checkpoint {ckpt}")
    out = _prepare_out(args)
    _write_snapshot(out, "eval",
                    {"eval": options, "mtn": mtn_config,
                     "classifier": classifier_config},
                    inputs={"checkpoint": args.checkpoint,
                            "data": args.data})

    scored = metrics.score_dataset(params, videos, mtn_config,
                                   classifier_config)
    factor = options.expand_frames
    pooled_scores = np.concatenate(
        [metrics.expand_to_frames(s.scores, factor) for s in scored])
    pooled_labels = np.concatenate(
        [metrics.expand_to_frames(s.labels, factor) for s in scored])
    report = {
        "auc": metrics.auc(pooled_scores, pooled_labels),
        "ap": metrics.ap(pooled_scores, pooled_labels),
        "n_videos": len(scored),
        "n_snippets": int(sum(len(s.scores) for s in scored)),
        "expand_frames": factor,
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    scores_dir = out / "scores"
    scores_dir.mkdir(exist_ok=True)
    figures_dir = out / "figures"
    figures_dir.mkdir(exist_ok=True)
    for i, sequence in enumerate(scored):
        metrics.write_scores_csv(scores_dir / f"{sequence.video_id}.csv",
                                 sequence)
        if i < options.plot_limit:
            plots.plot_video_scores(sequence,
                                    figures_dir / f"{sequence.video_id}.png")
    print(f"AUC {report['auc']:.6f}  AP {report['ap']:.6f}  "
          f"({report['n_videos']} videos); report {out / 'report.json'}")
    return EXIT_OK


def cmd_simulate(args):
    file_sections = _load_config_file(args.config, "simulate")
    spec = _build_section("sim", file_sections, args)
    out = _prepare_out(args)
    _write_snapshot(out, "simulate", {"sim": spec},
                    inputs={"column": args.column, "slack": args.slack})
    curve = theory.simulate_separability(spec)
    theory.write_curve(out / "curve.csv", curve)
    plots.plot_separability_curve(curve, out / "separability.png",
                                  mu=spec.mu)
    report = theory.check_monotonicity(curve, spec.mu, column=args.column,
                                       slack=args.slack)
    for line in report.format_lines():
        print(line)
    print(f"curve {out / 'curve.csv'}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_gradcheck(args):
    file_sections = _load_config_file(args.config, "gradcheck")
    options = _build_section("gradcheck", file_sections, args)
    rng = np.random.default_rng(options.rng_seed)
    mtn_config = md.MtnConfig(t=options.t, d=options.d)
    classifier_config = md.ClassifierConfig(layer_widths=options.layer_widths)
    loss_config = ls.LossConfig(k=options.k, margin=options.margin)
    params = md.ModelParams.init(mtn_config, classifier_config, rng)
    batch = [(rng.normal(size=(options.t, options.d)), 1)
             for _ in range(options.n_abnormal)]
    batch += [(rng.normal(size=(options.t, options.d)), 0)
              for _ in range(options.n_normal)]

    named = params.named()
    names = list(named)
    tensors = [named[name] for name in names]

    def objective():
        return ls.total_loss(batch, params, mtn_config, classifier_config,
                             loss_config, training=False).total

    report = ad.grad_check(
        objective, tensors, names=names, step=options.step,
        tolerance=options.tolerance,
        max_coords_per_param=options.max_coords or None,
        rng=np.random.default_rng(options.rng_seed + 1))
    lines = report.format_lines()
    for line in lines:
        print(line)
    if args.out:
        out = _prepare_out(args)
        _write_snapshot(out, "gradcheck", {"gradcheck": options})
        with open(out / "gradcheck.txt", "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_sweep(args):
    file_sections = _load_config_file(args.config, "sweep")
    manifest, videos = _load_videos(args.data, "training")
    mtn_config, classifier_config, _, train_config = \
        _train_configs(args, file_sections, manifest)
    _check_dims(mtn_config, manifest, "model config")
    val_manifest, val_videos = _load_videos(args.val_data, "evaluation")
    _check_dims(mtn_config, val_manifest, "model config")
    options = _build_section("sweep", file_sections, args)
    out = _prepare_out(args)
    _write_snapshot(out, "sweep",
                    {"mtn": mtn_config, "classifier": classifier_config,
                     "train": train_config, "sweep": options},
                    inputs={"data": args.data, "val_data": args.val_data})
    points = metrics.sweep(videos, val_videos, mtn_config, classifier_config,
                           train_config, options.axis, options.values)
    metrics.write_sweep_csv(out / "sweep.csv", points)
    plots.plot_sweep(points, out / "sweep.png")
    for p in points:
        print(f"{p.axis} = {p.value:g}: AUC {p.auc:.6f}")
    print(f"table {out / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="rtfm",
        description="Weakly-supervised video anomaly detection on "
                    "pre-computed snippet features, driven by top-k "
                    "feature-magnitude learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON config file (sections: "
                            f"{', '.join(_COMMAND_SECTIONS[name])})")
        p.add_argument("--seed", type=int, default=None,
                       help="convenience override for the run's rng_seed")
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory")
        for section in _COMMAND_SECTIONS[name]:
            _add_section_flags(p, section)
        return p

    command("gen", "generate a synthetic labeled dataset")

    p_train = command("train", "train a model on a dataset manifest")
    p_train.add_argument("--data", required=True,
                         help="training manifest path")
    p_train.add_argument("--val-data", default=None,
                         help="held-out manifest for per-epoch AUC")

    p_eval = command("eval", "score a dataset against a checkpoint")
    p_eval.add_argument("--checkpoint", required=True,
                        help="model checkpoint path")
    p_eval.add_argument("--data", required=True,
                        help="evaluation manifest path")

    p_sim = command("simulate", "separability curve and shape check")
    p_sim.add_argument("--column", default="empirical",
                       choices=("empirical", "analytic", "order"),
                       help="curve column the shape check judges")
    p_sim.add_argument("--slack", type=float, default=3.0,
                       help="standard-error slack for the shape check")

    command("gradcheck", "finite-difference audit of objective gradients",
            out_required=False)

    p_sweep = command("sweep", "retrain across k or margin values")
    p_sweep.add_argument("--data", required=True,
                         help="training manifest path")
    p_sweep.add_argument("--val-data", required=True,
                         help="evaluation manifest path")

    return parser


_HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
