"""Command-line entry point: ``hiercon {gen-synth,train,eval,explain,gradcheck}``.

Exit codes: 0 success, 1 I/O failure, 2 invalid input or config,
3 training divergence, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import tensor as tc
from .data import ContainerError, FeatureFileError, ManifestError, SyntheticSpec, generate_synthetic, parse_manifest
from .losses import LossConfig
from .metrics import MetricUndefinedError, det_points, ScoredSet, write_det_csv, write_score_file
from .model import ConfigError, ModelConfig, fixture_config, load_checkpoint, save_checkpoint, tiny_config
from .training import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK, EXIT_IO, EXIT_INPUT, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4

class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# configuration ---------------------------------------------------------------

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "synthetic": SyntheticSpec,
}


def default_config() -> dict:
    """Built-in defaults: the desk-scale synthetic profile."""
    train_defaults = dataclasses.asdict(TrainConfig())
    train_defaults.pop("loss")
    synth = dataclasses.asdict(SyntheticSpec())
    synth["planted_window"] = list(synth["planted_window"])
    return {
        "model": fixture_config().to_dict(),
        "train": train_defaults,
        "loss": dataclasses.asdict(LossConfig()),
        "synthetic": synth,
    }


def resolve_config(path: str | None, overrides: dict, base: dict | None = None) -> dict:
    """defaults < config file < command-line flags; unknown keys are errors."""
    cfg = base if base is not None else default_config()
    layers = []
    if path:
        try:
            layers.append(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from None
    layers.append(overrides)
    for layer in layers:
        if not isinstance(layer, dict):
            raise CliError("config must be a JSON object of sections")
        for section, values in layer.items():
            if section not in SECTIONS:
                raise CliError(f"unknown config section {section!r}; expected one of {sorted(SECTIONS)}")
            if not isinstance(values, dict):
                raise CliError(f"config section {section!r} must be an object")
            unknown = sorted(set(values) - set(cfg[section]))
            if unknown:
                raise CliError(f"unknown keys in [{section}]: {unknown}")
            cfg[section].update(values)
    return cfg


def build(cfg: dict):
    try:
        model = ModelConfig(**cfg["model"])
        loss = LossConfig(**cfg["loss"])
        train_cfg = TrainConfig(loss=loss, **cfg["train"])
        synth = SyntheticSpec(**cfg["synthetic"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None
    return model, train_cfg, synth


def prepare_out(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise CliError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise CliError(f"output directory {path} is not empty; pass --force to reuse it")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc}", EXIT_IO) from None
    return path


def write_resolved(out: Path, cfg: dict, **extra) -> None:
    payload = dict(cfg, **extra) if extra else cfg
    (out / "config.resolved").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "lambda_con", None) is not None:
        o.setdefault("loss", {})["lambda_con"] = args.lambda_con
    if getattr(args, "margin", None) is not None:
        o.setdefault("loss", {})["margin"] = args.margin
    return o


# subcommands -----------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    overrides = _overrides(args)
    if args.seed is not None:
        overrides["synthetic"] = {"seed": args.seed}
    cfg = resolve_config(args.config, overrides)
    _, _, spec = build(cfg)
    out = prepare_out(args.out, args.force)
    write_resolved(out, {"synthetic": cfg["synthetic"]})
    train_m = generate_synthetic(spec, out, "train", "manifest.txt")
    n_files = len(train_m)
    msg = [f"wrote {len(train_m)} train utterances -> {out / 'manifest.txt'}"]
    if spec.n_val_real or spec.n_val_fake:
        val_m = generate_synthetic(spec, out, "val", "val_manifest.txt")
        n_files += len(val_m)
        msg.append(f"wrote {len(val_m)} val utterances -> {out / 'val_manifest.txt'}")
    frames = spec.planted_frames
    print("\n".join(msg))
    print(
        f"corpus: {n_files} files, shape L={spec.num_layers} T={spec.frames} D={spec.feature_dim}; "
        f"real={spec.n_real}+{spec.n_val_real} fake={spec.n_fake}+{spec.n_val_fake}"
    )
    print(
        f"planted: group {spec.planted_group} (layers {list(spec.planted_layers)}), "
        f"window [{spec.planted_window[0]}, {spec.planted_window[1]}) = frames {frames.start}..{frames.stop - 1}, "
        f"signal={spec.signal_scale} noise={spec.noise_scale} seed={spec.seed}"
    )
    return EXIT_OK


def _load_manifest(path):
    try:
        return parse_manifest(path)
    except OSError as exc:
        raise CliError(f"cannot read manifest {path}: {exc}", EXIT_IO) from None


def _check_shapes(model_cfg: ModelConfig, manifest) -> None:
    first = manifest.load_stack(manifest.rows[0])
    if first.shape != model_cfg.feature_shape:
        raise CliError(
            f"feature shape {first.shape} of {manifest.rows[0].utterance_id!r} does not match "
            f"model config shape {model_cfg.feature_shape}"
        )


def cmd_train(args) -> int:
    overrides = _overrides(args)
    if args.seed is not None:
        overrides["train"] = {"seed": args.seed}
    cfg = resolve_config(args.config, overrides)
    model_cfg, train_cfg, _ = build(cfg)
    out = prepare_out(args.out, args.force)
    write_resolved(out, {k: cfg[k] for k in ("model", "train", "loss")})
    train_m = _load_manifest(args.train_manifest)
    val_m = _load_manifest(args.val_manifest)
    _check_shapes(model_cfg, train_m)
    _check_shapes(model_cfg, val_m)
    if len(set(val_m.labels.tolist())) < 2:
        raise CliError("validation manifest must contain both real and fake utterances")
    try:
        result = train(model_cfg, train_m, val_m, train_cfg, history_path=out / "history.jsonl")
    except TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    save_checkpoint(
        out / "checkpoint.hcc",
        model_cfg,
        result.params,
        extra={"best_epoch": result.best_epoch, "val_eer": result.best_val_eer, "seed": train_cfg.seed},
    )
    print(f"best epoch {result.best_epoch}: val EER {100 * result.best_val_eer:.2f}%")
    print(f"checkpoint -> {out / 'checkpoint.hcc'}")
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_IO) from None


def cmd_eval(args) -> int:
    out = prepare_out(args.out, args.force)
    model_cfg, params, _ = _load_model(args.checkpoint)
    write_resolved(out, {"model": model_cfg.to_dict()}, checkpoint=str(args.checkpoint), manifest=str(args.manifest))
    manifest = _load_manifest(args.manifest)
    if len(set(manifest.labels.tolist())) < 2:
        raise CliError("EER undefined: manifest must contain both real and fake utterances")
    _check_shapes(model_cfg, manifest)
    result = evaluate(model_cfg, params, manifest)
    write_score_file(result.ids, result.scores, result.labels, out / "scores.txt")
    points = det_points(ScoredSet(result.scores, result.labels))
    write_det_csv(points, out / "det.csv")
    metrics = {
        "eer": result.eer,
        "n_real": int((result.labels == 0).sum()),
        "n_fake": int((result.labels == 1).sum()),
        "det_points": [{"threshold": t, "far": a, "frr": r} for t, a, r in points],
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"EER {100 * result.eer:.2f}% over {len(result.ids)} utterances")
    return EXIT_OK


def cmd_explain(args) -> int:
    out = prepare_out(args.out, args.force)
    model_cfg, params, _ = _load_model(args.checkpoint)
    write_resolved(out, {"model": model_cfg.to_dict()}, checkpoint=str(args.checkpoint), manifest=str(args.manifest), n_samples=args.n_samples)
    manifest = _load_manifest(args.manifest)
    if not 1 <= args.n_samples <= len(manifest):
        raise CliError(f"--n-samples must lie in [1, {len(manifest)}], got {args.n_samples}")
    _check_shapes(model_cfg, manifest)
    subset = type(manifest)(manifest.rows[: args.n_samples], manifest.root)
    rec = evaluate(model_cfg, params, subset, with_attention=True).records.mean()
    write_attention_csvs(rec, out)
    top = int(np.argmax(rec.gamma))
    print(f"averaged attention over {args.n_samples} utterances; gamma peaks at group {top} ({rec.gamma[top]:.3f})")
    return EXIT_OK


def write_attention_csvs(rec, out: Path) -> None:
    n_layers, n_frames = rec.alpha.shape
    with open(out / "alpha.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer"] + [f"t{t}" for t in range(n_frames)])
        for l in range(n_layers):
            w.writerow([l] + [repr(float(x)) for x in rec.alpha[l]])
    n_groups, g = rec.beta.shape
    with open(out / "beta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "layers"] + [f"member{j}" for j in range(g)])
        for k in range(n_groups):
            layers = "-".join(str(k * g + j) for j in (0, g - 1))
            w.writerow([k, layers] + [repr(float(x)) for x in rec.beta[k]])
    with open(out / "gamma.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "weight"])
        for k in range(n_groups):
            w.writerow([k, repr(float(rec.gamma[k]))])


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    base = default_config()
    base["model"] = tiny_config().to_dict()
    model_cfg, _, _ = build(resolve_config(args.config, {}, base))
    if args.corrupt_op:
        if args.corrupt_op not in tc.OPS:
            raise CliError(f"unknown op {args.corrupt_op!r}; known: {sorted(tc.OPS)}")
        with tc.corrupted_backward(args.corrupt_op):
            results, elapsed = gc.timed_gradcheck(seed, model_cfg)
    else:
        results, elapsed = gc.timed_gradcheck(seed, model_cfg)
    report = gc.format_report(results, elapsed)
    print(report)
    if args.out:
        out = prepare_out(args.out, args.force)
        (out / "gradcheck.txt").write_text(report + "\n")
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiercon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config with model/train/loss/synthetic sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="reuse a non-empty output directory")

    p = sub.add_parser("gen-synth", help="write a planted-artefact corpus")
    common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train the head on a manifest")
    common(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--lambda-con", type=float)
    p.add_argument("--margin", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest and compute EER")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="average attention weights into CSV heatmaps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-samples", type=int, required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    common(p, out_required=False)
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ManifestError, FeatureFileError, ContainerError, MetricUndefinedError, tc.ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
