"""Command-line drivers: ``qff fit-image | fit-sdf | bench-convergence | grad-check``.

Exit codes: 0 success, 1 grad-check failure, 2 configuration error, 3 I/O
error, 4 numerical abort. Errors are reported on standard error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck, imageio
from .config import ConfigError, RunConfig, describe_keys, load_config
from .encoding import ConfigurationError, EncodingConfig, Variant, encoded_width
from .mlp import MlpConfig
from .tasks import (
    Box,
    ImageTask,
    NumericalError,
    SdfTask,
    Sphere,
    Torus,
    TrainRun,
    fit_image,
    fit_sdf,
    image_model,
    sdf_model,
)

log = logging.getLogger("qff")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def write_metrics(path: Path, run: TrainRun) -> None:
    rows = ((r.step, r.loss, r.metric, r.seconds) for r in run.records)
    write_csv(path, ["step", "loss", run.metric_name, "seconds"], rows)


# --------------------------------------------------------------------------
# config -> objects
# --------------------------------------------------------------------------


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "steps", None) is not None:
        cfg.set("optim.steps", args.steps)
    if getattr(args, "seed", None) is not None:
        cfg.set("optim.seed", args.seed)
    if getattr(args, "out", None) is not None:
        cfg.set("output.dir", str(Path(args.out).resolve()))
    return cfg


def _encoder(cfg: RunConfig, dims: int, variant: str | None = None) -> EncodingConfig:
    K = cfg.get("encoder.K")
    if K is not None and K != dims:
        raise ConfigError(f"encoder.K = {K} but the {cfg.task} task has {dims} input dimensions")
    return EncodingConfig(
        dims,
        cfg.get("encoder.L"),
        cfg.get("encoder.M"),
        cfg.get("encoder.N"),
        Variant.parse(variant or cfg.get("encoder.variant")),
        cfg.get("encoder.add_pe"),
    )


def _adam_kw(cfg: RunConfig) -> dict:
    return {"beta1": cfg.get("optim.beta1"), "beta2": cfg.get("optim.beta2"), "eps": cfg.get("optim.eps")}


def _steps(cfg: RunConfig) -> int:
    steps = cfg.get("optim.steps")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    return steps


def _mlp_kw(cfg: RunConfig) -> dict:
    return {
        "hidden_width": cfg.get("mlp.width"),
        "num_layers": cfg.get("mlp.layers"),
        "activation": cfg.get("mlp.activation"),
        "seed": cfg.get("optim.seed"),
    }


def _load_target(cfg: RunConfig) -> np.ndarray:
    path = cfg.path("task.image")
    if path is None:
        raise ConfigError("task.image is required for image fitting")
    img = imageio.read_image(path)
    crop = cfg.get("task.crop")
    if crop:
        try:
            img = imageio.center_crop(img, crop)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return img


def _shape(cfg: RunConfig):
    name = cfg.get("task.shape")
    if name == "sphere":
        return Sphere(cfg.get("task.radius"))
    if name == "box":
        extents = cfg.get("task.half_extents")
        if len(extents) != 3:
            raise ConfigError("task.half_extents needs three values")
        return Box(tuple(extents))
    if name == "torus":
        return Torus(cfg.get("task.major_radius"), cfg.get("task.minor_radius"))
    raise ConfigError(f"task.shape must be sphere, box or torus, got {name!r}")


def _validate(cfg: RunConfig, dims: int, variants=(None,)) -> None:
    """Build every config-derived object once so errors surface before any I/O."""
    _steps(cfg)
    for v in variants:
        enc = _encoder(cfg, dims, v)
        MlpConfig(encoded_width(enc), 1, cfg.get("mlp.width"), cfg.get("mlp.layers"), cfg.get("mlp.activation"))
    if cfg.task == "sdf":
        _shape(cfg)
    elif cfg.get("task.sampling") not in ("permutation", "random"):
        raise ConfigError(f"task.sampling must be permutation or random, got {cfg.get('task.sampling')!r}")


def _output_dir(cfg: RunConfig) -> Path:
    out = cfg.path("output.dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _image_run(cfg: RunConfig, target, variant=None):
    model = image_model(_encoder(cfg, 2, variant), dtype=np.float32, **_mlp_kw(cfg))
    task = ImageTask(target, cfg.get("optim.batch"), cfg.get("optim.seed"), cfg.get("task.sampling"))
    return fit_image(
        task, model, _steps(cfg), cfg.get("output.eval_interval"), lr=cfg.get("optim.lr"), adam_kw=_adam_kw(cfg),
        on_log=_progress,
    )


def _sdf_run(cfg: RunConfig, variant=None, stop_below=None):
    model = sdf_model(_encoder(cfg, 3, variant), dtype=np.float32, **_mlp_kw(cfg))
    task = SdfTask(_shape(cfg), cfg.get("optim.batch"), cfg.get("task.eikonal_weight"), seed=cfg.get("optim.seed"))
    return fit_sdf(
        task, model, _steps(cfg), cfg.get("output.eval_interval"), bank_lr=cfg.get("optim.bank_lr"),
        mlp_lr=cfg.get("optim.mlp_lr"), adam_kw=_adam_kw(cfg), stop_below=stop_below, on_log=_progress,
    )


def _progress(rec) -> None:
    log.info("step %d  loss %.4g  metric %.4g  %.1fs", rec.step, rec.loss, rec.metric, rec.seconds)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_fit_image(args) -> int:
    cfg = _apply_overrides(load_config(args.config).with_task("image"), args)
    _validate(cfg, 2)
    target = _load_target(cfg)
    out = _output_dir(cfg)
    run, recon = _image_run(cfg, target)
    write_metrics(out / "metrics.csv", run)
    imageio.write_image(out / "recon.ppm", recon)
    imageio.write_image(out / "recon.png", recon)
    checkpoint.save_checkpoint(out / "model.qff", run.model)
    print(f"final psnr {run.final_metric:.3f} dB; outputs in {out}")
    return EXIT_OK


def cmd_fit_sdf(args) -> int:
    cfg = _apply_overrides(load_config(args.config).with_task("sdf"), args)
    _validate(cfg, 3)
    out = _output_dir(cfg)
    run, (pts, pred, true) = _sdf_run(cfg)
    write_metrics(out / "metrics.csv", run)
    write_csv(out / "sdf_grid.csv", ["x", "y", "z", "pred", "true"],
              (tuple(p) + (a, b) for p, a, b in zip(pts, pred, true)))
    checkpoint.save_checkpoint(out / "model.qff", run.model)
    print(f"final grid MAE {run.final_metric:.5f}; outputs in {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    base = load_config(args.config)
    cfg = _apply_overrides(base.with_task(base.values.get("task.type", "sdf")), args)
    variants = cfg.get("bench.variants")
    if not variants:
        raise ConfigError("bench.variants is empty")
    _validate(cfg, 2 if cfg.task == "image" else 3, variants)
    target = _load_target(cfg) if cfg.task == "image" else None
    out = _output_dir(cfg)
    runs = {}
    goal = cfg.get("bench.target")
    for v in variants:
        log.info("bench: training %s", v)
        if cfg.task == "image":
            run = _image_run(cfg, target, v)[0]
        else:
            # once the target is known, training past it cannot change steps_to_target
            stop = goal if cfg.get("bench.early_stop") else None
            run = _sdf_run(cfg, v, stop_below=stop)[0]
        run_dir = out / v
        run_dir.mkdir(exist_ok=True)
        write_metrics(run_dir / "metrics.csv", run)
        runs[v] = run
        if goal is None:
            goal = run.final_metric
    rows = [(v, runs[v].steps_to(goal)) for v in variants]
    write_csv(out / "convergence.csv", ["config", "steps_to_target"], rows)
    print(f"target {runs[variants[0]].metric_name} = {goal:.6g}")
    for v, s in rows:
        print(f"{v:<10} {_fmt(s)}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    results = gradcheck.run_grad_check(cfg.get("optim.seed"))
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


COMMANDS = {
    "fit-image": (cmd_fit_image, "fit an image with sampled-pixel MSE; writes metrics.csv, recon.ppm/png, model.qff"),
    "fit-sdf": (cmd_fit_sdf, "fit an analytic SDF; writes metrics.csv, sdf_grid.csv, model.qff"),
    "bench-convergence": (cmd_bench, "steps each encoder variant needs to reach a metric target; writes convergence.csv"),
    "grad-check": (cmd_grad_check, "finite-difference check of every primitive and full models"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qff",
        description="Quantized Fourier feature neural fields.",
        epilog="config keys:\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--steps", type=int, help="training steps (overrides optim.steps)")
        p.add_argument("--seed", type=int, help="random seed (overrides optim.seed)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = COMMANDS[args.command][0]
    try:
        # overflow inside a diverging run is reported as a numerical abort instead
        with np.errstate(over="ignore", invalid="ignore"):
            return handler(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"qff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, imageio.ImageFormatError, checkpoint.CheckpointFormatError,
            checkpoint.CheckpointCorruptionError) as exc:
        print(f"qff: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"qff: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining ValueErrors come from invalid configuration values
        print(f"qff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
