"""Image regression and analytic SDF fitting drivers."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tape
from .encoding import EncodingConfig
from .mlp import FieldModel, MlpConfig, count_params  # noqa: F401  (re-exported)
from .optim import Adam, make_task_groups

log = logging.getLogger(__name__)

INF = math.inf
EVAL_GRID = 32


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, lr: float, max_grad: float):
        super().__init__(f"non-finite loss at step {step} (lr={lr:g}, max |grad|={max_grad:g})")
        self.step = step
        self.lr = lr
        self.max_grad = max_grad


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` for identical images."""
    err = mse(pred, target)
    if err == 0.0:
        return INF
    return -10.0 * math.log10(err)


@dataclass
class LogRecord:
    step: int
    loss: float
    metric: float
    seconds: float


@dataclass
class TrainRun:
    metric_name: str
    records: list[LogRecord] = field(default_factory=list)
    model: FieldModel | None = None

    @property
    def higher_is_better(self) -> bool:
        return self.metric_name == "psnr"

    def append(self, step, loss, metric, seconds) -> None:
        if self.records and step <= self.records[-1].step:
            raise ValueError(f"log steps must increase: {step} after {self.records[-1].step}")
        self.records.append(LogRecord(int(step), float(loss), float(metric), float(seconds)))

    @property
    def final_metric(self) -> float:
        return self.records[-1].metric

    def steps_to(self, target: float) -> float:
        """First logged step whose metric reaches ``target`` (``inf`` if none)."""
        for r in self.records:
            if (r.metric >= target) if self.higher_is_better else (r.metric <= target):
                return r.step
        return INF


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def permutation_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless batches; every index appears once per epoch."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]


def random_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        yield rng.integers(0, n, size=batch_size)


# --------------------------------------------------------------------------
# image regression
# --------------------------------------------------------------------------


def pixel_coords(height: int, width: int) -> np.ndarray:
    """Pixel centers mapped to (x, y) in (-1, 1)^2, row-major order."""
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


@dataclass
class ImageTask:
    target: np.ndarray  # (H, W, 3) in [0, 1]
    batch_size: int = 4096
    seed: int = 0
    sampling: str = "permutation"

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.ndim != 3 or self.target.shape[2] != 3:
            raise ValueError(f"target image must be (H, W, 3), got {self.target.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.target.shape[:2]

    def coords(self) -> np.ndarray:
        return pixel_coords(*self.shape)

    def colors(self) -> np.ndarray:
        return self.target.reshape(-1, 3)

    def batches(self, rng) -> Iterator[np.ndarray]:
        n = self.target.shape[0] * self.target.shape[1]
        sampler = permutation_batches if self.sampling == "permutation" else random_batches
        return sampler(n, self.batch_size, rng)


def image_model(enc_cfg: EncodingConfig, hidden_width=256, num_layers=3, activation="relu", seed=0,
                dtype=np.float32) -> FieldModel:
    from .encoding import encoded_width

    mlp_cfg = MlpConfig(encoded_width(enc_cfg), 3, hidden_width, num_layers, activation, output_transform="sigmoid")
    return FieldModel.create(enc_cfg, mlp_cfg, seed, dtype)


def render(model: FieldModel, shape: tuple[int, int]) -> np.ndarray:
    out = model.predict(pixel_coords(*shape))
    return out.reshape(*shape, -1).astype(np.float64)


def _check_finite(loss_value, step, optimizer: Adam):
    if not np.isfinite(loss_value):
        max_grad = max((float(np.max(np.abs(p.grad))) for p in optimizer.params()), default=0.0)
        lr = max(g.lr for g in optimizer.groups)
        raise NumericalError(step, lr, max_grad)


def _eval_points(interval: int, steps: int) -> set[int]:
    pts = set(range(0, steps + 1, max(1, interval)))
    pts.add(steps)
    return pts


def fit_image(task: ImageTask, model: FieldModel, steps: int, eval_interval: int = 100,
              lr: float | None = None, adam_kw: dict | None = None,
              on_log: Callable[[LogRecord], None] | None = None) -> tuple[TrainRun, np.ndarray]:
    """Fit ``model`` to ``task.target`` with sampled-pixel MSE and Adam.

    Full-image PSNR is logged at step 0 (where ``loss`` is the full-image MSE)
    and every ``eval_interval`` steps. Returns the run and the final
    reconstruction.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng([task.seed, 3])
    coords, colors = task.coords(), task.colors()
    opt = Adam(make_task_groups(model, "image", mlp_lr=lr, **(adam_kw or {})))
    run = TrainRun("psnr", model=model)
    evals = _eval_points(eval_interval, steps)
    batches = task.batches(rng)
    start = time.perf_counter()

    def evaluate(step, loss=None):
        recon = render(model, task.shape)
        if loss is None:
            loss = mse(recon, task.target)
        rec = LogRecord(step, loss, psnr(np.clip(recon, 0, 1), task.target), time.perf_counter() - start)
        run.append(rec.step, rec.loss, rec.metric, rec.seconds)
        if on_log:
            on_log(rec)
        return recon

    recon = evaluate(0)
    for step in range(1, steps + 1):
        idx = next(batches)
        tape = Tape()
        out = model.forward(tape, coords[idx])
        loss = tape.mse_loss(out, colors[idx].astype(out.value.dtype))
        loss_value = float(loss.value)
        opt.zero_grad()
        tape.backward(loss)
        _check_finite(loss_value, step, opt)
        opt.step()
        if step in evals:
            recon = evaluate(step, loss_value)
    return run, np.clip(recon, 0.0, 1.0)


# --------------------------------------------------------------------------
# analytic SDF fitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    radius: float = 0.5

    def sdf(self, p):
        return np.linalg.norm(p, axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    half_extents: tuple[float, float, float] = (0.4, 0.3, 0.3)

    def sdf(self, p):
        q = np.abs(p) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Torus:
    major_radius: float = 0.5
    minor_radius: float = 0.2

    def sdf(self, p):
        ring = np.linalg.norm(p[..., :2], axis=-1) - self.major_radius
        return np.hypot(ring, p[..., 2]) - self.minor_radius


def _sdf_gradient(shape, p, h=1e-5):
    g = np.stack(
        [(shape.sdf(p + h * e) - shape.sdf(p - h * e)) / (2 * h) for e in np.eye(3)], axis=-1
    )
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def eval_grid(res: int = EVAL_GRID) -> np.ndarray:
    """Cell-centered res^3 grid over [-1, 1]^3, x fastest."""
    c = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    gz, gy, gx = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)


@dataclass
class SdfTask:
    shape: object = field(default_factory=Sphere)
    batch_size: int = 4096
    eikonal_weight: float = 0.1
    surface_fraction: float = 0.5
    surface_sigma: float = 0.05
    seed: int = 0

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n_surf = int(round(self.batch_size * self.surface_fraction))
        uni = rng.uniform(-1.0, 1.0, size=(self.batch_size - n_surf, 3))
        seeds = rng.uniform(-1.0, 1.0, size=(n_surf, 3))
        # project onto the zero level set, then jitter
        surf = seeds - self.shape.sdf(seeds)[:, None] * _sdf_gradient(self.shape, seeds)
        surf = np.clip(surf + rng.normal(0.0, self.surface_sigma, size=surf.shape), -1.0, 1.0)
        pts = np.concatenate([uni, surf], axis=0)
        return pts, self.shape.sdf(pts)


def sdf_model(enc_cfg: EncodingConfig, hidden_width=256, num_layers=2, activation="relu", seed=0,
              dtype=np.float32) -> FieldModel:
    from .encoding import encoded_width

    mlp_cfg = MlpConfig(encoded_width(enc_cfg), 1, hidden_width, num_layers, activation)
    return FieldModel.create(enc_cfg, mlp_cfg, seed, dtype)


def sdf_loss(tape: Tape, model: FieldModel, pts, true, eikonal_weight: float):
    dtype = model.dtype
    target = np.asarray(true, dtype=dtype)[:, None]
    if eikonal_weight <= 0:
        return tape.mse_loss(model.forward(tape, pts), target)
    out, grad = model.forward_with_grad(tape, pts)  # grad: (B, 3, 1)
    sq = tape.sum(tape.mul(grad, grad), axis=1)
    norm = tape.sqrt(tape.broadcast_add(sq, np.asarray(1e-12, dtype=dtype)))
    eik = tape.mse_loss(norm, np.ones_like(norm.value))
    return tape.add(tape.mse_loss(out, target), tape.scale(eik, eikonal_weight))


def sdf_grid_values(model: FieldModel, task: SdfTask, res: int = EVAL_GRID):
    pts = eval_grid(res)
    pred = model.predict(pts)[:, 0].astype(np.float64)
    return pts, pred, task.shape.sdf(pts)


def fit_sdf(task: SdfTask, model: FieldModel, steps: int, eval_interval: int = 100,
            bank_lr: float | None = None, mlp_lr: float | None = None, adam_kw: dict | None = None,
            stop_below: float | None = None,
            on_log: Callable[[LogRecord], None] | None = None) -> tuple[TrainRun, tuple]:
    """Fit ``model`` to the analytic SDF; metric is MAE on the 32^3 grid.

    Returns the run and ``(points, pred, true)`` on the evaluation grid.
    ``stop_below`` ends training early once the grid MAE reaches it.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    rng = np.random.default_rng([task.seed, 4])
    opt = Adam(make_task_groups(model, "sdf", bank_lr=bank_lr, mlp_lr=mlp_lr, **(adam_kw or {})))
    run = TrainRun("mae", model=model)
    evals = _eval_points(eval_interval, steps)
    start = time.perf_counter()

    def evaluate(step, loss=None):
        grid = sdf_grid_values(model, task)
        mae = float(np.mean(np.abs(grid[1] - grid[2])))
        if loss is None:
            loss = mse(grid[1], grid[2])
        rec = LogRecord(step, loss, mae, time.perf_counter() - start)
        run.append(rec.step, rec.loss, rec.metric, rec.seconds)
        if on_log:
            on_log(rec)
        return grid

    grid = evaluate(0)
    for step in range(1, steps + 1):
        pts, true = task.sample(rng)
        tape = Tape()
        loss = sdf_loss(tape, model, pts, true, task.eikonal_weight)
        loss_value = float(loss.value)
        opt.zero_grad()
        tape.backward(loss)
        _check_finite(loss_value, step, opt)
        opt.step()
        if step in evals:
            grid = evaluate(step, loss_value)
            if stop_below is not None and run.final_metric <= stop_below:
                break
    return run, grid


# --------------------------------------------------------------------------
# convergence benchmark
# --------------------------------------------------------------------------


def steps_to_target(runs: dict[str, TrainRun], target: float) -> dict[str, float]:
    return {name: run.steps_to(target) for name, run in runs.items()}


def bench_convergence(make_run: Callable[[str], TrainRun], names: list[str],
                      target_metric: float | None = None) -> tuple[dict[str, float], float, dict[str, TrainRun]]:
    """Steps each configuration needs to reach ``target_metric``.

    ``make_run(name)`` trains one configuration on the shared task. With no
    explicit target, the first configuration's final metric is the target.
    Returns ``(steps_by_name, target, runs)``; unreachable targets map to
    ``inf``.
    """
    runs = {}
    for name in names:
        runs[name] = make_run(name)
    if target_metric is None:
        target_metric = runs[names[0]].final_metric
    return steps_to_target(runs, target_metric), target_metric, runs
