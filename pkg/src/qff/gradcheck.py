"""Finite-difference verification of every primitive and of full models.

All checks run in double precision with central differences (step 1e-5).
The relative error of one entry is ``|analytic - numeric| / max(|analytic|,
|numeric|)``; entries where both magnitudes fall below ``ABS_FLOOR`` are
compared absolutely instead, since their ratio is pure rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape
from .encoding import EncodingConfig, Variant, encoded_width
from .mlp import FieldModel, MlpConfig

STEP = 1e-5
TOLERANCE = 1e-4
ABS_FLOOR = 1e-8
ENTRIES_PER_INPUT = 24
BOUNDARY_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    return np.where(scale < ABS_FLOOR, diff, diff / np.where(scale < ABS_FLOOR, 1.0, scale))


def _pick(rng, size, count):
    return rng.choice(size, size=min(count, size), replace=False)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def _check_primitive(name: str, kind: str, inputs: list, attrs: dict, rng, wrt=None) -> CheckResult:
    """Compare the VJP of ``kind`` against central differences of <out, R>."""
    wrt = range(len(inputs)) if wrt is None else wrt
    probe = Tape(record=False).record(kind, *inputs, **attrs).value
    R = rng.normal(size=probe.shape)

    def objective(vals):
        out = Tape(record=False).record(kind, *vals, **attrs).value
        return float(np.sum(out * R))

    from .autodiff import ParamTensor

    params = [ParamTensor(np.array(x, dtype=np.float64)) if i in wrt else x for i, x in enumerate(inputs)]
    tape = Tape()
    out = tape.record(kind, *params, **attrs)
    loss = tape.sum(tape.mul(out, R))
    tape.backward(loss)

    worst, count = 0.0, 0
    for i in wrt:
        p = params[i]
        for flat in _pick(rng, p.size, ENTRIES_PER_INPUT):
            vals = [q.values.copy() if isinstance(q, ParamTensor) else q for q in params]
            base = vals[i].reshape(-1)
            orig = base[flat]
            base[flat] = orig + STEP
            f_plus = objective(vals)
            base[flat] = orig - STEP
            f_minus = objective(vals)
            numeric = (f_plus - f_minus) / (2 * STEP)
            worst = max(worst, float(rel_error(p.grad.reshape(-1)[flat], numeric)))
            count += 1
    return CheckResult(name, worst, count)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _gather_case(rng, taps, stacked):
    C, S, N, B = int(rng.integers(2, 6)), int(rng.integers(4, 20)), int(rng.integers(1, 5)), int(rng.integers(4, 32))
    table = rng.normal(size=(C, S, N))
    idx = rng.integers(0, S, size=(B, C, taps))
    w = rng.uniform(-1, 1, size=(B, C, taps, 3) if stacked else (B, C, taps))
    return [table, idx, w]


def primitive_checks(rng: np.random.Generator) -> list[CheckResult]:
    def dims(lo=1, hi=64):
        return int(rng.integers(lo, hi + 1))

    m, k, n = dims(), dims(), dims()
    cases: list[tuple[str, str, list, dict, list | None]] = [
        ("matmul", "matmul", [rng.normal(size=(m, k)), rng.normal(size=(k, n))], {}, None),
        ("add", "add", [rng.normal(size=(m, n)), rng.normal(size=(m, n))], {}, None),
        ("broadcast_add", "broadcast_add", [rng.normal(size=(m, n)), rng.normal(size=(n,))], {}, None),
        ("elementwise_mul", "elementwise_mul", [rng.normal(size=(m, n)), rng.normal(size=(m, n))], {}, None),
        ("elementwise_mul/broadcast", "elementwise_mul", [rng.normal(size=(m, 1, n)), rng.normal(size=(k, 1))], {}, None),
        ("relu", "relu", [_away_from_zero(rng, (m, n))], {}, None),
        ("sine", "sine", [rng.uniform(-0.1, 0.1, size=(m, n))], {"omega": 30.0}, None),
        ("sin", "sin", [rng.normal(size=(m, n))], {}, None),
        ("cos", "cos", [rng.normal(size=(m, n))], {}, None),
        ("sigmoid", "sigmoid", [rng.normal(size=(m, n))], {}, None),
        ("sqrt", "sqrt", [rng.uniform(0.5, 2.0, size=(m, n))], {}, None),
        ("scale", "scale", [rng.normal(size=(m, n))], {"factor": -1.7}, None),
        ("sum", "sum", [rng.normal(size=(m, n, 3))], {"axis": 1}, None),
        ("reshape", "reshape", [rng.normal(size=(m, n))], {"shape": (n, m)}, None),
        ("concat", "concat", [rng.normal(size=(m, n)), rng.normal(size=(m, k))], {"axis": 1}, None),
        ("take", "take", [rng.normal(size=(m, n))], {"indices": rng.integers(0, n, size=7), "axis": 1}, None),
        ("mse_loss", "mse_loss", [rng.normal(size=(m, n)), rng.normal(size=(m, n))], {}, None),
        ("gather_interp_1d", "gather_interp_1d", _gather_case(rng, 2, False), {}, [0]),
        ("gather_interp_1d/stacked", "gather_interp_1d", _gather_case(rng, 2, True), {}, [0]),
        ("gather_interp_2d", "gather_interp_2d", _gather_case(rng, 4, False), {}, [0]),
        ("gather_interp_2d/stacked", "gather_interp_2d", _gather_case(rng, 4, True), {}, [0]),
    ]
    return [_check_primitive(name, kind, ins, attrs, rng, wrt) for name, kind, ins, attrs, wrt in cases]


# --------------------------------------------------------------------------
# full models
# --------------------------------------------------------------------------


def _bin_distance(X, cfg: EncodingConfig) -> np.ndarray:
    """Per-point distance (in encoding value) to the nearest bin center."""
    from .encoding import positional_encode

    g = positional_encode(X, cfg.L)
    u = (g + 1.0) * 0.5 * (cfg.M - 1)
    return (np.abs(u - np.round(u)) * 2.0 / (cfg.M - 1)).min(axis=-1)


def sample_points(rng, n, cfg: EncodingConfig, margin=BOUNDARY_MARGIN) -> np.ndarray:
    """Uniform points in [-1, 1]^K at least ``margin`` from every bin boundary."""
    out = []
    while sum(len(o) for o in out) < n:
        X = rng.uniform(-1.0, 1.0, size=(4 * n, cfg.K))
        if cfg.quantized:
            X = X[_bin_distance(X, cfg) >= margin]
        out.append(X)
    return np.concatenate(out)[:n]


def _relu_safe(model: FieldModel, X, margin=BOUNDARY_MARGIN) -> np.ndarray:
    """Mask of points whose hidden pre-activations all stay clear of zero."""
    from .encoding import encode_on_tape

    tape = Tape(record=False)
    h, _ = encode_on_tape(tape, X, model.bank, model.enc_cfg, dtype=model.dtype)
    h = h.value if hasattr(h, "value") else h
    ok = np.ones(len(X), dtype=bool)
    for W, b in model.layers[:-1]:
        pre = h @ W.values + b.values
        ok &= np.abs(pre).min(axis=1) >= margin
        h = np.maximum(pre, 0.0)
    return ok


def small_model(variant: Variant, seed: int, K: int | None = None, activation="relu") -> FieldModel:
    K = K or (3 if variant is Variant.QFF_3D else 2)
    enc = EncodingConfig(K, 3, 8, 2, variant)
    mlp = MlpConfig(encoded_width(enc), 1, 16, 2, activation)
    # features at unit scale so bank gradients are not negligible
    return FieldModel.create(enc, mlp, seed, np.float64, bank_scale=1.0)


def check_model_gradient(model: FieldModel, loss_fn: Callable[[Tape], object], rng, count=100,
                         name="model") -> CheckResult:
    """Gradient of ``loss_fn`` w.r.t. ``count`` random touched parameters vs. FD."""
    params = model.params()
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    flat_grads = [p.grad.reshape(-1).copy() for p in params]

    candidates = [(i, j) for i, g in enumerate(flat_grads) for j in np.flatnonzero(g)]
    chosen = [candidates[c] for c in _pick(rng, len(candidates), count)]

    def objective():
        return float(loss_fn(Tape(record=False)).value)

    worst = 0.0
    for i, j in chosen:
        vals = params[i].values.reshape(-1)
        orig = vals[j]
        vals[j] = orig + STEP
        f_plus = objective()
        vals[j] = orig - STEP
        f_minus = objective()
        vals[j] = orig
        worst = max(worst, float(rel_error(flat_grads[i][j], (f_plus - f_minus) / (2 * STEP))))
    for p in params:
        p.zero_grad()
    return CheckResult(name, worst, len(chosen))


def _safe_points(model, rng, n):
    X = sample_points(rng, 4 * n, model.enc_cfg)
    if model.mlp_cfg.activation == "relu":
        X = X[_relu_safe(model, X)]
    if len(X) < n:
        raise RuntimeError("could not find enough points away from kinks")
    return X[:n]


def model_checks(rng: np.random.Generator, seed: int = 0, batch: int = 100) -> list[CheckResult]:
    from .tasks import sdf_loss

    results = []
    for variant, label in ((Variant.QFF_LITE, "model qff_lite"), (Variant.QFF_3D, "model qff3d")):
        model = small_model(variant, seed)
        X = _safe_points(model, rng, batch)
        target = rng.normal(size=(batch, 1))
        results.append(
            check_model_gradient(model, lambda t: t.mse_loss(model.forward(t, X), target), rng, name=label)
        )
    for variant in (Variant.QFF_LITE, Variant.QFF_3D):
        model = small_model(variant, seed, K=3)
        X = _safe_points(model, rng, batch)
        true = np.linalg.norm(X, axis=1) - 0.5
        results.append(
            check_model_gradient(
                model, lambda t: sdf_loss(t, model, X, true, 0.1), rng, name=f"model {variant.value}+eikonal"
            )
        )
        results.append(position_gradient_check(model, X, name=f"position grad {variant.value}"))
    return results


def position_gradient_check(model: FieldModel, X, name="position grad") -> CheckResult:
    """Analytic d(output)/dx through encoder and MLP vs. central differences."""
    _, grad = model.predict_with_grad(X)
    K = X.shape[1]
    numeric = np.stack(
        [
            (model.predict(X + STEP * e)[:, 0] - model.predict(X - STEP * e)[:, 0]) / (2 * STEP)
            for e in np.eye(K)
        ],
        axis=-1,
    )
    err = rel_error(grad[:, :, 0], numeric)
    return CheckResult(name, float(err.max()), err.size)


def run_grad_check(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return primitive_checks(rng) + model_checks(rng, seed)


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  {'entries':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:>12.3e}  {r.entries:>7d}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
