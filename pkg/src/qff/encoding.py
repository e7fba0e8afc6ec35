"""Positional encoding and quantized Fourier feature encoders.

Every encoder maps a coordinate ``x`` in R^K to a flat feature vector. The
component layout is dimension-major, then frequency level, with ``sin`` before
``cos`` at each level, and feature channels innermost::

    [k=0: sin(pi x0), cos(pi x0), sin(2 pi x0), cos(2 pi x0), ..., k=1: ...]

Quantized variants store a learnable ``N``-vector in each of ``M`` bins per
encoding component and read it back by linear (or bilinear) interpolation
at the encoding value. The same code path evaluates values, analytic
derivatives with respect to ``x``, and records the feature lookups on a
:class:`~qff.autodiff.Tape` so that bank gradients come out of
``Tape.backward``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamTensor, Tape, Var

MAX_QFF_LEVELS = 32
MAX_PE_LEVELS = 128
_MAX_EXPONENT = 31


class ConfigurationError(ValueError):
    """Encoder configuration or feature bank shapes are inconsistent."""


class InvalidInputError(ValueError):
    """Coordinates are not finite."""


class Variant(str, enum.Enum):
    NONE = "none"  # raw coordinates, used for the no-encoding baseline
    PE_ONLY = "pe"
    QFF_LITE = "qff_lite"
    QFF_3D = "qff3d"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        key = text.strip().lower().replace("-", "_")
        aliases = {"pe_only": "pe", "qff_3d": "qff3d", "qfflite": "qff_lite", "identity": "none"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"unknown encoder variant {text!r} (expected one of {names})") from None


@dataclass(frozen=True)
class EncodingConfig:
    input_dims: int = 3
    num_frequencies: int = 6
    bins_per_axis: int = 128
    feature_channels: int = 16
    variant: Variant = Variant.QFF_LITE
    add_pe: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.input_dims < 1:
            raise ConfigurationError(f"input_dims must be >= 1, got {self.input_dims}")
        if self.num_frequencies < 1:
            raise ConfigurationError(f"num_frequencies must be >= 1, got {self.num_frequencies}")
        if self.bins_per_axis < 2:
            raise ConfigurationError(f"bins_per_axis must be >= 2, got {self.bins_per_axis}")
        if self.feature_channels < 1:
            raise ConfigurationError(f"feature_channels must be >= 1, got {self.feature_channels}")
        if self.variant is Variant.QFF_3D and self.input_dims != 3:
            raise ConfigurationError(f"qff3d requires input_dims = 3, got {self.input_dims}")
        cap = MAX_QFF_LEVELS if self.quantized else MAX_PE_LEVELS
        if self.num_frequencies > cap:
            raise ConfigurationError(
                f"num_frequencies {self.num_frequencies} exceeds the cap of {cap} for {self.variant.value}"
            )

    # short names matching the usual K, L, M, N notation
    @property
    def K(self) -> int:
        return self.input_dims

    @property
    def L(self) -> int:
        return self.num_frequencies

    @property
    def M(self) -> int:
        return self.bins_per_axis

    @property
    def N(self) -> int:
        return self.feature_channels

    @property
    def quantized(self) -> bool:
        return self.variant in (Variant.QFF_LITE, Variant.QFF_3D)


def encoded_width(cfg: EncodingConfig) -> int:
    if cfg.variant is Variant.NONE:
        return cfg.K
    if cfg.variant is Variant.PE_ONLY:
        return cfg.K * 2 * cfg.L
    return cfg.K * 2 * cfg.L * cfg.N


class FeatureBank:
    """Learnable quantized Fourier features.

    ``line`` has shape (K, 2L, M, N). ``plane`` exists only for QFF-3D and has
    shape (3, 2L, M, M, N); plane ``a`` is indexed by the two axes
    complementary to ``a`` in increasing order.
    """

    def __init__(self, line: ParamTensor | None = None, plane: ParamTensor | None = None):
        self.line = line
        self.plane = plane

    @classmethod
    def from_arrays(cls, line=None, plane=None) -> "FeatureBank":
        return cls(
            ParamTensor(np.asarray(line), "bank.line") if line is not None else None,
            ParamTensor(np.asarray(plane), "bank.plane") if plane is not None else None,
        )

    @classmethod
    def zeros(cls, cfg: EncodingConfig, dtype=np.float64) -> "FeatureBank":
        shapes = bank_shapes(cfg)
        return cls.from_arrays(
            *(np.zeros(shapes[k], dtype=dtype) if k in shapes else None for k in ("line", "plane"))
        )

    @classmethod
    def uniform(cls, cfg: EncodingConfig, rng: np.random.Generator, scale: float = 1e-4, dtype=np.float64):
        shapes = bank_shapes(cfg)
        arrays = [
            rng.uniform(-scale, scale, size=shapes[k]).astype(dtype) if k in shapes else None
            for k in ("line", "plane")
        ]
        return cls.from_arrays(*arrays)

    @property
    def line_features(self) -> np.ndarray | None:
        return None if self.line is None else self.line.values

    @property
    def plane_features(self) -> np.ndarray | None:
        return None if self.plane is None else self.plane.values

    def params(self) -> list[ParamTensor]:
        return [p for p in (self.line, self.plane) if p is not None]

    def check(self, cfg: EncodingConfig) -> None:
        expected = bank_shapes(cfg)
        for key in ("line", "plane"):
            p = getattr(self, key)
            want = expected.get(key)
            got = None if p is None else p.shape
            if want != got:
                raise ConfigurationError(f"feature bank {key} has shape {got}, config requires {want}")


def bank_shapes(cfg: EncodingConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.quantized:
        shapes["line"] = (cfg.K, 2 * cfg.L, cfg.M, cfg.N)
    if cfg.variant is Variant.QFF_3D:
        shapes["plane"] = (3, 2 * cfg.L, cfg.M, cfg.M, cfg.N)
    return shapes


# --------------------------------------------------------------------------
# positional encoding
# --------------------------------------------------------------------------


def frequencies(L: int) -> np.ndarray:
    """Angular frequencies 2^l * pi, with the exponent clamped at 31."""
    exps = np.minimum(np.arange(L), _MAX_EXPONENT)
    return np.ldexp(np.pi, exps)


def _finite_coords(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("coordinates must be finite")
    return x


def _pe_parts(x: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (gamma, dgamma/dx), each of shape x.shape + (2L,)."""
    freq = frequencies(L)
    phase = x[..., None] * freq
    s, c = np.sin(phase), np.cos(phase)
    gamma = np.stack([s, c], axis=-1).reshape(*x.shape, 2 * L)
    dgamma = np.stack([freq * c, -freq * s], axis=-1).reshape(*x.shape, 2 * L)
    return gamma, dgamma


def positional_encode(x, L: int) -> np.ndarray:
    """Multi-frequency sin/cos encoding of each coordinate.

    ``x`` has shape (K,) or (B, K); the result has trailing width K*2L.
    """
    x = _finite_coords(x)
    gamma, _ = _pe_parts(x, L)
    return gamma.reshape(*x.shape[:-1], -1)


def bin_coords(g, M: int):
    """Map encoding values in [-1, 1] onto the ``M``-bin grid.

    Returns ``(lo, hi, hi_weight)`` with ``hi = min(lo + 1, M - 1)``. Scalars
    in, scalars out; arrays are handled elementwise.
    """
    scalar = np.ndim(g) == 0
    u = (np.clip(g, -1.0, 1.0) + 1.0) * 0.5 * (M - 1)
    lo = np.clip(np.floor(u), 0, M - 1).astype(np.int64)
    hi = np.minimum(lo + 1, M - 1)
    w = u - lo
    if scalar:
        return int(lo), int(hi), float(w)
    return lo, hi, w


# --------------------------------------------------------------------------
# tape-level encoder
# --------------------------------------------------------------------------


def _line_taps(g, dg, M, dtype):
    """Indices and weights for the value and slope of 1D interpolation."""
    lo, hi, w = bin_coords(g, M)
    idx = np.stack([lo, hi], axis=-1)
    w_val = np.stack([1.0 - w, w], axis=-1)
    # du/dg = (M - 1) / 2; the lo == hi endpoint case cancels to zero slope
    s = 0.5 * (M - 1) * dg
    w_slope = np.stack([-s, s], axis=-1)
    return idx, w_val.astype(dtype), w_slope.astype(dtype), (lo, hi, w)


def _plane_taps(first, second, d_first, d_second, M, dtype):
    """Indices and weights for bilinear value and both partial derivatives."""
    alo, ahi, wa = first
    blo, bhi, wb = second
    idx = np.stack([alo * M + blo, alo * M + bhi, ahi * M + blo, ahi * M + bhi], axis=-1)
    w_val = np.stack([(1 - wa) * (1 - wb), (1 - wa) * wb, wa * (1 - wb), wa * wb], axis=-1)
    sa = 0.5 * (M - 1) * d_first
    sb = 0.5 * (M - 1) * d_second
    w_da = np.stack([-(1 - wb) * sa, -wb * sa, (1 - wb) * sa, wb * sa], axis=-1)
    w_db = np.stack([-(1 - wa) * sb, (1 - wa) * sb, -wa * sb, wa * sb], axis=-1)
    return idx, w_val.astype(dtype), w_da.astype(dtype), w_db.astype(dtype)


# complementary plane axes for each line axis
PLANE_AXES = ((1, 2), (0, 2), (0, 1))


def encode_on_tape(tape: Tape, X, bank: FeatureBank | None, cfg: EncodingConfig, jacobian: bool = False,
                   dtype=None):
    """Encode a batch ``X`` of shape (B, K) on ``tape``.

    Returns ``(values, tangents)``. ``values`` has shape (B, W). When
    ``jacobian`` is set, ``tangents`` has shape (B*K, W): row ``b*K + d``
    holds d(encoding of X[b])/d(x_d). Either may be a plain array when it does
    not depend on learnable features.
    """
    X = _finite_coords(X)
    if X.ndim != 2 or X.shape[1] != cfg.K:
        raise ConfigurationError(f"expected coordinates of shape (B, {cfg.K}), got {X.shape}")
    B, K = X.shape
    if dtype is None:
        dtype = bank.line.dtype if (bank is not None and bank.line is not None) else np.float64
    dtype = np.dtype(dtype)

    if cfg.variant is Variant.NONE:
        tangents = np.tile(np.eye(K, dtype=dtype), (B, 1)) if jacobian else None
        return X.astype(dtype), tangents

    L, M, N = cfg.L, cfg.M, cfg.N
    C = K * 2 * L
    gamma, dgamma = _pe_parts(X, L)  # (B, K, 2L)
    if cfg.variant is Variant.PE_ONLY:
        tangents = None
        if jacobian:
            # only x_d moves the components of dimension d
            t = np.zeros((B, K, K, 2 * L))
            for d in range(K):
                t[:, d, d, :] = dgamma[:, d, :]
            tangents = t.reshape(B * K, C).astype(dtype)
        return gamma.reshape(B, C).astype(dtype), tangents

    if bank is None:
        raise ConfigurationError(f"{cfg.variant.value} requires a feature bank")
    bank.check(cfg)
    g = gamma.reshape(B, C)
    dg = dgamma.reshape(B, C)
    pe = g.astype(dtype)[:, :, None]

    line = tape.reshape(bank.line, (C, M, N))
    idx, w_val, w_slope, coords = _line_taps(g, dg, M, dtype)
    if jacobian:
        lines = tape.gather_interp_1d(line, idx, np.stack([w_val, w_slope], axis=-1))  # (B, C, 2, N)
        tau = tape.take(lines, 0, axis=2)
        slope = tape.take(lines, 1, axis=2)
    else:
        tau = tape.gather_interp_1d(line, idx, w_val)  # (B, C, N)
    dpe = dg.astype(dtype)[:, :, None]
    owner = np.repeat(np.arange(K), 2 * L)  # input dimension of each component

    if cfg.variant is Variant.QFF_LITE:
        out = tape.broadcast_add(tau, pe) if cfg.add_pe else tau
        values = tape.reshape(out, (B, C * N))
        if not jacobian:
            return values, None
        if cfg.add_pe:
            slope = tape.broadcast_add(slope, dpe)
        # direction d sees its own components; everything else reads a zero slot
        padded = tape.concat([slope, np.zeros((B, 1, N), dtype=dtype)], axis=1)
        src = np.where(owner[None, :] == np.arange(K)[:, None], np.arange(C)[None, :], C)
        t = tape.take(padded, src.reshape(-1), axis=1)  # (B, K*C, N)
        return values, tape.reshape(t, (B * K, C * N))

    # QFF-3D: line feature of axis a times plane feature over the other two axes
    lo, hi, w = (a.reshape(B, K, 2 * L) for a in coords)
    sel_b = [p[0] for p in PLANE_AXES]
    sel_c = [p[1] for p in PLANE_AXES]
    pidx, pw_val, pw_db, pw_dc = _plane_taps(
        (lo[:, sel_b, :], hi[:, sel_b, :], w[:, sel_b, :]),
        (lo[:, sel_c, :], hi[:, sel_c, :], w[:, sel_c, :]),
        dgamma[:, sel_b, :],
        dgamma[:, sel_c, :],
        M,
        dtype,
    )
    pidx = pidx.reshape(B, C, 4)
    plane = tape.reshape(bank.plane, (C, M * M, N))
    if not jacobian:
        pval = tape.gather_interp_2d(plane, pidx, pw_val.reshape(B, C, 4))
        prod = tape.mul(tau, pval)
        out = tape.broadcast_add(prod, pe) if cfg.add_pe else prod
        return tape.reshape(out, (B, C * N)), None

    pw = np.stack([pw_val, pw_db, pw_dc], axis=-1).reshape(B, C, 4, 3)
    planes = tape.gather_interp_2d(plane, pidx, pw)  # (B, C, 3, N): value, d/dx_b, d/dx_c
    pval = tape.take(planes, 0, axis=2)
    prod = tape.mul(tau, pval)
    out = tape.broadcast_add(prod, pe) if cfg.add_pe else prod
    values = tape.reshape(out, (B, C * N))

    d_self = tape.mul(slope, pval)
    if cfg.add_pe:
        d_self = tape.broadcast_add(d_self, dpe)
    d_cross = tape.mul(tape.reshape(tau, (B, C, 1, N)), tape.take(planes, [1, 2], axis=2))
    roles = tape.concat([tape.reshape(d_self, (B, C, 1, N)), d_cross], axis=2)  # (B, C, 3, N)
    roles = tape.reshape(roles, (B, C * 3, N))
    # role of direction d for a component owned by line axis a: 0 self, 1 first plane axis, 2 second
    role = np.zeros((3, C), dtype=np.int64)
    for d in range(3):
        role[d] = np.select(
            [owner == d, np.array(sel_b)[owner] == d, np.array(sel_c)[owner] == d], [0, 1, 2]
        )
    src = np.arange(C)[None, :] * 3 + role
    t = tape.take(roles, src.reshape(-1), axis=1)  # (B, 3*C, N)
    return values, tape.reshape(t, (B * 3, C * N))


# --------------------------------------------------------------------------
# array-level API
# --------------------------------------------------------------------------


@dataclass
class EncodedVector:
    values: np.ndarray
    jacobian_wrt_x: np.ndarray | None = None


def _value(v) -> np.ndarray:
    return v.value if isinstance(v, Var) else np.asarray(v)


def _batched(x, K):
    x = _finite_coords(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != K:
        raise ConfigurationError(f"expected coordinates with {K} components, got shape {x.shape}")
    return X, single


def _as_bank(bank) -> FeatureBank | None:
    if bank is None or isinstance(bank, FeatureBank):
        return bank
    raise ConfigurationError(f"expected a FeatureBank, got {type(bank).__name__}")


def encode(x, bank, cfg: EncodingConfig) -> np.ndarray:
    """Encode ``x`` of shape (K,) or (B, K) with any variant."""
    X, single = _batched(x, cfg.K)
    values, _ = encode_on_tape(Tape(record=False), X, _as_bank(bank), cfg)
    out = _value(values)
    return out[0] if single else out


def encode_with_jacobian(x, bank, cfg: EncodingConfig) -> EncodedVector:
    """Encoding plus its analytic Jacobian with respect to ``x``.

    The Jacobian has shape (W, K) for a single point and (B, W, K) for a
    batch. At bin boundaries the slope of the interval above the boundary (in
    encoding-value space) is used.
    """
    X, single = _batched(x, cfg.K)
    B = X.shape[0]
    values, tangents = encode_on_tape(Tape(record=False), X, _as_bank(bank), cfg, jacobian=True)
    vals = _value(values)
    jac = _value(tangents).reshape(B, cfg.K, -1).transpose(0, 2, 1)
    if single:
        return EncodedVector(vals[0], jac[0])
    return EncodedVector(vals, jac)


def _require(cfg: EncodingConfig, variant: Variant) -> None:
    if cfg.variant is not variant:
        raise ConfigurationError(f"expected variant {variant.value}, config has {cfg.variant.value}")


def qff_lite_lookup(x, bank: FeatureBank, cfg: EncodingConfig) -> np.ndarray:
    """Interpolated line features alone, without the positional encoding."""
    _require(cfg, Variant.QFF_LITE)
    return encode(x, bank, EncodingConfig(cfg.K, cfg.L, cfg.M, cfg.N, Variant.QFF_LITE, add_pe=False))


def qff_lite_encode(x, bank: FeatureBank, cfg: EncodingConfig) -> np.ndarray:
    _require(cfg, Variant.QFF_LITE)
    return encode(x, bank, cfg)


def qff_3d_encode(x, bank: FeatureBank, cfg: EncodingConfig) -> np.ndarray:
    if cfg.K != 3:
        raise ConfigurationError(f"qff3d requires 3 input dimensions, got {cfg.K}")
    _require(cfg, Variant.QFF_3D)
    return encode(x, bank, cfg)


def plane_lookup(g_a, g_b, plane, M: int) -> np.ndarray:
    """Bilinear read of an (M, M, N) feature plane at encoding values (g_a, g_b)."""
    plane = np.asarray(plane)
    if plane.ndim != 3 or plane.shape[:2] != (M, M):
        raise ConfigurationError(f"plane must have shape ({M}, {M}, N), got {plane.shape}")
    scalar = np.ndim(g_a) == 0 and np.ndim(g_b) == 0
    ga = np.atleast_1d(np.asarray(g_a, dtype=np.float64))
    gb = np.atleast_1d(np.asarray(g_b, dtype=np.float64))
    zeros = np.zeros_like(ga)
    idx, w, _, _ = _plane_taps(bin_coords(ga, M), bin_coords(gb, M), zeros, zeros, M, plane.dtype)
    table = plane.reshape(1, M * M, -1)
    out = Tape(record=False).gather_interp_2d(table, idx[:, None, :], w[:, None, :]).value[:, 0, :]
    return out[0] if scalar else out
