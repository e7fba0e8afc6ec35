"""MLP decoder and the encoder + MLP field model."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamTensor, ShapeError, Tape, Var
from .encoding import EncodingConfig, FeatureBank, encode_on_tape, encoded_width

RELU = "relu"
SINE = "sine"
SIGMOID = "sigmoid"
NONE = "none"

BANK_INIT_SCALE = 1e-4


@dataclass(frozen=True)
class MlpConfig:
    input_width: int
    output_width: int = 1
    hidden_width: int = 256
    num_layers: int = 2  # hidden layers
    activation: str = RELU
    omega0: float = 30.0
    output_transform: str = NONE

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.activation not in (RELU, SINE):
            raise ValueError(f"activation must be 'relu' or 'sine', got {self.activation!r}")
        if self.output_transform not in (NONE, SIGMOID):
            raise ValueError(f"output_transform must be 'none' or 'sigmoid', got {self.output_transform!r}")
        for name in ("input_width", "output_width", "hidden_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def init_layers(cfg: MlpConfig, rng: np.random.Generator, dtype=np.float32) -> list[tuple[ParamTensor, ParamTensor]]:
    """Kaiming-uniform weights for ReLU nets, the SIREN scheme for sine nets.

    Biases use uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)). In a ReLU net the
    final affine layer feeds no ReLU, so the Kaiming gain does not apply to
    it; it gets uniform(-1/fan_in, 1/fan_in) weights and a zero bias, which
    makes a fresh model predict values close to zero.
    """
    widths = [cfg.input_width] + [cfg.hidden_width] * cfg.num_layers + [cfg.output_width]
    last = len(widths) - 2
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if cfg.activation == SINE:
            bound = 1.0 / fan_in if i == 0 else math.sqrt(6.0 / fan_in) / cfg.omega0
        elif i == last:
            bound = 1.0 / fan_in
        else:
            bound = math.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        bb = 1.0 / math.sqrt(fan_in)
        b = rng.uniform(-bb, bb, size=(fan_out,)).astype(dtype)
        if i == last and cfg.activation != SINE:
            b[:] = 0
        layers.append((ParamTensor(W, f"mlp.{i}.weight"), ParamTensor(b, f"mlp.{i}.bias")))
    return layers


def mlp_forward(tape: Tape, layers, cfg: MlpConfig, h, tangents=None):
    """Affine/activation chain; optionally pushes input tangents through it.

    ``tangents`` has shape (B*D, input_width) for D directions per row; the
    returned tangents have shape (B*D, output_width).
    """
    width = h.shape[-1]
    if width != cfg.input_width:
        raise ShapeError(f"mlp input width {width} != configured {cfg.input_width}")
    B = h.shape[0]
    D = None if tangents is None else tangents.shape[0] // B
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        pre = tape.broadcast_add(tape.matmul(h, W), b)
        t_pre = None if tangents is None else tape.matmul(tangents, W)
        if i == last:
            h, tangents = pre, t_pre
            break
        if cfg.activation == SINE:
            h = tape.sine(pre, cfg.omega0)
            if t_pre is not None:
                slope = tape.scale(tape.cos(tape.scale(pre, cfg.omega0)), cfg.omega0)
                tangents = _tangent_mul(tape, t_pre, slope, D, B)
        else:
            h = tape.relu(pre)
            if t_pre is not None:
                mask = (pre.value > 0).astype(pre.value.dtype)
                tangents = _tangent_mul(tape, t_pre, mask, D, B)
    if cfg.output_transform == SIGMOID:
        h = tape.sigmoid(h)
        if tangents is not None:
            one_minus = tape.broadcast_add(tape.scale(h, -1.0), np.ones((), dtype=h.value.dtype))
            tangents = _tangent_mul(tape, tangents, tape.mul(h, one_minus), D, B)
    return h, tangents


def _tangent_mul(tape, t, factor, D, B):
    """Multiply stacked (B*D, H) tangents by a per-row (B, H) factor."""
    H = t.shape[-1]
    f = tape.reshape(factor, (B, 1, H)) if isinstance(factor, Var) else np.asarray(factor).reshape(B, 1, H)
    return tape.reshape(tape.mul(tape.reshape(t, (B, D, H)), f), (B * D, H))


def _threads() -> int:
    try:
        n = int(os.environ.get("QFF_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


class FieldModel:
    """Encoder + MLP mapping coordinates to signal values."""

    def __init__(self, enc_cfg: EncodingConfig, mlp_cfg: MlpConfig, bank: FeatureBank | None, layers):
        if mlp_cfg.input_width != encoded_width(enc_cfg):
            raise ShapeError(
                f"mlp input_width {mlp_cfg.input_width} != encoded width {encoded_width(enc_cfg)}"
            )
        if bank is not None:
            bank.check(enc_cfg)
        self.enc_cfg = enc_cfg
        self.mlp_cfg = mlp_cfg
        self.bank = bank
        self.layers = layers

    @classmethod
    def create(cls, enc_cfg: EncodingConfig, mlp_cfg: MlpConfig, seed: int = 0, dtype=np.float32,
               bank_scale: float = BANK_INIT_SCALE) -> "FieldModel":
        # independent streams: the MLP draw does not depend on whether a bank exists
        layers = init_layers(mlp_cfg, np.random.default_rng([seed, 1]), dtype)
        bank = None
        if enc_cfg.quantized:
            bank = FeatureBank.uniform(enc_cfg, np.random.default_rng([seed, 2]), bank_scale, dtype)
        return cls(enc_cfg, mlp_cfg, bank, layers)

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def bank_params(self) -> list[ParamTensor]:
        return [] if self.bank is None else self.bank.params()

    def mlp_params(self) -> list[ParamTensor]:
        return [p for pair in self.layers for p in pair]

    def params(self) -> list[ParamTensor]:
        return self.bank_params() + self.mlp_params()

    def named_params(self) -> list[tuple[str, ParamTensor]]:
        return [(p.name, p) for p in self.params()]

    def forward(self, tape: Tape, X) -> Var:
        enc, _ = encode_on_tape(tape, X, self.bank, self.enc_cfg, dtype=self.dtype)
        out, _ = mlp_forward(tape, self.layers, self.mlp_cfg, enc)
        return out

    def forward_with_grad(self, tape: Tape, X):
        """Outputs (B, out) and position derivatives (B, K, out) on ``tape``."""
        X = np.asarray(X, dtype=np.float64)
        enc, tangents = encode_on_tape(tape, X, self.bank, self.enc_cfg, jacobian=True, dtype=self.dtype)
        out, t = mlp_forward(tape, self.layers, self.mlp_cfg, enc, tangents)
        B = X.shape[0]
        return out, tape.reshape(t, (B, self.enc_cfg.K, self.mlp_cfg.output_width))

    def predict(self, X, shard: int = 16384) -> np.ndarray:
        """Forward pass without recording, sharded over rows."""
        X = np.asarray(X, dtype=np.float64)
        shards = [X[i : i + shard] for i in range(0, len(X), shard)]

        def run(chunk):
            return self.forward(Tape(record=False), chunk).value

        workers = min(_threads(), len(shards))
        if workers <= 1:
            parts = [run(c) for c in shards]
        else:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, shards))
        return np.concatenate(parts, axis=0)

    def predict_with_grad(self, X) -> tuple[np.ndarray, np.ndarray]:
        out, grad = self.forward_with_grad(Tape(record=False), X)
        return out.value, grad.value


def count_params(model: FieldModel) -> int:
    return sum(p.size for p in model.params())
