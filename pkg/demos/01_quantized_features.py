"""
Quantized Fourier features by hand
==================================

Walks through what the encoder does to a single coordinate: the sinusoidal
encoding, the bin lookup, and the learnable offset added on top.
Runs in well under a second.
"""

import numpy as np

from qff.encoding import (
    EncodingConfig,
    FeatureBank,
    Variant,
    bank_shapes,
    bin_coords,
    encode,
    positional_encode,
)

np.set_printoptions(precision=4, suppress=True)

# Three frequency levels for a 1D input give six values: sin and cos per level.
x = np.array([0.3])
print("gamma(0.3) =", positional_encode(x, 3))

# Each of those values lives in [-1, 1], so it can index a small table.
# With M = 5 bins the nodes sit at -1, -0.5, 0, 0.5, 1.
for g in (-1.0, -0.2, 0.5, 1.0):
    lo, hi, w = bin_coords(g, 5)
    print(f"g = {g:5.2f} -> bins ({lo}, {hi}), weight on the upper bin {w:.2f}")

# A bank holds N features per bin, per encoding component, per input dimension.
cfg = EncodingConfig(input_dims=1, num_frequencies=3, bins_per_axis=5, feature_channels=2, variant="qff_lite")
print("bank shapes:", bank_shapes(cfg))

# Zero features leave the plain encoding untouched (each value is repeated N times).
zero = encode(x, FeatureBank.zeros(cfg), cfg)
print("zero bank matches PE:", np.array_equal(zero, np.repeat(positional_encode(x, 3), 2)))

# Nonzero features shift each entry by an interpolated, learnable amount.
rng = np.random.default_rng(0)
bank = FeatureBank.from_arrays(line=rng.normal(scale=0.1, size=bank_shapes(cfg)["line"]))
print("encoded with features:", encode(x, bank, cfg))

# Everything is periodic in x with period 2, because the encoding is.
print("periodic:", np.allclose(encode(x, bank, cfg), encode(x + 2.0, bank, cfg)))

# The 3D variant multiplies a line feature with a bilinear plane feature.
cfg3 = EncodingConfig(3, 2, 8, 4, Variant.QFF_3D)
bank3 = FeatureBank.from_arrays(**{k: rng.normal(size=s) for k, s in bank_shapes(cfg3).items()})
print("qff3d width for one point:", encode(np.array([0.1, -0.4, 0.7]), bank3, cfg3).shape)
