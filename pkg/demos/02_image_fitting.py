"""
Fitting an image with and without quantized features
====================================================

Trains the same ReLU network on the bundled 256x256 photo three times:
raw coordinates, sinusoidal encoding, and encoding plus quantized features.
Pass a step count to trade time for quality (default 300, about a minute).
The reconstructions land in ./demo_out as PNG files.
"""

import sys
from pathlib import Path

from qff import EncodingConfig, ImageTask, Variant, fit_image, image_model
from qff.imageio import read_image, write_image

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
root = Path(__file__).resolve().parent.parent
target = read_image(root / "tests" / "data" / "astronaut_256.ppm")
out = Path("demo_out")
out.mkdir(exist_ok=True)

results = {}
for variant in (Variant.NONE, Variant.PE_ONLY, Variant.QFF_LITE):
    # L = 8 frequency levels, M = 64 bins, one feature per bin
    model = image_model(EncodingConfig(2, 8, 64, 1, variant), seed=0)
    run, recon = fit_image(ImageTask(target, seed=0), model, steps, eval_interval=max(1, steps // 3))
    write_image(out / f"recon_{variant.value}.png", recon)
    results[variant.value] = run.final_metric
    print(f"{variant.value:>9}: {run.final_metric:6.2f} dB after {steps} steps "
          f"({run.records[-1].seconds:.0f}s)")

gain = results["qff_lite"] - results["pe"]
print(f"quantized features vs plain encoding: {gain:+.2f} dB")
