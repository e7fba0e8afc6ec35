import math

import numpy as np
import pytest

from qff.encoding import EncodingConfig, Variant
from qff.tasks import (
    Box,
    ImageTask,
    NumericalError,
    SdfTask,
    Sphere,
    Torus,
    TrainRun,
    bench_convergence,
    eval_grid,
    fit_image,
    fit_sdf,
    image_model,
    mse,
    permutation_batches,
    pixel_coords,
    psnr,
    sdf_loss,
    sdf_model,
)
from qff.autodiff import Tape


# -- metrics ------------------------------------------------------------------


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a) == math.inf
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(a + 0.01, a) == pytest.approx(40.0)


def test_psnr_mse_duality():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    assert psnr(a, b) == -10.0 * math.log10(mse(a, b))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


# -- runs and sampling --------------------------------------------------------


def test_train_run_steps_must_increase():
    run = TrainRun("psnr")
    run.append(0, 1.0, 10.0, 0.0)
    with pytest.raises(ValueError):
        run.append(0, 1.0, 10.0, 0.0)


def test_steps_to_is_direction_aware():
    up, down = TrainRun("psnr"), TrainRun("mae")
    for step, metric in [(0, 10.0), (100, 20.0), (200, 30.0)]:
        up.append(step, 0, metric, 0)
        down.append(step, 0, 40.0 - metric, 0)
    assert up.steps_to(20.0) == 100
    assert down.steps_to(20.0) == 100
    assert up.steps_to(99.0) == math.inf
    assert up.steps_to(5.0) == 0


def test_bench_convergence_default_target():
    def make(name):
        run = TrainRun("mae")
        for step, m in [(0, 1.0), (100, 0.5), (200, 0.2 if name == "a" else 0.1)]:
            run.append(step, 0, m, 0)
        return run

    steps, target, runs = bench_convergence(make, ["a", "b"])
    assert target == 0.2
    assert steps == {"a": 200, "b": 200}
    steps, _, _ = bench_convergence(make, ["a", "b"], target_metric=0.5)
    assert steps == {"a": 100, "b": 100}


def test_permutation_sampling_covers_every_pixel():
    batches = permutation_batches(1000, 96, np.random.default_rng(0))
    seen = np.concatenate([next(batches) for _ in range(11)])  # ceil(1000 / 96)
    assert np.unique(seen[:1000]).size == 1000


def test_pixel_centers_inside_square():
    xy = pixel_coords(3, 4)
    assert xy.shape == (12, 2)
    assert np.all(np.abs(xy) < 1)
    np.testing.assert_allclose(xy[0], [-0.75, -2 / 3])
    np.testing.assert_allclose(xy[-1], [0.75, 2 / 3])


# -- shapes -------------------------------------------------------------------


def test_analytic_sdfs():
    p = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(Sphere(0.5).sdf(p), [-0.5, 0.5])
    np.testing.assert_allclose(Box((0.4, 0.3, 0.3)).sdf(p), [-0.3, 0.6])
    np.testing.assert_allclose(Torus(0.5, 0.2).sdf(np.array([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]])), [-0.2, 0.3])


def test_eval_grid_layout():
    g = eval_grid(4)
    assert g.shape == (64, 3)
    np.testing.assert_allclose(g[0], [-0.75, -0.75, -0.75])
    np.testing.assert_allclose(g[1], [-0.25, -0.75, -0.75])  # x fastest


def test_sdf_samples_split_between_volume_and_surface():
    task = SdfTask(batch_size=1000)
    pts, true = task.sample(np.random.default_rng(0))
    assert pts.shape == (1000, 3)
    near = np.abs(true[500:])
    assert np.median(near) < 0.1
    np.testing.assert_allclose(true, Sphere().sdf(pts))


def test_eikonal_vanishes_for_exact_linear_sdf():
    # PE-free model computing x0 exactly: its gradient has unit norm everywhere
    model = sdf_model(EncodingConfig(3, 1, 2, 1, Variant.NONE), hidden_width=2, num_layers=1)
    (W0, b0), (W1, b1) = model.layers
    W0.values[...] = [[1, -1], [0, 0], [0, 0]]
    b0.values[...] = 0
    W1.values[...] = [[1], [-1]]
    b1.values[...] = 0
    pts = np.random.default_rng(0).uniform(-1, 1, (64, 3))
    pts[:, 0] = np.where(np.abs(pts[:, 0]) < 1e-3, 0.5, pts[:, 0])
    loss = sdf_loss(Tape(), model, pts, pts[:, 0], eikonal_weight=1.0)
    assert float(loss.value) == pytest.approx(0.0, abs=1e-10)


# -- drivers ------------------------------------------------------------------


def tiny_image_model(variant=Variant.QFF_LITE, seed=0):
    return image_model(EncodingConfig(2, 4, 16, 1, variant), hidden_width=32, num_layers=2, seed=seed)


@pytest.mark.parametrize("variant", [Variant.NONE, Variant.PE_ONLY, Variant.QFF_LITE])
def test_constant_image_is_learned_quickly(variant):
    target = np.empty((16, 16, 3))
    target[...] = [0.2, 0.6, 0.9]
    model = image_model(EncodingConfig(2, 8, 64, 1, variant))  # default image width and depth
    run, recon = fit_image(ImageTask(target, batch_size=128), model, 200, eval_interval=50)
    assert run.final_metric > 50.0
    assert recon.shape == target.shape


def test_fit_image_log_shape():
    target = np.random.default_rng(0).uniform(size=(8, 8, 3))
    run, _ = fit_image(ImageTask(target, batch_size=32), tiny_image_model(), 25, eval_interval=10)
    assert [r.step for r in run.records] == [0, 10, 20, 25]


def test_fit_image_requires_steps():
    with pytest.raises(ValueError):
        fit_image(ImageTask(np.zeros((4, 4, 3))), tiny_image_model(), 0)


def test_non_finite_loss_aborts_with_diagnostic():
    model = tiny_image_model()
    model.layers[0][0].values[0, 0] = np.nan
    with pytest.raises(NumericalError, match="step 1"):
        fit_image(ImageTask(np.zeros((4, 4, 3)), batch_size=8), model, 5)


def test_fit_image_is_deterministic():
    target = np.random.default_rng(0).uniform(size=(8, 8, 3))
    logs = []
    for _ in range(2):
        run, _ = fit_image(ImageTask(target, batch_size=32, seed=4), tiny_image_model(seed=4), 20, eval_interval=5)
        logs.append([(r.step, r.loss, r.metric) for r in run.records])
    assert logs[0] == logs[1]


def small_sdf_model(variant=Variant.QFF_3D):
    return sdf_model(EncodingConfig(3, 2, 8, 2, variant), hidden_width=32)


def test_zero_step_sdf_run_reports_initial_error():
    model = small_sdf_model()
    run, (pts, pred, true) = fit_sdf(SdfTask(), model, 0)
    assert [r.step for r in run.records] == [0]
    assert run.final_metric == pytest.approx(np.mean(np.abs(pred - true)))
    assert run.final_metric > 0.1
    assert len(pts) == 32**3


def test_sdf_training_reduces_error():
    model = small_sdf_model()
    run, _ = fit_sdf(SdfTask(batch_size=256), model, 60, eval_interval=30)
    assert run.records[-1].metric < run.records[0].metric


def test_sdf_stop_below_ends_early():
    run, _ = fit_sdf(SdfTask(batch_size=256), small_sdf_model(), 100, eval_interval=10, stop_below=10.0)
    assert run.records[-1].step == 10
