import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qff.autodiff import PRIMITIVES, ContractError, ParamTensor, ShapeError, Tape, zero_grads
from qff.gradcheck import primitive_checks, small_model
from qff.encoding import Variant


def test_relu_forward():
    np.testing.assert_array_equal(Tape().relu(np.array([-1.0, 2.0])).value, [0.0, 2.0])


def test_matmul_forward():
    out = Tape().matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.value, [[11.0]])


def test_mse_of_equal_inputs_is_zero():
    assert float(Tape().mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).value) == 0.0


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tape().matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_shape_error():
    with pytest.raises(ShapeError):
        Tape().add(np.ones((2, 3)), np.ones((3, 2)))


def test_unknown_primitive():
    with pytest.raises(ContractError):
        Tape().record("conv2d", np.ones(3))


def test_spec_primitive_set_is_registered():
    names = {"matmul", "add", "broadcast_add", "elementwise_mul", "relu", "sine", "sin", "cos",
             "gather_interp_1d", "gather_interp_2d", "mse_loss", "scale", "concat"}
    assert names <= set(PRIMITIVES)


def test_square_gradient():
    w = ParamTensor(np.array([3.0]))
    tape = Tape()
    loss = tape.mse_loss(tape.mul(w, np.ones(1)), np.zeros(1))
    tape.backward(loss)
    assert w.grad[0] == pytest.approx(6.0)


def test_gather_1d_scatters_linear_weights():
    table = ParamTensor(np.zeros((1, 4, 1)))
    tape = Tape()
    out = tape.gather_interp_1d(table, np.array([[[1, 2]]]), np.array([[[0.5, 0.5]]]))
    tape.backward(tape.sum(tape.scale(out, 3.0)))
    np.testing.assert_array_equal(table.grad[0, :, 0], [0.0, 1.5, 1.5, 0.0])


def test_gather_checks_tap_count():
    with pytest.raises(ShapeError):
        Tape().gather_interp_2d(np.zeros((1, 4, 1)), np.zeros((1, 1, 2), dtype=int), np.zeros((1, 1, 2)))


def test_backward_requires_scalar():
    w = ParamTensor(np.ones(3))
    tape = Tape()
    out = tape.scale(w, 2.0)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_backward_on_non_recording_tape():
    w = ParamTensor(np.ones(3))
    tape = Tape(record=False)
    with pytest.raises(ContractError):
        tape.backward(tape.sum(w))


def test_non_recording_tape_keeps_no_nodes():
    w = ParamTensor(np.ones((2, 2)))
    tape = Tape(record=False)
    tape.relu(tape.matmul(w, w))
    assert len(tape) == 0


def test_zero_grads():
    w = ParamTensor(np.ones(3))
    zero_grads([w])  # fresh: no-op
    assert not w.grad.any()
    tape = Tape()
    tape.backward(tape.sum(tape.mul(w, w)))
    assert w.grad.any()
    zero_grads([w])
    np.testing.assert_array_equal(w.grad, 0.0)
    np.testing.assert_array_equal(w.values, 1.0)


def _model_loss(model, X, y, scale=1.0):
    tape = Tape()
    loss = tape.scale(tape.mse_loss(model.forward(tape, X), y), scale)
    return tape, loss


def test_two_backward_passes_double_the_gradient():
    model = small_model(Variant.QFF_3D, seed=0)
    rng = np.random.default_rng(0)
    X, y = rng.uniform(-1, 1, (16, 3)), rng.normal(size=(16, 1))
    tape, loss = _model_loss(model, X, y)
    tape.backward(loss)
    once = [p.grad.copy() for p in model.params()]
    tape.backward(loss)
    for g1, p in zip(once, model.params()):
        np.testing.assert_array_equal(p.grad, 2 * g1)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_gradient_accumulation_is_linear(a, b, seed):
    model = small_model(Variant.QFF_LITE, seed=seed, K=2)
    rng = np.random.default_rng(seed)
    X, y1, y2 = rng.uniform(-1, 1, (8, 2)), rng.normal(size=(8, 1)), rng.normal(size=(8, 1))

    def grads(fn):
        zero_grads(model.params())
        tape = Tape()
        tape.backward(fn(tape))
        return [p.grad.copy() for p in model.params()]

    def l1(t):
        return t.mse_loss(model.forward(t, X), y1)

    def l2(t):
        return t.mse_loss(model.forward(t, X), y2)

    g1, g2 = grads(l1), grads(l2)
    combined = grads(lambda t: t.add(t.scale(l1(t), a), t.scale(l2(t), b)))
    for c, x1, x2 in zip(combined, g1, g2):
        np.testing.assert_allclose(c, a * x1 + b * x2, atol=1e-10)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    X, y = rng.uniform(-1, 1, (64, 3)), rng.normal(size=(64, 1))
    results = []
    for _ in range(2):
        model = small_model(Variant.QFF_3D, seed=1)
        tape, loss = _model_loss(model, X, y)
        tape.backward(loss)
        results.append(np.concatenate([p.grad.ravel() for p in model.params()]))
    assert np.array_equal(results[0], results[1])


def test_constants_receive_no_gradient():
    w = ParamTensor(np.ones(3))
    c = np.arange(3.0)
    tape = Tape()
    tape.backward(tape.sum(tape.mul(w, c)))
    np.testing.assert_array_equal(w.grad, c)


def test_take_with_repeated_indices_accumulates():
    w = ParamTensor(np.array([1.0, 2.0, 3.0]))
    tape = Tape()
    tape.backward(tape.sum(tape.take(w, [0, 0, 2])))
    np.testing.assert_array_equal(w.grad, [2.0, 0.0, 1.0])


def test_every_primitive_passes_finite_differences():
    results = primitive_checks(np.random.default_rng(0))
    kinds = {r.name.split()[0] for r in results}
    assert set(PRIMITIVES) <= kinds
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad
