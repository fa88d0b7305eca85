import numpy as np
import pytest
from hypothesis import given, strategies as st

from linshape.diffgraph import (AdamState, ParamSet, Tape, Tensor, adam_step, finite_difference_check, load_params,
                                ops, run_backward, run_forward, save_params)
from linshape.errors import FormatError, InvalidGraphError, NumericError, StaleTapeError

from gradcases import COMPOSED, PRIMITIVES


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(3):
        fn, inputs, params = PRIMITIVES[name](np.random.default_rng(seed))
        assert finite_difference_check(fn, inputs, params, eps=1e-6) < 1e-4


@pytest.mark.parametrize("name", sorted(COMPOSED))
def test_reconstruction_graph_gradients(name):
    fn, inputs, params = COMPOSED[name](np.random.default_rng(7))
    assert finite_difference_check(fn, inputs, params, eps=1e-6, max_entries=6) < 1e-4


def test_run_forward_backward_simple():
    params = ParamSet()
    params.add("w", np.array([2.0, -1.0]))
    out, tape = run_forward(lambda x: ops.sum(ops.mul(ops.mul(x, params.tensor("w")), x)),
                            [Tensor([3.0, 4.0], requires_grad=True)], params)
    assert out.data == 2 * 9 - 16
    res = run_backward(tape, out)
    np.testing.assert_allclose(res["params"]["w"], [9.0, 16.0])
    np.testing.assert_allclose(res["inputs"][0], [12.0, -8.0])
    np.testing.assert_allclose(params["w"].grad, [9.0, 16.0])


def test_gradients_accumulate_across_uses():
    params = ParamSet()
    params.add("w", np.array(3.0))
    out, tape = run_forward(lambda: ops.add(ops.mul(params.tensor("w"), params.tensor("w")), params.tensor("w")),
                            [], params)
    run_backward(tape, out)
    assert params["w"].grad == 7.0


def test_output_gradient_seed():
    out, tape = run_forward(lambda x: ops.scale(x, 2.0), [Tensor(np.ones(3), requires_grad=True)])
    res = run_backward(tape, out, output_gradient=np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(res["inputs"][0], [2.0, 4.0, 6.0])
    with pytest.raises(InvalidGraphError):
        run_backward(tape, out, output_gradient=np.ones(2))


def test_stale_tape_is_rejected():
    params = ParamSet()
    params.add("w", np.ones(2))
    out, tape = run_forward(lambda: ops.sum(params.tensor("w")), [], params)
    params["w"].assign(np.zeros(2))
    with pytest.raises(StaleTapeError):
        run_backward(tape, out)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        with Tape():
            ops.mul(Tensor([np.inf]), 0.0)


def test_shape_mismatch_is_a_graph_error():
    with pytest.raises(InvalidGraphError):
        with Tape():
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_eval_mode_batchnorm_uses_running_stats(rng):
    params = ParamSet()
    params.add("g", np.ones(2))
    params.add("b", np.zeros(2))
    st_ = ops.BatchNormState(params, "bn", 2, momentum=0.5)
    x = rng.normal(size=(10, 2)) * 3 + 1
    with Tape(mode="train"):
        ops.batchnorm(Tensor(x), params.tensor("g"), params.tensor("b"), st_)
    np.testing.assert_allclose(params.buffers["bn.running_mean"], 0.5 * x.mean(axis=0))
    np.testing.assert_allclose(params.buffers["bn.running_var"], 0.5 + 0.5 * x.var(axis=0, ddof=1))
    with Tape(mode="eval"):
        y = ops.batchnorm(Tensor(x), params.tensor("g"), params.tensor("b"), st_).data
    expect = (x - params.buffers["bn.running_mean"]) / np.sqrt(params.buffers["bn.running_var"] + 1e-5)
    np.testing.assert_allclose(y, expect)


def test_maxpool_first_index_on_ties():
    x = np.array([[[1.0, 5.0], [1.0, 5.0], [0.0, 2.0]]])
    out, idx = ops.maxpool_points(Tensor(x))
    assert idx.tolist() == [[0, 0]]


def test_quat_rotation_is_orthonormal(rng):
    R = ops.quat_rotation(Tensor(rng.normal(size=(20, 3)) * 3)).data
    for r in R:
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)
    np.testing.assert_array_equal(ops.quat_rotation(Tensor(np.zeros((1, 3)))).data[0], np.eye(3))


def test_min_select_hand_example():
    d = Tensor(np.array([[2.0, 5.0], [7.0, 1.0]]))
    vals, idx = ops.min_select(d)
    assert ops.sum(vals).data == 3.0
    assert idx.tolist() == [0, 1]
    vals, idx = ops.min_select(d, np.array([[False, True], [True, True]]))
    assert vals.data.tolist() == [5.0, 1.0]


# ---------------------------------------------------------------- Adam
def _adam_oracle(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(g_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_hand_recurrence():
    params = ParamSet()
    params.add("x", np.array([0.0]))
    state = AdamState()
    grads = [1.0, -0.5, 2.0, 0.25]
    for g in grads:
        params["x"].grad[:] = g
        adam_step(params, state, 0.1)
    assert params["x"].value[0] == pytest.approx(_adam_oracle(grads, 0.1), rel=1e-12)


def test_adam_first_step_is_lr_times_sign():
    params = ParamSet()
    params.add("x", np.array([1.0, 1.0]))
    params["x"].grad[:] = [3.0, -0.01]
    adam_step(params, AdamState(), 0.01)
    np.testing.assert_allclose(params["x"].value, [0.99, 1.01], rtol=1e-6)


def test_adam_zero_lr_and_scale():
    params = ParamSet()
    params.add("a", np.ones(2))
    params.add("b", np.ones(2))
    for p in params:
        p.grad[:] = 1.0
    adam_step(params, AdamState(), 0.0)
    np.testing.assert_array_equal(params["a"].value, 1.0)
    adam_step(params, AdamState(), 0.1, lr_scale={"a": 0.1})
    np.testing.assert_allclose(params["a"].value, 1 - 0.01, rtol=1e-6)
    np.testing.assert_allclose(params["b"].value, 1 - 0.1, rtol=1e-6)


def test_adam_rejects_non_finite_gradient():
    params = ParamSet()
    params.add("w", np.ones(2))
    params["w"].grad[:] = [np.nan, 0]
    with pytest.raises(NumericError) as err:
        adam_step(params, AdamState(), 0.1)
    assert err.value.where == "w"


@given(st.lists(st.floats(-10, 10, allow_nan=False).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=5))
def test_adam_step_size_bounded_by_lr(grads):
    params = ParamSet()
    params.add("x", np.array([0.0]))
    state = AdamState()
    for g in grads:
        before = params["x"].value[0]
        params["x"].grad[:] = g
        adam_step(params, state, 0.01)
        # |mhat / sqrt(vhat)| <= (1 - b1) / sqrt(1 - b2) ~ 3.2 in the worst case
        assert abs(params["x"].value[0] - before) <= 0.01 * 3.2


# ---------------------------------------------------------- checkpoints
def test_checkpoint_round_trip(tmp_path, rng):
    params = ParamSet()
    params.add("a.w", rng.normal(size=(3, 2)))
    params.add("b", rng.normal(size=4))
    params.add_buffer("bn.running_mean", rng.normal(size=4))
    path = tmp_path / "p.ckpt"
    save_params(params, path)
    other = ParamSet()
    other.add("a.w", np.zeros((3, 2)))
    other.add("b", np.zeros(4))
    meta = load_params(other, path)
    assert meta["format_version"] == 1
    np.testing.assert_array_equal(other["a.w"].value, params["a.w"].value)
    np.testing.assert_array_equal(other.buffers["bn.running_mean"], params.buffers["bn.running_mean"])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_params(ParamSet(), p)


def test_param_count_and_names():
    params = ParamSet()
    params.add("enc.w", np.zeros((3, 4)))
    params.add("head.w", np.zeros(5))
    params.add("frozen", np.zeros(7), trainable=False)
    assert params.count() == 17
    assert params.count("enc") == 12
    assert params.count(trainable_only=False) == 24
    with pytest.raises(InvalidGraphError):
        params.add("enc.w", np.zeros(1))
