import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rollcast.tensor import (
    PRIMITIVES, AdamWState, CheckpointError, Graph, GraphError, GraphShapeError, LrSchedule, NonFiniteGradientError,
    adamw_step, backward_grad, forward_eval, lr_at, read_checkpoint, write_checkpoint,
)

from conftest import graph_fd_check


def test_forward_linear_identity_and_norm():
    g = Graph()
    x = g.input("x")
    g.output("double", 2.0 * x)
    g.output("same", x)
    g.output("norm", (x * x).sum())
    out = forward_eval(g, {"x": np.array([1.0, 2.0])})
    assert np.array_equal(out["double"], [2.0, 4.0])
    assert np.array_equal(out["same"], [1.0, 2.0])
    assert forward_eval(g, {"x": np.array([3.0, 4.0])})["norm"] == 25.0


def test_shape_error_names_node():
    g = Graph()
    a, b = g.input("a"), g.input("b")
    g.output("y", g.apply("matmul", a, b, name="bad_product"))
    with pytest.raises(GraphShapeError, match="bad_product"):
        forward_eval(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_unbound_leaf_is_error():
    g = Graph()
    g.output("y", g.input("x") + 1.0)
    with pytest.raises(GraphError, match="not bound"):
        forward_eval(g, {})


def test_square_derivative():
    g = Graph()
    x = g.param("x")
    g.output("y", (x * x).sum())
    forward_eval(g, {"x": np.array(3.0)})
    assert backward_grad(g, "y")["x"] == pytest.approx(6.0)


def test_stop_gradient_blocks_path():
    g = Graph()
    x, w = g.param("x"), g.param("w")
    g.output("y", (g.stop_gradient(x) * w).sum())
    forward_eval(g, {"x": np.array([1.5, -2.0]), "w": np.array([0.5, 4.0])})
    grads = backward_grad(g, "y", wrt=["x", "w"])
    assert np.array_equal(grads["x"], [0.0, 0.0])
    assert np.array_equal(grads["w"], [1.5, -2.0])


def test_stop_gradient_removes_only_its_edge():
    # y = x*x + sg(x)*x: the blocked edge drops one of three x-paths
    g = Graph()
    x = g.param("x")
    g.output("y", (x * x + g.stop_gradient(x) * x).sum())
    forward_eval(g, {"x": np.array(2.0)})
    assert backward_grad(g, "y")["x"] == pytest.approx(2 * 2.0 + 2.0)


def test_backward_before_forward():
    g = Graph()
    g.output("y", g.param("x").sum())
    with pytest.raises(GraphError, match="before forward_eval"):
        backward_grad(g, "y")


def test_non_scalar_needs_seed():
    g = Graph()
    x = g.param("x")
    g.output("y", x * 3.0)
    forward_eval(g, {"x": np.ones(3)})
    with pytest.raises(GraphError, match="seed"):
        backward_grad(g, "y")
    assert np.array_equal(backward_grad(g, "y", seed=np.array([1.0, 2.0, 3.0]))["x"], [3.0, 6.0, 9.0])


def _unary_cases():
    return {
        "exp": lambda g, x: g.exp(x),
        "log": lambda g, x: g.log(x * x + 1.0),
        "sqrt": lambda g, x: g.sqrt(x * x + 0.5),
        "tanh": lambda g, x: g.tanh(x),
        "pow": lambda g, x: (x * x + 1.0) ** 1.5,
        "neg": lambda g, x: -x,
        "div": lambda g, x: 1.0 / (x * x + 1.0),
        "mean": lambda g, x: x.mean(axis=1, keepdims=True) * x,
        "max": lambda g, x: x.max(axis=0),
        "reshape": lambda g, x: x.reshape(12) * g.const(np.arange(12.0)),
        "transpose": lambda g, x: x.transpose(1, 0) @ x,
        "concat": lambda g, x: g.concat([x, x * x], axis=1),
        "getitem": lambda g, x: x[1:, ::2] * 2.0,
        "softmax": lambda g, x: g.softmax(x, axis=-1),
        "layer_norm": lambda g, x: g.layer_norm(x),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_primitive_gradients_match_finite_differences(name, rng):
    worst = 0.0
    for _ in range(8):
        g = Graph()
        x = g.param("x")
        y = _unary_cases()[name](g, x)
        g.output("y", y)
        value = rng.standard_normal((3, 4))
        # random projections keep the probe loss from being flat in x
        c = g.const(rng.standard_normal(forward_eval(g, {"x": value})["y"].shape))
        g.output("loss", (y * c).sum() + (y * y * c).sum())
        worst = max(worst, graph_fd_check(g, {"x": value}, "loss", ["x"]))
    assert worst < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul"])
def test_binary_broadcast_gradients(op, rng):
    shapes = {"matmul": ((2, 3, 4), (4, 5))}.get(op, ((3, 4), (1, 4)))
    for _ in range(8):
        g = Graph()
        a, b = g.param("a"), g.param("b")
        y = g.apply(op, a, b)
        g.output("loss", (g.tanh(y) * y).sum())
        inputs = {"a": rng.standard_normal(shapes[0]), "b": rng.standard_normal(shapes[1]) + (3.0 if op == "div" else 0.0)}
        assert graph_fd_check(g, inputs, "loss", ["a", "b"]) < 1e-6


def test_every_primitive_has_a_gradient_test():
    covered = set(_unary_cases()) | {"add", "sub", "mul", "div", "matmul", "sum", "stop_gradient"}
    # softmax and layer_norm are composites; the rest must be registered primitives
    assert set(PRIMITIVES) <= covered


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_two_layer_rollout_gradient(seed):
    rng = np.random.default_rng(seed)
    g = Graph()
    x = g.input("x0")
    w1, w2 = g.param("w1"), g.param("w2")
    for _ in range(3):
        x = x + g.tanh(x @ w1) @ w2
    g.output("loss", (x * x).mean())
    inputs = {"x0": rng.standard_normal((2, 3)), "w1": 0.5 * rng.standard_normal((3, 4)), "w2": 0.5 * rng.standard_normal((4, 3))}
    assert graph_fd_check(g, inputs, "loss", ["w1", "w2"]) < 1e-6


def test_determinism_bitwise(rng):
    g = Graph()
    x, w = g.input("x"), g.param("w")
    g.output("loss", g.tanh(x @ w).sum())
    inputs = {"x": rng.standard_normal((5, 3)), "w": rng.standard_normal((3, 2))}
    a = forward_eval(g, inputs)["loss"], backward_grad(g, "loss")["w"]
    b = forward_eval(g, inputs)["loss"], backward_grad(g, "loss")["w"]
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_release_frees_values_and_keeps_gradient(rng):
    g = Graph()
    x, w = g.input("x"), g.param("w")
    g.output("loss", g.tanh(x @ w).sum())
    inputs = {"x": rng.standard_normal((5, 3)), "w": rng.standard_normal((3, 2))}
    forward_eval(g, inputs)
    ref = backward_grad(g, "loss")["w"]
    forward_eval(g, inputs)
    assert np.array_equal(backward_grad(g, "loss", release=True)["w"], ref)
    assert not g.evaluated


# ---------------------------------------------------------------- AdamW
def test_adamw_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    out, state = adamw_step(p, {"w": np.zeros(2)}, AdamWState(), 1e-3)
    assert np.array_equal(out["w"], p["w"]) and state.step == 1


def test_adamw_constant_gradient_step_approaches_lr():
    p, state = {"w": np.array(0.0)}, AdamWState()
    for _ in range(200):
        new, state = adamw_step(p, {"w": np.array(0.7)}, state, 1e-3)
        step = float(p["w"] - new["w"])
        p = new
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adamw_minimises_quadratic():
    target, p, state = 1.7, {"x": np.array(-3.0)}, AdamWState()
    for _ in range(5000):
        p, state = adamw_step(p, {"x": 2.0 * (p["x"] - target)}, state, 1e-2)
    assert abs(float(p["x"]) - target) <= 1e-6


def test_adamw_matches_reference_formula(rng):
    p = {"w": rng.standard_normal(4)}
    grads = [rng.standard_normal(4) for _ in range(3)]
    state = AdamWState(weight_decay=0.1)
    m = v = np.zeros(4)
    ref = p["w"].copy()
    for t, g in enumerate(grads, 1):
        p, state = adamw_step(p, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        ref = ref * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=1e-14, atol=1e-15)


def test_adamw_rejects_nonfinite_with_name():
    with pytest.raises(NonFiniteGradientError, match="'bad'"):
        adamw_step({"bad": np.zeros(2)}, {"bad": np.array([np.nan, 0.0])}, AdamWState(), 1e-3)


# ---------------------------------------------------------------- schedules
def test_constant_schedule():
    s = LrSchedule("constant", 1e-4, 1e-4, 100)
    assert all(lr_at(s, k) == 1e-4 for k in range(101))


def test_cosine_endpoints_and_range():
    s = LrSchedule("cosine", 2e-6, 1e-6, 100, warmup_steps=5)
    assert lr_at(s, 5) == pytest.approx(2e-6)
    assert lr_at(s, 100) == pytest.approx(1e-6)
    rates = [lr_at(s, k) for k in range(101)]
    assert min(rates) >= 1e-6 - 1e-20 and max(rates) <= 2e-6 + 1e-20
    assert all(b <= a for a, b in zip(rates[5:], rates[6:]))


def test_schedule_clamps_with_warning():
    s = LrSchedule("cosine", 2e-6, 1e-6, 10)
    with pytest.warns(RuntimeWarning, match="clamped"):
        assert lr_at(s, 50) == pytest.approx(1e-6)


# ---------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    tensors = {"a/w": rng.standard_normal((3, 4)), "b": np.array(np.pi), "c": rng.standard_normal(0), "d": np.array([np.inf, -0.0])}
    write_checkpoint(tmp_path / "m.rcpt", tensors)
    back = read_checkpoint(tmp_path / "m.rcpt")
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_errors(tmp_path):
    write_checkpoint(tmp_path / "m.rcpt", {"w": np.ones((4, 4))})
    blob = (tmp_path / "m.rcpt").read_bytes()
    (tmp_path / "cut.rcpt").write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "cut.rcpt")
    (tmp_path / "magic.rcpt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="RCPT"):
        read_checkpoint(tmp_path / "magic.rcpt")


def test_forward_without_keep_frees_values():
    g = Graph()
    x = g.input("x")
    h = g.tanh(x * 2.0)
    g.output("y", (h * h).sum())
    g.output("h", h)
    kept = forward_eval(g, {"x": np.arange(3.0)})
    lean = forward_eval(g, {"x": np.arange(3.0)}, keep=False)
    assert not g.evaluated
    assert kept["y"] == lean["y"]
    np.testing.assert_array_equal(kept["h"], lean["h"])
