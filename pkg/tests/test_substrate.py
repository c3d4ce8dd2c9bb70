import numpy as np
import pytest

from unitdenoise import substrate as sub
from unitdenoise.substrate import (
    AdamState,
    ScheduleConfig,
    Tape,
    Tensor,
    adam_step,
    backward,
    grad_check,
    lr_at_step,
)


def _params(rng, **shapes):
    return {name: Tensor(rng.standard_normal(shape), requires_grad=True)
            for name, shape in shapes.items()}


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(5.0))
    with Tape() as tape:
        tape.register("x", x)
        loss = sub.sum_(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads["x"], np.ones(5))


def test_backward_dot_gives_2x():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(4))
    with Tape() as tape:
        tape.register("x", x)
        loss = sub.sum_(sub.mul(x, x))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads["x"], 2 * x.data, rtol=1e-14)


def test_backward_untouched_param_gets_zero():
    x = Tensor(np.ones(3))
    unused = Tensor(np.ones(2))
    with Tape() as tape:
        tape.register("x", x)
        tape.register("unused", unused)
        loss = sub.sum_(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))


def test_backward_rejects_nonscalar_and_reuse():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        tape.register("x", x)
        y = sub.scale(x, 2.0)
        loss = sub.sum_(y)
    with pytest.raises(sub.TapeError):
        backward(tape, y)
    backward(tape, loss)
    with pytest.raises(sub.TapeError):
        backward(tape, loss)


def test_backward_rejects_foreign_loss():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        tape.register("x", x)
        sub.sum_(x)
    foreign = sub.sum_(Tensor(np.ones(2)))
    with pytest.raises(sub.TapeError):
        backward(tape, foreign)


def test_softmax_uniform_on_equal_entries():
    out = sub.softmax(Tensor(np.full(7, 3.3)))
    np.testing.assert_allclose(out.data, np.full(7, 1 / 7), rtol=1e-15)


def test_matmul_identity_is_noop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4))
    out = sub.matmul(Tensor(x), Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, x)


def test_log_softmax_stable_at_large_magnitudes():
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = rng.uniform(-1e3, 1e3, size=rng.integers(2, 9))
        out = sub.log_softmax(Tensor(v)).data
        assert abs(np.exp(out).sum() - 1.0) < 1e-12


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 32)) * 3 + 1.5
    y = sub.layer_norm(Tensor(x)).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-8


def test_shape_mismatch_names_offending_op():
    with pytest.raises(sub.ShapeMismatch, match="matmul"):
        sub.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_dropout_scales_by_keep_probability():
    x = Tensor(np.ones(10000))
    out = sub.dropout(x, 0.25, train=True, rng=np.random.default_rng(4))
    kept = out.data != 0.0
    assert abs(kept.mean() - 0.75) < 0.02
    np.testing.assert_allclose(out.data[kept], 1.0 / 0.75)
    same = sub.dropout(x, 0.25, train=False)
    assert same is x


# --- gradient checks for every op -------------------------------------------

def test_grad_check_every_op():
    rng = np.random.default_rng(5)

    cases = {
        "add": (lambda p: sub.sum_(sub.mul(sub.add(p["a"], p["b"]), p["c"])),
                dict(a=(4, 5), b=(5,), c=(4, 5))),
        "mul": (lambda p: sub.sum_(sub.mul(p["a"], p["b"])),
                dict(a=(3, 4), b=(3, 4))),
        "scale": (lambda p: sub.sum_(sub.scale(p["a"], -2.5)), dict(a=(6,))),
        "matmul": (lambda p: sub.sum_(sub.mul(sub.matmul(p["a"], p["b"]), p["c"])),
                   dict(a=(3, 4), b=(4, 2), c=(3, 2))),
        "matmul_batched": (
            lambda p: sub.sum_(sub.mul(sub.matmul(p["a"], p["b"]), p["c"])),
            dict(a=(2, 3, 4), b=(2, 4, 3), c=(2, 3, 3))),
        "tanh": (lambda p: sub.sum_(sub.mul(sub.tanh(p["a"]), p["b"])),
                 dict(a=(4, 4), b=(4, 4))),
        "gelu": (lambda p: sub.sum_(sub.mul(sub.gelu(p["a"]), p["b"])),
                 dict(a=(4, 4), b=(4, 4))),
        "softmax": (lambda p: sub.sum_(sub.mul(sub.softmax(p["a"], axis=-1), p["b"])),
                    dict(a=(3, 5), b=(3, 5))),
        "log_softmax": (
            lambda p: sub.sum_(sub.mul(sub.log_softmax(p["a"], axis=-1), p["b"])),
            dict(a=(3, 5), b=(3, 5))),
        "layer_norm": (lambda p: sub.sum_(sub.mul(sub.layer_norm(p["a"]), p["b"])),
                       dict(a=(3, 6), b=(3, 6))),
        "embedding_lookup": (
            lambda p: sub.sum_(sub.mul(sub.embedding_lookup(p["t"], [2, 0, 2, 1]), p["b"])),
            dict(t=(4, 5), b=(4, 5))),
        "concat": (
            lambda p: sub.sum_(sub.mul(sub.concat([p["a"], p["b"]], axis=0), p["c"])),
            dict(a=(2, 3), b=(4, 3), c=(6, 3))),
        "slice": (lambda p: sub.sum_(sub.mul(sub.slice_(p["a"], 1, 1, 4), p["b"])),
                  dict(a=(3, 6), b=(3, 3))),
        "mean": (lambda p: sub.mean(sub.mul(p["a"], p["a"])), dict(a=(7,))),
        "mean_axis": (lambda p: sub.sum_(sub.mul(sub.mean(p["a"], axis=0), p["b"])),
                      dict(a=(4, 3), b=(3,))),
        "sum_axis": (lambda p: sub.sum_(sub.mul(sub.sum_(p["a"], axis=1), p["b"])),
                     dict(a=(4, 3), b=(4,))),
        "reshape": (
            lambda p: sub.sum_(sub.mul(sub.reshape(p["a"], (2, 6)), p["b"])),
            dict(a=(3, 4), b=(2, 6))),
        "transpose": (
            lambda p: sub.sum_(sub.mul(sub.transpose(p["a"], (1, 0, 2)), p["b"])),
            dict(a=(2, 3, 4), b=(3, 2, 4))),
        "take_per_row": (
            lambda p: sub.sum_(sub.mul(sub.take_per_row(p["a"], [1, 0, 3]), p["b"])),
            dict(a=(3, 4), b=(3,))),
        "linear_combination": (
            lambda p: sub.sum_(sub.mul(
                sub.linear_combination(p["w"], [p["x0"], p["x1"], p["x2"]]), p["b"])),
            dict(w=(3,), x0=(4, 2), x1=(4, 2), x2=(4, 2), b=(4, 2))),
        "dropout": (
            lambda p: sub.sum_(sub.mul(
                sub.dropout(p["a"], 0.3, train=True, rng=np.random.default_rng(77)),
                p["b"])),
            dict(a=(5, 5), b=(5, 5))),
    }

    for name, (fn, shapes) in cases.items():
        params = _params(rng, **shapes)
        report = grad_check(lambda fn=fn, params=params: fn(params), params, tol=1e-5)
        assert report.ok, f"{name}: {report.per_param}"


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(6)
    params = _params(rng, w=(8,))
    c = rng.standard_normal(8)

    def f():
        return sub.sum_(sub.mul(params["w"], Tensor(c)))

    report = grad_check(f, params)
    assert report.max_rel_err < 1e-10


def test_grad_check_two_layer_tanh_net():
    rng = np.random.default_rng(7)
    params = _params(rng, w1=(5, 4), b1=(4,), w2=(4, 3), b2=(3,))
    x = Tensor(rng.standard_normal((6, 5)))

    def f():
        h = sub.tanh(sub.add(sub.matmul(x, params["w1"]), params["b1"]))
        out = sub.tanh(sub.add(sub.matmul(h, params["w2"]), params["b2"]))
        return sub.mean(sub.mul(out, out))

    report = grad_check(f, params)
    assert report.max_rel_err < 1e-6


# --- optimiser and schedule ---------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_first_step_is_signed_lr():
    # bias correction makes the first update -lr * g/(|g| + eps) ~ -lr * sign(g)
    g = np.array([0.731, -2.2, 14.0])
    p = {"w": Tensor(np.zeros(3))}
    adam_step(p, {"w": g}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(p["w"].data, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_is_deterministic():
    rng = np.random.default_rng(8)
    runs = []
    for _ in range(2):
        rng_run = np.random.default_rng(9)
        p = {"w": Tensor(np.ones(4))}
        state = AdamState()
        for _ in range(5):
            adam_step(p, {"w": rng_run.standard_normal(4)}, state, lr=1e-2)
        runs.append(p["w"].data.copy())
    np.testing.assert_array_equal(runs[0], runs[1])


def test_lr_schedule_shape():
    s = ScheduleConfig(peak_lr=1e-3, warmup_steps=100, decay=0.99)
    assert lr_at_step(s, 100) == pytest.approx(1e-3)
    assert lr_at_step(s, 50) == pytest.approx(5e-4)
    values = [lr_at_step(s, t) for t in range(100, 400)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    tensors = {"a.w": rng.standard_normal((3, 4)), "b": rng.standard_normal(7)}
    path = tmp_path / "ckpt.dnzr"
    sub.save_tensors(path, tensors, config_json='{"k": 1}')
    loaded, cfg = sub.load_tensors(path)
    assert cfg == '{"k": 1}'
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])
    assert path.read_text().splitlines()[0] == "DNZR v1"


def test_checkpoint_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.dnzr"
    path.write_text("NOPE v9\n")
    with pytest.raises(sub.SubstrateError):
        sub.load_tensors(path)
