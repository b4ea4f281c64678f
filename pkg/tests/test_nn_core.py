from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special as sp

from conftest import check_grad
from dhal.errors import ContractError, CorruptFileError, DimensionError
from dhal.nn import special, tensor as T
from dhal.nn.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from dhal.nn.layers import Conv1dSpec, MlpSpec, ParamStore, conv1d_forward, init_conv1d, init_mlp, mlp_forward
from dhal.nn.optim import Adam, AdamState, adam_step
from dhal.nn.rng import RngStream, default_seed


# -- mlp_forward -------------------------------------------------------------
def _single_layer(weight, bias):
    ps = ParamStore()
    ps.add("m.0.weight", np.asarray(weight, dtype=np.float64))
    ps.add("m.0.bias", np.asarray(bias, dtype=np.float64))
    return MlpSpec((len(weight), len(bias)), output_activation="none"), ps


def test_mlp_identity():
    spec, ps = _single_layer(np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(mlp_forward(spec, ps, [1.0, 2.0, 3.0], "m").data, [1, 2, 3])


def test_mlp_zero_weights_bias():
    spec, ps = _single_layer(np.zeros((4, 1)), [0.5])
    out = mlp_forward(spec, ps, np.random.default_rng(0).normal(size=(5, 4)), "m")
    np.testing.assert_array_equal(out.data, np.full((5, 1), 0.5, dtype=np.float32))


def test_mlp_matches_hand_matmul_seed7():
    spec = MlpSpec((5, 8, 3), hidden_activation="tanh")
    ps = ParamStore()
    init_mlp(spec, ps, "net", RngStream(7))
    x = RngStream(7).split("x").normal(size=(6, 5)).astype(np.float32)
    w0, b0 = ps["net.0.weight"].data.astype(np.float64), ps["net.0.bias"].data.astype(np.float64)
    w1, b1 = ps["net.1.weight"].data.astype(np.float64), ps["net.1.bias"].data.astype(np.float64)
    ref = np.zeros((6, 3))
    for r in range(6):
        h = [np.tanh(sum(x[r, i] * w0[i, j] for i in range(5)) + b0[j]) for j in range(8)]
        ref[r] = [sum(h[i] * w1[i, j] for i in range(8)) + b1[j] for j in range(3)]
    out = mlp_forward(spec, ps, x, "net").data
    assert np.max(np.abs(out - ref)) < 1e-6


def test_mlp_rows_independent():
    spec = MlpSpec((3, 4, 2))
    ps = ParamStore()
    init_mlp(spec, ps, "n", RngStream(1))
    x = RngStream(2).normal(size=(4, 3))
    batch = mlp_forward(spec, ps, x, "n").data
    for r in range(4):
        np.testing.assert_allclose(batch[r], mlp_forward(spec, ps, x[r : r + 1], "n").data[0], rtol=1e-6)


def test_mlp_shape_mismatch_reports_shapes():
    spec, ps = _single_layer(np.eye(3), np.zeros(3))
    with pytest.raises(DimensionError, match=r"3.*\(2, 4\)"):
        mlp_forward(spec, ps, np.zeros((2, 4)), "m")


def test_mlp_spec_invariants():
    with pytest.raises(ContractError):
        MlpSpec((3,))
    with pytest.raises(ContractError):
        MlpSpec((3, 0))
    with pytest.raises(ContractError):
        MlpSpec((3, 2), hidden_activation="swish")


def test_output_activations():
    with T.precision(np.float64):
        x = T.Tensor([0.0, -50.0, 50.0])
        np.testing.assert_allclose(T.softplus_offset(x).data, [1 + np.log(2) + 1e-6, 1.000001, 51.000001], rtol=1e-12)
        np.testing.assert_allclose(T.sigmoid(x).data, sp.expit([0.0, -50.0, 50.0]), rtol=1e-12)


# -- conv1d ------------------------------------------------------------------
def _conv(weight, bias, stride):
    w = np.asarray(weight, dtype=np.float64)
    ps = ParamStore()
    ps.add("c.0.weight", w)
    ps.add("c.0.bias", np.asarray(bias, dtype=np.float64))
    return Conv1dSpec((w.shape[1], w.shape[0]), (w.shape[2],), (stride,)), ps


def test_conv_identity_kernel():
    spec, ps = _conv([[[1.0]]], [0.0], 1)
    np.testing.assert_array_equal(conv1d_forward(spec, ps, [[4.0, 5.0, 6.0]], "c").data, [[4, 5, 6]])


def test_conv_kernel2_stride2():
    spec, ps = _conv([[[1.0, 1.0]]], [0.0], 2)
    np.testing.assert_array_equal(conv1d_forward(spec, ps, [[1.0, 2.0, 3.0, 4.0]], "c").data, [[3, 7]])


def test_conv_window20_kernel6_stride2():
    spec = Conv1dSpec((3, 5), (6,), (2,))
    ps = ParamStore()
    init_conv1d(spec, ps, "c", RngStream(0))
    assert conv1d_forward(spec, ps, np.zeros((2, 3, 20)), "c").shape == (2, 5, 8)


def test_conv_matches_scipy_correlate():
    from scipy.signal import correlate

    rng = RngStream(3)
    x = rng.normal(size=(2, 11))
    w = rng.normal(size=(3, 2, 4))
    spec, ps = _conv(w, np.zeros(3), 1)
    with T.precision(np.float64):
        ps = ParamStore()
        ps.add("c.0.weight", w)
        ps.add("c.0.bias", np.zeros(3))
        out = conv1d_forward(spec, ps, x, "c").data
    ref = np.stack([sum(correlate(x[c], w[o, c], mode="valid") for c in range(2)) for o in range(3)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_too_short():
    spec, ps = _conv([[[1.0, 1.0, 1.0]]], [0.0], 1)
    with pytest.raises(DimensionError):
        conv1d_forward(spec, ps, [[1.0, 2.0]], "c")


@given(st.integers(1, 60), st.integers(1, 8), st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_conv_length_closed_form(length, kernel, stride):
    if length < kernel:
        with pytest.raises(DimensionError):
            Conv1dSpec((1, 1), (kernel,), (stride,)).output_length(length)
        return
    x = np.zeros((1, 1, length))
    w = T.Tensor(np.zeros((1, 1, kernel)))
    assert T.conv1d(x, w, None, stride).shape[-1] == (length - kernel) // stride + 1


# -- backward ----------------------------------------------------------------
def test_backward_linear_case():
    x = np.array([1.0, -2.0, 3.0])
    w = T.Tensor([0.5, 0.1, 0.2], requires_grad=True)
    T.backward((w * x).sum())
    np.testing.assert_array_equal(w.grad, x.astype(np.float32))


def test_backward_accumulates():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward((w * 3.0).sum())
    T.backward((w * 3.0).sum())
    np.testing.assert_array_equal(w.grad, [6.0, 6.0])


def test_backward_detached_gives_zero():
    ps = ParamStore()
    init_mlp(MlpSpec((2, 3, 1)), ps, "n", RngStream(0))
    out = mlp_forward(MlpSpec((2, 3, 1)), ps, np.ones((1, 2)), "n")
    T.backward(out.detach().sum() * 2.0)
    assert all(p.grad is None or not np.any(p.grad) for _, p in ps.items())


def test_backward_requires_scalar():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(w * 2.0)


def _mse_mlp_check(dtype):
    spec = MlpSpec((3, 5, 2))
    ps = ParamStore()
    init_mlp(spec, ps, "n", RngStream(11))
    x = RngStream(12).normal(size=(4, 3))
    y = RngStream(13).normal(size=(4, 2))
    names = sorted(ps)

    def build(*ts):
        store = ParamStore()
        for n, t in zip(names, ts):
            store._params[n] = t
        err = mlp_forward(spec, store, x, "n") - y
        return (err * err).mean()

    return check_grad(build, [ps[n].data for n in names], eps=1e-4, dtype=dtype)


def test_mlp_mse_gradients_match_finite_differences_f32():
    assert _mse_mlp_check(np.float32) < 1e-3


def test_mlp_mse_gradients_match_finite_differences_f64():
    assert _mse_mlp_check(np.float64) < 1e-8


OPS = {
    "add_broadcast": (lambda a, b: (a + b * 2.0).sum(), [(3, 4), (4,)]),
    "mul_div": (lambda a, b: (a * b / (b * b + 1.0)).sum(), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: T.tanh(a @ b).sum(), [(3, 4), (4, 2)]),
    "exp_log": (lambda a: T.log(T.exp(a) + 1.0).mean(), [(5,)]),
    "sqrt_pow": (lambda a: (T.sqrt(a * a + 1.0) ** 1.5).sum(), [(5,)]),
    "elu": (lambda a: (T.elu(a) * T.elu(a)).sum(), [(6,)]),
    "tanh_sigmoid": (lambda a: (T.tanh(a) * T.sigmoid(a)).sum(), [(6,)]),
    "softplus_offset": (lambda a: T.log(T.softplus_offset(a)).sum(), [(6,)]),
    "log_softmax": (lambda a: (T.log_softmax(a, -1) * T.Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)]),
    "softmax": (lambda a: (T.softmax(a, -1) ** 2.0).sum(), [(3, 4)]),
    "lgamma_digamma": (lambda a: (T.lgamma(a * a + 0.5) + T.digamma(a * a + 0.5)).sum(), [(5,)]),
    "reshape_transpose": (lambda a: (a.reshape(2, 6).T @ T.Tensor(np.ones((2, 1)))).sum() ** 2.0, [(3, 4)]),
    "getitem_concat_stack": (
        lambda a, b: (T.concat([a[:, 1:], b], axis=1) * T.stack([a[:, 0], b[:, 0]], axis=1).sum(axis=1, keepdims=True)).sum(),
        [(3, 4), (3, 2)],
    ),
    "linear": (lambda x, w, b: T.tanh(T.linear(x, w, b)).sum(), [(4, 3), (3, 5), (5,)]),
    "conv1d": (lambda x, w, b: T.tanh(T.conv1d(x, w, b, 2)).sum(), [(2, 3, 9), (4, 3, 3), (4,)]),
    "mean_axis": (lambda a: (a.mean(axis=0) ** 2.0).sum(), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_f64(name):
    build, shapes = OPS[name]
    rng = RngStream(5).split(name)
    arrays = [rng.normal(size=s) for s in shapes]
    assert check_grad(build, arrays, eps=1e-6) < 1e-8


@given(
    batch=st.integers(1, 4),
    widths=st.lists(st.integers(1, 6), min_size=2, max_size=4),
    act=st.sampled_from(["elu", "relu", "tanh"]),
    out_act=st.sampled_from(["none", "softplus_offset", "sigmoid"]),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=60, deadline=None)
def test_property_mlp_gradients(batch, widths, act, out_act, seed):
    spec = MlpSpec(tuple(widths), act, out_act)
    ps = ParamStore()
    init_mlp(spec, ps, "n", RngStream(seed))
    x = RngStream(seed).split("x").normal(size=(batch, widths[0]))
    names = sorted(ps)

    def build(*ts):
        store = ParamStore()
        for n, t in zip(names, ts[1:]):
            store._params[n] = t
        return (mlp_forward(spec, store, ts[0], "n") ** 2.0).mean()

    arrays = [x] + [ps[n].data for n in names]
    # relu kinks make FD unreliable only within eps of zero; these draws never land there in practice
    assert check_grad(build, arrays, eps=1e-4, dtype=np.float32) < 1e-3


@given(
    batch=st.integers(1, 3),
    c_in=st.integers(1, 4),
    c_out=st.integers(1, 4),
    kernel=st.integers(1, 5),
    stride=st.integers(1, 3),
    extra=st.integers(0, 8),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=40, deadline=None)
def test_property_conv_gradients(batch, c_in, c_out, kernel, stride, extra, seed):
    rng = RngStream(seed)
    x = rng.normal(size=(batch, c_in, kernel + extra))
    w = rng.normal(size=(c_out, c_in, kernel)) / np.sqrt(c_in * kernel)
    b = rng.normal(size=c_out)

    def build(x, w, b):
        return (T.tanh(T.conv1d(x, w, b, stride)) ** 2.0).sum()

    assert check_grad(build, [x, w, b], eps=1e-4, dtype=np.float32) < 1e-3


# -- Adam --------------------------------------------------------------------
def test_adam_zero_gradient_keeps_params():
    p = T.Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    adam_step([p], AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = T.Tensor([0.0, 3.0], requires_grad=True)
    p.grad = np.ones(2, dtype=np.float32)
    adam_step([p], AdamState(lr=0.1))
    np.testing.assert_allclose(p.data, [-0.1, 2.9], atol=1e-6)
    np.testing.assert_array_equal(p.grad, [1.0, 1.0])


def test_adam_missing_gradient():
    p = T.Tensor([1.0], requires_grad=True, name="w")
    with pytest.raises(ContractError, match="'w'"):
        adam_step([p], AdamState())


def _train_100(seed):
    spec = MlpSpec((3, 8, 1))
    ps = ParamStore()
    init_mlp(spec, ps, "n", RngStream(seed))
    opt = Adam([p for _, p in ps.items()], lr=1e-2)
    rng = RngStream(seed).split("data")
    for _ in range(100):
        x = rng.normal(size=(16, 3))
        opt.zero_grad()
        err = mlp_forward(spec, ps, x, "n") - x.sum(axis=1, keepdims=True)
        T.backward((err * err).mean())
        opt.step()
    return ps.state_dict()


def test_adam_determinism_100_steps():
    a, b = _train_100(4), _train_100(4)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_grad_clipping_scales_update():
    p = T.Tensor([0.0], requires_grad=True)
    p.grad = np.array([100.0], dtype=np.float32)
    state = AdamState(lr=0.1)
    adam_step([p], state, max_grad_norm=1.0)
    # Adam's step-1 update is scale free, so clipping leaves it at lr
    np.testing.assert_allclose(p.data, [-0.1], atol=1e-6)


# -- special functions ---------------------------------------------------------
@pytest.mark.parametrize("x", [1e-3, 0.1, 0.5, 1.0, 1.5, 2.0, 7.3, 25.0, 300.0])
def test_special_functions_match_scipy(x):
    assert special.lgamma(x) == pytest.approx(sp.gammaln(x), rel=1e-12, abs=1e-12)
    assert special.digamma(x) == pytest.approx(sp.digamma(x), rel=1e-11)
    assert special.trigamma(x) == pytest.approx(sp.polygamma(1, x), rel=1e-11)


def test_log_beta_matches_scipy():
    a = np.array([0.5, 1.0, 2.0, 30.0])
    b = np.array([3.0, 1.0, 0.7, 30.0])
    np.testing.assert_allclose(special.log_beta(a, b), sp.betaln(a, b), rtol=1e-12, atol=1e-13)


# -- rng -----------------------------------------------------------------------
def test_rng_identical_seed_identical_raw():
    assert np.array_equal(RngStream(42).raw(8), RngStream(42).raw(8))
    assert not np.array_equal(RngStream(42).raw(8), RngStream(43).raw(8))


def test_rng_split_independent_of_parent_consumption():
    a = RngStream(9)
    child1 = a.split("env", 3).raw(4)
    a.raw(100)
    assert np.array_equal(child1, a.split("env", 3).raw(4))
    assert not np.array_equal(child1, a.split("env", 4).raw(4))


def test_default_seed_env(monkeypatch):
    monkeypatch.setenv("DHAL_SEED", "17")
    assert default_seed() == 17
    monkeypatch.delenv("DHAL_SEED")
    assert default_seed(5) == 5


# -- checkpoints -----------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    state = {"b.w": np.arange(6, dtype=np.float32).reshape(2, 3), "a.bias": np.array([0.5, -1.0], np.float32)}
    digest = save_checkpoint(tmp_path / "c.bin", state, {"k": 1})
    loaded, meta = load_checkpoint(tmp_path / "c.bin")
    assert meta == {"k": 1} and len(digest) == 64
    for k in state:
        np.testing.assert_array_equal(loaded[k], state[k])


def test_checkpoint_layout_lexicographic():
    data = encode_checkpoint({"z": np.ones(2), "a": np.zeros(3)})
    assert data.startswith(b"DHAL-CKPT-1\n")
    import json

    manifest = json.loads(data.split(b"\n")[1])
    assert [e["name"] for e in manifest["params"]] == ["a", "z"]
    assert [e["offset"] for e in manifest["params"]] == [0, 12]
    blob = data.split(b"\n", 2)[2]
    assert np.frombuffer(blob, "<f4").tolist() == [0, 0, 0, 1, 1]


def test_checkpoint_corruption_rejected():
    data = bytearray(encode_checkpoint({"w": np.arange(4.0)}))
    data[-1] ^= 0x01
    with pytest.raises(CorruptFileError):
        decode_checkpoint(bytes(data))
    with pytest.raises(CorruptFileError):
        decode_checkpoint(b"NOT-A-CKPT\n{}\n")


def test_paramstore_duplicate_and_mismatch():
    ps = ParamStore()
    ps.add("w", np.zeros(2))
    with pytest.raises(ContractError):
        ps.add("w", np.zeros(2))
    with pytest.raises(DimensionError):
        ps.load_state_dict({"w": np.zeros(3)})
