import numpy as np
import pytest
from hypothesis import given, strategies as st

from tmtune import nncore as nn
from tmtune.nncore import (LSTM, MLP, Adam, CheckpointError, Conv2d, LayerNorm, Linear, ShapeMismatch,
                           Tensor, adam_step, load_checkpoint, precision, save_checkpoint)
from tmtune.nncore import functional as F


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of the scalar f() with respect to every entry of every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f()
            a[i] = old - eps
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def check_grads(build, shapes, seed, scale=1.0, tol=1e-6):
    """build(*tensors) -> Tensor; compares autodiff against finite differences of sum(out * w)."""
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        arrays = [rng.normal(0, scale, s) for s in shapes]
        probe = None

        def value():
            nonlocal probe
            out = build(*[Tensor(a) for a in arrays]).data
            if probe is None:
                probe = np.random.default_rng(seed + 1).normal(size=out.shape)
            return float((out * probe).sum())

        value()
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*ts)
        (out * Tensor(probe)).sum().backward()
        expect = numeric_grad(value, arrays)
    for t, e in zip(ts, expect):
        assert t.grad is not None and t.grad.shape == e.shape
        assert np.allclose(t.grad, e, rtol=tol, atol=tol), np.abs(t.grad - e).max()


SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear(seed):
    b, n, m = 1 + seed % 4, 2 + seed % 5, 1 + seed % 3
    check_grads(lambda x, W, c: F.linear(x, W, c), [(b, n), (m, n), (m,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_lstm(seed):
    B, T, Fi, H = 1 + seed % 3, 1 + seed % 5, 1 + seed % 4, 1 + (seed // 3) % 4
    check_grads(lambda x, Wx, Wh, b: F.lstm_layer(x, Wx, Wh, b),
                [(B, T, Fi), (4 * H, Fi), (4 * H, H), (4 * H,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("padding", ["valid", "same"])
def test_grad_conv2d(seed, padding):
    k = 1 + seed % 4
    H = k + seed % 3
    shapes = [(1 + seed % 2, 1 + seed % 3, H, H + 1), (2, 1 + seed % 3, k, k), (2,)]
    check_grads(lambda x, w, b: F.conv2d(x, w, b, padding), shapes, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_layer_norm_and_elementwise(seed):
    n = 2 + seed % 6
    check_grads(lambda x, g, b: F.layer_norm(x, g, b), [(3, n), (n,), (n,)], seed)
    check_grads(lambda x: nn.tanh(x) * nn.sigmoid(x) + nn.softplus(x) + nn.exp(x * 0.3), [(4, n)], seed)
    check_grads(lambda x, y: nn.minimum(x, y) + x ** 2 - (y @ x.transpose(1, 0)).sum(), [(3, n), (3, n)],
                seed)
    check_grads(lambda x: nn.log(x * x + 1.0).mean(axis=1) + x[1:, :2].sum(), [(3, n)], seed)
    check_grads(lambda x, y: nn.concat([x, y], axis=1).reshape(-1) * 2.0, [(2, n), (2, 3)], seed)
    check_grads(lambda x: F.upsample_nearest2x(x), [(1, 2, n, 3)], seed)


def test_grad_relu_away_from_kink():
    check_grads(lambda x: nn.relu(x * 1.0), [(5, 5)], 0, scale=1.0)


def test_grad_through_modules():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        mlp = MLP([3, 6, 6, 2], rng, layer_norm=True)
        lstm = LSTM(2, 4, 2, rng)
    params = [p.data for p in mlp.parameters() + lstm.parameters()]
    x = np.random.default_rng(1).normal(size=(2, 5, 3))

    def value():
        with precision(np.float64):
            return float((lstm(mlp(Tensor(x))) ** 2).sum().data)

    mlp.zero_grad(), lstm.zero_grad()
    with precision(np.float64):
        (lstm(mlp(Tensor(x))) ** 2).sum().backward()
    auto = [p.grad for p in mlp.parameters() + lstm.parameters()]
    for a, e in zip(auto, numeric_grad(value, params)):
        assert np.allclose(a, e, atol=1e-6)


# ---------------------------------------------------------------- forward oracles

def test_conv2d_matches_direct_loop(rng):
    x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4)
    with precision(np.float64):
        y = F.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, o, i, j] = (x[n, :, i:i + 3, j:j + 2] * w[o]).sum() + b[o]
    assert np.allclose(y, ref, atol=1e-12)


def test_conv2d_same_keeps_size_and_pads_after():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 1, 1] = 1.0     # picks the lower-right neighbour
    with precision(np.float64):
        y = F.conv2d(Tensor(x), Tensor(w), padding="same").data
    assert y.shape == x.shape
    assert np.array_equal(y[0, 0, :3, :3], x[0, 0, 1:, 1:]) and np.all(y[0, 0, 3] == 0)


def test_lstm_matches_scalar_recurrence(rng):
    B, T, Fi, H = 2, 4, 3, 2
    x = rng.normal(size=(B, T, Fi))
    Wx, Wh, b = rng.normal(size=(4 * H, Fi)), rng.normal(size=(4 * H, H)), rng.normal(size=4 * H)
    with precision(np.float64):
        out = F.lstm_layer(Tensor(x), Tensor(Wx), Tensor(Wh), Tensor(b)).data
    sig = lambda z: 1 / (1 + np.exp(-z))
    for n in range(B):
        h, c = np.zeros(H), np.zeros(H)
        for t in range(T):
            z = Wx @ x[n, t] + Wh @ h + b
            i, f, g, o = sig(z[:H]), sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), sig(z[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            assert np.allclose(out[n, t], h, atol=1e-12)


def test_layer_norm_statistics(rng):
    with precision(np.float64):
        ln = LayerNorm(7)
        y = ln(Tensor(rng.normal(3, 5, (4, 7)))).data
    assert np.allclose(y.mean(axis=1), 0, atol=1e-12) and np.allclose(y.std(axis=1), 1, atol=1e-4)


def test_dropout_modes(rng):
    d = nn.Dropout(0.5, np.random.default_rng(0))
    x = Tensor(np.ones((200, 50)))
    y = d(x).data
    assert set(np.unique(y)) <= {0.0, 2.0} and abs(y.mean() - 1) < 0.05
    d.eval()
    assert d(x) is x
    with pytest.raises(ValueError):
        nn.Dropout(1.0, rng)


def test_mlp_layer_count_and_relu(rng):
    m = MLP([4, 8, 8, 3], rng)
    assert len(m.layers) == 3 and m.num_parameters() == 4 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3
    out = MLP([4, 5], rng, final_activation=True)(Tensor(rng.normal(size=(10, 4)))).data
    assert np.all(out >= 0)


def test_no_grad_builds_no_graph(rng):
    W = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with nn.no_grad():
        y = (W @ W).sum()
    assert not y.requires_grad and y._parents == ()


def test_frozen_parameter_gets_no_gradient(rng):
    W = Tensor(rng.normal(size=(2, 3)), requires_grad=False)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    F.linear(x, W).sum().backward()
    assert W.grad is None and x.grad is not None


def test_gradients_accumulate_over_shared_use(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        (x * 2.0 + x * 3.0).sum().backward()
    assert np.allclose(x.grad, 5.0)


def test_shape_errors(rng):
    with pytest.raises(ShapeMismatch):
        F.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeMismatch):
        F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ShapeMismatch):
        F.lstm_layer(Tensor(np.ones((1, 0, 2))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 1))),
                     Tensor(np.ones(4)))
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones(3)).backward()


def test_default_dtype_is_float32(rng):
    assert nn.get_default_dtype() is np.float32
    assert Linear(3, 2, rng).W.dtype == np.float32
    with pytest.raises(ValueError):
        nn.set_default_dtype(np.int32)


# ---------------------------------------------------------------- Adam

def test_adam_first_step_is_lr_times_sign():
    p, m, v = adam_step(np.array([1.0, -2.0, 0.5]), np.array([3.0, -0.01, 0.0]), np.zeros(3),
                        np.zeros(3), 1, lr=0.1, eps=0.0 + 1e-12)
    assert np.allclose(p, [0.9, -1.9, 0.5], atol=1e-9)
    assert np.allclose(m, [0.3, -0.001, 0.0]) and np.allclose(v, [0.009, 1e-7, 0.0])


def test_adam_scalar_oracle():
    # hand-rolled recursion for constant gradient g: m_hat = v_hat^(1/2) = g every step
    p, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
    for t in range(1, 6):
        p, m, v = adam_step(p, np.array([2.0]), m, v, t, lr=0.01, eps=0.0)
    assert p[0] == pytest.approx(-0.05, abs=1e-12)
    with pytest.raises(ValueError):
        adam_step(p, p, m, v, 0)


def test_adam_minimises_quadratic():
    with precision(np.float64):
        x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = Adam([x], lr=0.05)
        for _ in range(600):
            opt.zero_grad()
            (x ** 2).sum().backward()
            opt.step()
    assert np.all(np.abs(x.data) < 1e-2)


def test_adam_skips_params_without_grad_and_round_trips(rng):
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    opt = Adam([a, b], lr=0.1)
    a.grad = np.ones(2, dtype=np.float32)
    opt.step()
    assert np.array_equal(b.data, np.ones(2)) and np.all(a.data < 1)
    opt2 = Adam([a, b], lr=0.1)
    opt2.load_state_dict(opt.state_dict())
    assert opt2.t == 1 and np.array_equal(opt2.m[0], opt.m[0])


# ---------------------------------------------------------------- checkpoints

@given(st.lists(st.tuples(st.text(min_size=1, max_size=12),
                          st.lists(st.integers(0, 4), min_size=0, max_size=3)), max_size=6, unique_by=lambda t: t[0]),
       st.integers(0, 2**31))
def test_checkpoint_round_trip(tmp_path_factory, entries, seed):
    rng = np.random.default_rng(seed)
    tensors = {name: rng.normal(size=shape).astype(np.float32) for name, shape in entries}
    path = tmp_path_factory.mktemp("ck") / "c.bin"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and np.array_equal(back[k], tensors[k])


def test_checkpoint_module_state(tmp_path, rng):
    a, b = MLP([3, 4, 2], np.random.default_rng(1)), MLP([3, 4, 2], np.random.default_rng(2))
    save_checkpoint(tmp_path / "m.bin", a.state_dict())
    b.load_state_dict(load_checkpoint(tmp_path / "m.bin"))
    x = Tensor(rng.normal(size=(5, 3)))
    assert np.array_equal(a(x).data, b(x).data)
    with pytest.raises(KeyError):
        b.load_state_dict({})


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "header"])
def test_checkpoint_corruption(tmp_path, damage):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"w": np.ones((3, 4), np.float32), "b": np.zeros(4, np.float32)})
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[0] ^= 0xFF
    elif damage == "version":
        raw[8] = 9
    elif damage == "truncate":
        raw = raw[:-5]
    elif damage == "trailing":
        raw += b"\0\0"
    else:
        raw = raw[:18]
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
