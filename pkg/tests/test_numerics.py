import itertools

import numpy as np
import pytest

from textpatch import denoiser as dn
from textpatch import glyphworld as gw
from textpatch import numerics as nx
from textpatch.numerics import Tensor

from conftest import tiny_model


def naive_attention(Q, K, V, heads):
    n, d = Q.shape
    dh = d // heads
    out = np.zeros((n, V.shape[1]))
    dv = V.shape[1] // heads
    for h in range(heads):
        for i in range(n):
            s = np.array([sum(Q[i, h * dh + a] * K[j, h * dh + a] for a in range(dh))
                          for j in range(K.shape[0])]) / np.sqrt(dh)
            w = np.exp(s - s.max())
            w /= w.sum()
            for c in range(dv):
                out[i, h * dv + c] = sum(w[j] * V[j, h * dv + c] for j in range(K.shape[0]))
    return out


class TestAttention:
    @pytest.mark.parametrize("n,m,d,heads", [(1, 1, 4, 1), (5, 7, 8, 2), (16, 16, 32, 4)])
    def test_matches_triple_loop(self, rng, n, m, d, heads):
        Q, K, V = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, d))
        np.testing.assert_allclose(nx.attention_forward(Q, K, V, heads),
                                   naive_attention(Q, K, V, heads), atol=1e-5)

    def test_identical_keys_average_values(self, rng):
        Q = rng.standard_normal((3, 4))
        K = np.ones((5, 4))
        V = rng.standard_normal((5, 4))
        np.testing.assert_allclose(nx.attention_forward(Q, K, V), np.tile(V.mean(0), (3, 1)),
                                   atol=1e-12)

    def test_single_key_returns_its_value(self, rng):
        V = rng.standard_normal((1, 6))
        out = nx.attention_forward(rng.standard_normal((4, 6)), rng.standard_normal((1, 6)), V, 2)
        np.testing.assert_allclose(out, np.tile(V, (4, 1)), atol=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        s = rng.standard_normal((7, 9)) * 50
        np.testing.assert_allclose(nx.softmax(s).sum(-1), 1.0, atol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(nx.DimensionError):
            nx.attention_forward(np.ones((2, 4)), np.ones((3, 5)), np.ones((3, 4)))
        with pytest.raises(nx.DimensionError):
            nx.attention_forward(np.ones((2, 4)), np.ones((3, 4)), np.ones((2, 4)))
        with pytest.raises(nx.DimensionError):
            nx.attention_forward(np.ones((2, 4)), np.ones((0, 4)), np.ones((0, 4)))

    def test_non_finite_input(self):
        Q = np.ones((2, 4))
        Q[0, 0] = np.nan
        with pytest.raises(nx.NumericError):
            nx.attention_forward(Q, np.ones((2, 4)), np.ones((2, 4)))


class TestLora:
    def test_zero_b_is_noop(self, rng):
        W = rng.standard_normal((6, 5))
        a = nx.LoraAdapter.init("w", 6, 5, 2, 4.0, rng, np.float64)
        x = rng.standard_normal((3, 6))
        assert np.array_equal(nx.lora_linear_forward(x, {"w": W}, "w", a), x @ W)

    def test_delta_formula(self, rng):
        W = rng.standard_normal((6, 5))
        a = nx.LoraAdapter.init("w", 6, 5, 2, 4.0, rng, np.float64)
        a.B.data[...] = rng.standard_normal(a.B.shape)
        x = rng.standard_normal((3, 6))
        expect = x @ (W + 2.0 * a.B.data @ a.A.data)
        np.testing.assert_allclose(nx.lora_linear_forward(x, {"w": W}, "w", a), expect,
                                   atol=1e-12)

    def test_rank_too_large(self, rng):
        with pytest.raises(nx.ConfigurationError):
            nx.LoraAdapter.init("w", 6, 5, 6, 1.0, rng)

    def test_wrong_target(self, rng):
        a = nx.LoraAdapter.init("other", 6, 5, 2, 1.0, rng)
        with pytest.raises(nx.ConfigurationError):
            nx.lora_linear_forward(np.ones((1, 6)), {"w": np.ones((6, 5))}, "w", a)


def _numeric_grad(f, arr, idx, h=1e-4):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


class TestBackward:
    def test_linear_gradient_is_input(self, rng):
        x = rng.standard_normal((4,))
        W = Tensor(rng.standard_normal((4, 1)), requires_grad=True, name="W")
        with nx.GradTape() as tape:
            y = nx.linear(x, W)
            loss = nx.reshape(y, ())
        g = nx.backward(tape, loss, {"W": W})
        np.testing.assert_allclose(g["W"][:, 0], x)

    def test_frozen_param_absent(self, rng):
        W = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        F = Tensor(rng.standard_normal((3, 2)), requires_grad=False)
        with nx.GradTape() as tape:
            loss = nx.mse(nx.add(nx.linear(np.ones((1, 3)), W), nx.linear(np.ones((1, 3)), F)), 0.0)
        g = nx.backward(tape, loss, {"W": W, "F": F})
        assert set(g) == {"W"}

    def test_non_scalar_loss(self):
        W = Tensor(np.ones((2, 2)), requires_grad=True)
        with nx.GradTape() as tape:
            y = nx.linear(np.ones((1, 2)), W)
        with pytest.raises(nx.ContractError):
            nx.backward(tape, y, {"W": W})

    @pytest.mark.parametrize("op", ["silu", "gelu", "relu", "layer_norm", "attention"])
    def test_ops_match_finite_differences(self, rng, op):
        x = Tensor(rng.standard_normal((3, 8)) + 0.1, requires_grad=True)
        g_ = Tensor(rng.standard_normal(8), requires_grad=True)
        b_ = Tensor(rng.standard_normal(8), requires_grad=True)
        target = rng.standard_normal((3, 8))
        params = {"x": x, "g": g_, "b": b_}

        def run():
            if op == "layer_norm":
                y = nx.layer_norm(x, g_, b_)
            elif op == "attention":
                y = nx.attention(x, nx.mul(x, g_), nx.add(x, b_), 2)
            else:
                y = getattr(nx, op)(nx.add(nx.mul(x, g_), b_))
            return nx.mse(y, target)

        with nx.GradTape() as tape:
            loss = run()
        grads = nx.backward(tape, loss, params)
        for name, t in params.items():
            for idx in itertools.islice(np.ndindex(t.shape), 0, None, 3):
                num = _numeric_grad(lambda: float(run().data), t.data, idx, 1e-6)
                assert abs(num - grads[name][idx]) <= 1e-6 + 1e-5 * abs(num)

    def test_full_denoiser_matches_finite_differences(self, variant):
        model = tiny_model(variant, d_model=8, heads=2, dtype=np.float64)
        model.set_trainable(model.params)
        r = np.random.default_rng(3)
        x_t = r.standard_normal((2, 32, 32))
        t = np.array([5, 30])
        e = np.stack([gw.encode_prompt(p).embedding for p in
                      (gw.Prompt(0, "AB"), gw.Prompt(3, "XYZ"))]).astype(np.float64)
        target = r.standard_normal((2, 32, 32))
        params = model.trainable()

        def loss_value():
            return float(nx.mse(model.forward(x_t, t, e), target).data)

        with nx.GradTape() as tape:
            loss = nx.mse(model.forward(x_t, t, e), target)
        grads = nx.backward(tape, loss, params)
        worst = 0.0
        pick = np.random.default_rng(0)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for i in pick.choice(flat.size, size=min(3, flat.size), replace=False):
                idx = np.unravel_index(i, p.shape)
                num = _numeric_grad(loss_value, p.data, idx)
                ana = grads[name][idx]
                if max(abs(num), abs(ana)) > 1e-7:
                    worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
        assert worst <= 1e-4


class TestAdam:
    def test_zero_grads_fixpoint(self):
        p = {"w": np.array([1.0, 2.0])}
        s = nx.AdamState.zeros_like(p)
        nx.adam_step(p, {"w": np.zeros(2)}, s, 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": np.array([0.5])}
        s = nx.AdamState.zeros_like(p)
        nx.adam_step(p, {"w": np.array([1.0])}, s, 0.1)
        assert p["w"][0] == pytest.approx(0.4, abs=1e-6)

    def test_bad_lr(self):
        p = {"w": np.zeros(1)}
        with pytest.raises(nx.ConfigurationError):
            nx.adam_step(p, {"w": np.zeros(1)}, nx.AdamState.zeros_like(p), 0.0)

    def test_state_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nx.adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)},
                         nx.AdamState.zeros_like({"w": np.zeros(3)}), 0.1)

    def test_deterministic_trajectory(self, rng):
        g = [rng.standard_normal(4) for _ in range(5)]

        def run():
            p = {"w": np.ones(4)}
            s = nx.AdamState.zeros_like(p)
            for gi in g:
                nx.adam_step(p, {"w": gi}, s, 0.01)
            return p["w"]

        assert np.array_equal(run(), run())
