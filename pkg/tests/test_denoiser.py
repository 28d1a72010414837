import json

import numpy as np
import pytest

from textpatch import denoiser as dn
from textpatch import glyphworld as gw
from textpatch import metrics as mt
from textpatch import numerics as nx

from conftest import tiny_model


def embed(*prompts, dtype=np.float32):
    return np.stack([gw.encode_prompt(p).embedding for p in prompts]).astype(dtype)


class TestSchedule:
    def test_first_step(self):
        s = dn.Schedule()
        assert s.T == 50
        assert s.alpha_bar[0] == 1.0
        assert s.alpha_bar[1] == pytest.approx(0.9999, abs=1e-12)

    def test_strictly_decreasing(self):
        ab = dn.Schedule().alpha_bar
        assert np.all(np.diff(ab) < 0)
        assert ab[-1] < 1e-3

    def test_forward_noise_limits(self, rng):
        x0, eps = rng.standard_normal((32, 32)), rng.standard_normal((32, 32))
        np.testing.assert_array_equal(dn.forward_noise(x0, 0, eps, alpha_bar=np.array([1.0])), x0)
        np.testing.assert_array_equal(dn.forward_noise(x0, 0, eps, alpha_bar=np.array([0.0])), eps)

    def test_forward_noise_formula(self, rng):
        s = dn.Schedule()
        x0, eps = rng.standard_normal((32, 32)), rng.standard_normal((32, 32))
        ab = s.alpha_bar[17]
        np.testing.assert_allclose(dn.forward_noise(x0, 17, eps, s),
                                   np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)

    @pytest.mark.parametrize("t", [0, 51, -1])
    def test_range(self, t):
        with pytest.raises(dn.RangeError):
            dn.forward_noise(np.zeros((32, 32)), t, np.zeros((32, 32)), dn.Schedule())


class TestForward:
    def test_deterministic(self, variant, rng):
        m = tiny_model(variant)
        x = rng.standard_normal((2, 32, 32)).astype(np.float32)
        e = embed(gw.Prompt(0, "AB"), gw.Prompt(1, "CD"))
        a = m.forward(x, 10, e).data
        b = m.forward(x, 10, e).data
        assert a.tobytes() == b.tobytes()
        assert a.shape == (2, 32, 32)

    def test_severed_conditioning_is_prompt_invariant(self, variant, rng):
        m = tiny_model(variant)
        for name in dn.cond_output_names(m.config):
            m.params[name].data[...] = 0
        x = rng.standard_normal((1, 32, 32)).astype(np.float32)
        words = ["STOP", "MAZE", "A", "", "ZZZ", "QUICK", "HI", "JAW", "ZIP", "OK"]
        outs = [m.forward(x, 20, embed(gw.Prompt(1, w))).data for w in words]
        for o in outs[1:]:
            assert np.array_equal(o, outs[0])

    def test_static_text_enters_only_through_text_kv(self, rng):
        m = tiny_model("static")
        for l in range(m.config.n_blocks):
            for name in dn.kv_text_names(m.config, l):
                m.params[name].data[...] = 0
                m.params[dn._bias_name(name)].data[...] = 0
        x = rng.standard_normal((1, 32, 32)).astype(np.float32)
        a = m.forward(x, 20, embed(gw.Prompt(1, "STOP"))).data
        b = m.forward(x, 20, embed(gw.Prompt(1, "WAVE"))).data
        assert np.array_equal(a, b)

    def test_joint_text_stream_updates(self, rng):
        m = tiny_model("joint", d_model=64, heads=4)
        streams = []
        e = embed(gw.Prompt(0, "STOP"))
        m.forward(rng.standard_normal((1, 32, 32)).astype(np.float32), 5, e, streams=streams)
        c0 = e @ m.params["ctx_in.w"].data + m.params["ctx_in.b"].data
        assert len(streams) == m.config.n_blocks
        assert not np.allclose(streams[0], c0)

    def test_bad_shapes(self):
        m = tiny_model()
        with pytest.raises(nx.DimensionError):
            m.forward(np.zeros((1, 16, 16), np.float32), 1, embed(gw.Prompt(0, "A")))
        with pytest.raises(nx.DimensionError):
            m.forward(np.zeros((1, 32, 32), np.float32), 1, np.zeros((1, 5, 64), np.float32))

    def test_parameter_table_mismatch(self):
        cfg = dn.ModelConfig(variant="static", n_blocks=2, d_model=16, heads=2)
        params = dn.init_params(cfg)
        params.pop("blocks.1.cross.wk_txt")
        with pytest.raises(dn.ModelConfigError):
            dn.DenoiserModel(cfg, params)
        with pytest.raises(dn.ModelConfigError):
            dn.ModelConfig(variant="mixed")


class TestSample:
    def test_deterministic(self, variant):
        m = tiny_model(variant)
        p = gw.Prompt(0, "STOP")
        assert dn.sample(m, p, 3).tobytes() == dn.sample(m, p, 3).tobytes()

    def test_guidance_identity(self):
        m = tiny_model()
        p = gw.Prompt(2, "AB")
        assert dn.sample(m, p, 1, guidance_scale=1.0).tobytes() == dn.sample(m, p, 1).tobytes()

    def test_guidance_changes_output(self):
        m = tiny_model()
        p = gw.Prompt(2, "AB")
        assert not np.array_equal(dn.sample(m, p, 1, guidance_scale=3.0), dn.sample(m, p, 1))

    def test_hook_layer_out_of_range(self):
        m = tiny_model()

        class Hook:
            layers = [5]

            def __call__(self, layer, t, k, v):
                return k, v

        with pytest.raises(dn.PlanError):
            dn.sample(m, gw.Prompt(0, "A"), 0, hooks=Hook())

    def test_hooks_called_per_layer_and_step(self):
        m = tiny_model()
        seen = []

        def hook(layer, t, k, v):
            seen.append((layer, t))
            return k, v

        dn.sample(m, gw.Prompt(0, "A"), 0, hooks=hook)
        assert sorted(seen) == sorted((l, t) for l in range(2) for t in range(1, 51))

    def test_image_range(self):
        img = dn.sample(tiny_model(), gw.Prompt(0, "A"), 0)
        assert img.shape == (32, 32) and img.min() >= 0 and img.max() <= 1


class TestTrainStep:
    def test_perfect_predictor_has_zero_loss(self, rng, monkeypatch):
        m = tiny_model()
        m.set_trainable(m.params)
        captured = {}

        def fake_noise(x0, t, eps, schedule=None, alpha_bar=None):
            captured["eps"] = eps
            return eps

        monkeypatch.setattr(dn, "forward_noise", fake_noise)

        def oracle(x_t, t, e, **kw):
            return nx.Tensor(captured["eps"])

        monkeypatch.setattr(m, "forward", oracle)
        res = dn.train_step(m, [(np.zeros((32, 32)), gw.Prompt(0, "A"))], rng)
        assert res.loss == 0.0

    def test_deterministic_loss(self):
        batch = [(gw.render_sample(gw.Prompt(0, "AB"), i).image, gw.Prompt(0, "AB"))
                 for i in range(3)]
        losses = []
        for _ in range(2):
            m = tiny_model()
            m.set_trainable(m.params)
            losses.append(dn.train_step(m, batch, np.random.default_rng(9)).loss)
        assert losses[0] == losses[1]

    def test_non_finite_names_index(self):
        m = tiny_model()
        m.set_trainable(m.params)
        batch = [(np.zeros((32, 32)), gw.Prompt(0, "A")), (np.full((32, 32), np.nan),
                                                          gw.Prompt(0, "B"))]
        with pytest.raises(nx.NumericError, match="index 1"):
            dn.train_step(m, batch, np.random.default_rng(0), p_uncond=0.0)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            dn.train_step(tiny_model(), [], np.random.default_rng(0))

    def test_training_reduces_loss(self):
        m = tiny_model(randomize_mod=False)
        m.set_trainable(m.params)
        words = ["AB", "CD", "EF"]
        cfg = dn.TrainConfig(steps=60, batch=4, lr=3e-3, log_every=20)
        res = dn.train(m, words, cfg)
        assert res.curve[-1][1] < res.curve[0][1]

    def test_fresh_model_trains_every_tensor(self):
        m = tiny_model(randomize_mod=False)
        before = m.digest()
        dn.train(m, ["AB"], dn.TrainConfig(steps=2, batch=2, warmup_high=1))
        assert set(m.trainable()) == set(m.params)
        assert m.digest() != before


class TestCheckpoint:
    def test_round_trip(self, tmp_path, variant):
        m = tiny_model(variant)
        dn.save_checkpoint(m, tmp_path / "ck")
        back = dn.load_checkpoint(tmp_path / "ck")
        assert back.digest() == m.digest()
        man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert man["variant"] == variant and man["encoder"] == gw.ENCODER_VERSION

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match=str(tmp_path)):
            dn.load_checkpoint(tmp_path / "nope")


class TestOracle:
    def test_renders_prompt_text(self, variant):
        m = dn.build_oracle(variant, 2, n_blocks=4)
        for w in ("STOP", "QUICKBROWN"):
            assert mt.ocr_decode(dn.sample(m, gw.Prompt(3, w), 1)) == w

    def test_other_layers_carry_no_text(self):
        m = dn.build_oracle("static", 1, n_blocks=3)
        for name in dn.kv_text_names(m.config, 0) + dn.kv_text_names(m.config, 2):
            m.params[name].data[...] = 123.0
        assert mt.ocr_decode(dn.sample(m, gw.Prompt(0, "MAZE"), 0)) == "MAZE"

    def test_bad_layer(self):
        with pytest.raises(dn.ModelConfigError):
            dn.build_oracle("static", 8)
