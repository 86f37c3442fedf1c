import math

import numpy as np
import pytest

from vqtimbre import dsp
from vqtimbre import tensor as T
from vqtimbre.model import ModelConfig, NonFiniteLoss, TimbreModel, baseline_model

SR = 22050


@pytest.fixture(scope="module")
def toy():
    return TimbreModel(ModelConfig.toy(), seed=0)


@pytest.fixture
def tone():
    t = np.arange(4096) / SR
    return 0.5 * np.sin(2 * np.pi * 440 * t)


def tiny_config(**kw):
    base = dict(window=128, stride=32, latent_dim=4, codebook_size=8, enc_layers=3,
                enc_channels_min=2, enc_channels_max=4, gain_hidden=4, dec_hidden=8,
                dec_block_layers=2, stft_windows=(64, 128))
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_full_size_defaults(self):
        cfg = ModelConfig()
        assert cfg.bins == 2050
        assert cfg.encoder_channels()[0] == 32 and cfg.encoder_channels()[-1] == 256
        assert cfg.window >> cfg.enc_layers == 16

    def test_frame_count_full_config(self):
        model = TimbreModel(ModelConfig(), seed=0)
        assert model.num_frames(33075) == 61

    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError):
            ModelConfig(window=512, stride=100)

    def test_round_trip_dict(self):
        cfg = ModelConfig.toy(tied_bins=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


class TestEncoder:
    def test_shapes_and_positive_gain(self, toy, tone):
        enc = toy.encode(tone)
        nfr = toy.num_frames(tone.size)
        assert enc.z.shape == (1, nfr, 16) and enc.g.shape == (1, nfr)
        assert np.all(enc.g.data > 0)

    def test_silence_is_finite(self, toy):
        enc = toy.encode(np.zeros(2048))
        assert np.all(np.isfinite(enc.z.data)) and np.all(np.isfinite(enc.g.data))

    def test_too_short(self, toy):
        with pytest.raises(dsp.SignalTooShort):
            toy.encode(np.zeros(100))


class TestDecoder:
    def test_zero_weights_give_ln_one_and_half(self):
        model = TimbreModel(tiny_config(), seed=1)
        for name, p in model.params.items():
            if name.startswith("dec."):
                p.data[...] = 0.0
        codes = np.random.default_rng(0).normal(size=(1, 5, 4))
        np.testing.assert_allclose(model.decode(codes).data, math.log(1.5), atol=1e-15)

    def test_initial_filters_start_low(self):
        model = TimbreModel(tiny_config(), seed=1)
        model.params["dec.proj.w"].data[...] = 0.0
        h = model.decode(np.random.default_rng(0).normal(size=(1, 5, 4))).data
        expected = math.log1p(1.0 / (1.0 + math.exp(-model.config.filter_bias_init)))
        np.testing.assert_allclose(h, expected, atol=1e-15)
        assert expected < 0.02

    @pytest.mark.parametrize("seed", [2, 3, 4])
    def test_bounds_on_random_weights(self, seed):
        model = TimbreModel(tiny_config(), seed=seed)
        rng = np.random.default_rng(seed)
        for p in model.params.values():
            p.data = rng.normal(scale=0.5, size=p.shape)
        h = model.decode(rng.normal(size=(1, 1000, 4)) * 3).data
        assert np.all(h > 0) and np.all(h <= math.log(2))

    def test_recurrence_is_live(self, toy):
        rng = np.random.default_rng(4)
        probe = rng.normal(size=(1, 1, 16))
        a = toy.decode(np.concatenate([rng.normal(size=(1, 3, 16)), probe], axis=1)).data[0, -1]
        b = toy.decode(np.concatenate([rng.normal(size=(1, 3, 16)), probe], axis=1)).data[0, -1]
        assert np.max(np.abs(a - b)) > 1e-6

    def test_state_threading_matches_full_pass(self, toy):
        codes = np.random.default_rng(5).normal(size=(1, 6, 16))
        full = toy.decode(codes).data
        first, state = toy.decode(codes[:, :3], return_state=True)
        second = toy.decode(codes[:, 3:], h0=state).data
        np.testing.assert_allclose(np.concatenate([first.data, second], axis=1), full, atol=1e-12)

    def test_wrong_code_dim(self, toy):
        with pytest.raises(T.DimensionError):
            toy.decode(np.zeros((1, 2, 5)))


class TestSynthesis:
    @pytest.fixture
    def setup(self):
        model = TimbreModel(tiny_config(), seed=0)
        rng = np.random.default_rng(6)
        noise = rng.uniform(-1, 1, size=128 + 32 * 15)
        return model, noise, model.num_frames(noise.size)

    def test_zero_gain_is_silent(self, setup):
        model, noise, nfr = setup
        out = model.synthesize(np.full((nfr, 130), 0.5), np.zeros(nfr), noise).data
        assert np.all(out == 0)

    def test_unit_filter_round_trip(self, setup):
        model, noise, nfr = setup
        out = model.synthesize(np.ones((nfr, 130)), np.ones(nfr), noise).data[0]
        # analysis then overlap-add of the same noise: interior reconstructs exactly
        np.testing.assert_allclose(out[128:-128], noise[128:out.size - 128], atol=1e-10)

    @staticmethod
    def _low_pass_leakage_db(guard: int) -> float:
        model = TimbreModel(ModelConfig.toy(), seed=0)
        noise = np.random.default_rng(7).uniform(-1, 1, 512 * 16)
        nfr = model.num_frames(noise.size)
        cut = 64
        h = np.zeros((nfr, 514))
        h[:, :cut] = 1.0
        h[:, 257:257 + cut] = 1.0
        out = model.synthesize(h, np.ones(nfr), noise).data[0][512:-512]
        spec = np.abs(np.fft.rfft(out * np.hanning(out.size))) ** 2
        # bin b of the L=512 grid sits at index b * len / 512 of the long spectrum
        edge = int((cut + guard) * out.size / 512)
        return 10 * np.log10(spec[edge:].sum() / spec.sum())

    def test_low_pass_energy_suppressed(self):
        assert self._low_pass_leakage_db(guard=4) < -40

    @pytest.mark.xfail(strict=True, reason="unwindowed overlap-add of truncated frames leaks about -47 dB")
    def test_low_pass_energy_below_sixty_db(self):
        assert self._low_pass_leakage_db(guard=0) < -60

    def test_gain_linearity(self, setup):
        model, noise, nfr = setup
        rng = np.random.default_rng(8)
        h = rng.uniform(0, 0.69, size=(nfr, 130))
        g = rng.uniform(0.1, 2, size=nfr)
        one = model.synthesize(h, g, noise).data
        np.testing.assert_allclose(model.synthesize(h, 3.5 * g, noise).data, 3.5 * one, atol=1e-12)

    def test_frame_mismatch(self, setup):
        model, noise, nfr = setup
        with pytest.raises(T.DimensionError):
            model.synthesize(np.ones((nfr - 1, 130)), np.ones(nfr - 1), noise)

    def test_tied_bins(self):
        model = TimbreModel(tiny_config(tied_bins=True), seed=0)
        noise = np.random.default_rng(9).uniform(-1, 1, 128 + 32 * 7)
        nfr = model.num_frames(noise.size)
        h = np.random.default_rng(10).uniform(0, 0.6, size=(nfr, 65))
        tied = model.synthesize(h, np.ones(nfr), noise).data
        untied = TimbreModel(tiny_config(), seed=0).synthesize(np.concatenate([h, h], 1), np.ones(nfr), noise).data
        np.testing.assert_allclose(tied, untied, atol=1e-12)


class TestForwardAndObjective:
    def test_forward_length_finite_bounded(self, toy, tone):
        res = toy.forward(tone, np.random.default_rng(0))
        assert abs(res.w_hat.shape[-1] - tone.size) < 512
        assert res.w_hat.shape[-1] == toy.output_length(tone.size)
        assert np.all(np.isfinite(res.w_hat.data)) and np.max(np.abs(res.w_hat.data)) < 100

    def test_deterministic(self, tone):
        a = TimbreModel(ModelConfig.toy(), seed=3).forward(tone, np.random.default_rng(1)).w_hat.data
        b = TimbreModel(ModelConfig.toy(), seed=3).forward(tone, np.random.default_rng(1)).w_hat.data
        assert np.array_equal(a, b)

    def test_components_sum_to_total(self, toy, tone):
        cfg = toy.config
        obj = toy.objective(tone, toy.forward(tone, np.random.default_rng(2)))
        c = obj.components
        expected = cfg.lambda_stft * c["stft"] + cfg.lambda_latent * (c["codebook"] + cfg.beta * c["commit"])
        assert obj.total.item() == pytest.approx(expected, abs=1e-10)
        assert c["total"] == obj.total.item()

    def test_perfect_reconstruction_is_zero(self, toy, tone):
        res = toy.forward(tone, np.random.default_rng(0))
        n = res.w_hat.shape[-1]
        perfect = res._replace(w_hat=T.Tensor(tone[None, :n]), z=res.q)
        assert toy.objective(tone, perfect).total.item() == 0.0

    def test_nan_component_named(self, toy, tone):
        res = toy.forward(tone, np.random.default_rng(0))
        bad = res._replace(w_hat=T.Tensor(np.full(res.w_hat.shape, np.nan)))
        with pytest.raises(NonFiniteLoss, match="stft"):
            toy.objective(tone, bad)

    def test_one_adam_step_decreases_loss(self, tone):
        model = TimbreModel(ModelConfig.toy(), seed=0)
        opt = T.Adam(model.params, lr=2e-4)

        def loss():
            return model.objective(tone, model.forward(tone, np.random.default_rng(11)))

        before = loss()
        opt.zero_grad()
        before.total.backward()
        opt.step()
        assert loss().total.item() < before.total.item()

    def test_encoder_gradients_nonzero(self, toy, tone):
        toy.zero_grad()
        toy.objective(tone, toy.forward(tone, np.random.default_rng(12))).total.backward()
        for name, p in toy.params.items():
            if name.startswith("enc."):
                assert p.grad is not None and np.any(p.grad != 0), name
        toy.zero_grad()

    def test_commitment_gives_decoder_no_gradient(self, toy, tone):
        from vqtimbre.vq import commitment_loss

        toy.zero_grad()
        res = toy.forward(tone, np.random.default_rng(13))
        commitment_loss(res.z, res.q).backward()
        for name, p in toy.params.items():
            if name.startswith("dec.") or name == "codebook":
                assert p.grad is None or not np.any(p.grad), name
        toy.zero_grad()

    def test_reconstruction_gives_codebook_no_gradient(self, toy, tone):
        toy.zero_grad()
        res = toy.forward(tone, np.random.default_rng(14))
        n = res.w_hat.shape[-1]
        dsp.multiscale_stft_loss(tone[None, :n], res.w_hat).backward()
        cb = toy.params["codebook"]
        assert cb.grad is None or not np.any(cb.grad)
        toy.zero_grad()


class TestBaseline:
    def test_parameter_difference(self):
        cfg = ModelConfig.toy()
        vq, base = TimbreModel(cfg, 0), baseline_model(cfg, 0)
        extra = set(vq.params) - set(base.params)
        assert set(base.params) < set(vq.params)
        assert extra == {"codebook", "enc.gain0.w", "enc.gain0.b", "enc.gain1.w", "enc.gain1.b"}

    def test_unit_gain(self, tone):
        base = baseline_model(ModelConfig.toy(), 0)
        res = base.forward(tone, np.random.default_rng(0))
        assert res.q is None and np.all(res.g.data == 1.0)
        obj = base.objective(tone, res)
        assert obj.components["codebook"] == 0.0 and obj.total.item() == pytest.approx(obj.components["stft"])
