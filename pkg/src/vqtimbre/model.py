"""Encoder, quantized bottleneck, filter-predicting decoder and noise synthesis."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import dsp
from . import tensor as T
from .tensor import Tensor
from .vq import Codebook, straight_through


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    window: int = 2048
    stride: int = 512
    latent_dim: int = 128
    codebook_size: int = 1024
    enc_layers: int = 7
    enc_channels_min: int = 32
    enc_channels_max: int = 256
    enc_kernel: int = 13
    gain_hidden: int = 64
    dec_hidden: int = 768
    dec_block_layers: int = 4
    leaky_slope: float = 0.2
    lambda_stft: float = 1.0
    lambda_percep: float = 0.2
    lambda_latent: float = 1.0
    beta: float = 0.25
    sample_rate: int = 22050
    tied_bins: bool = False
    quantize: bool = True
    gain: bool = True
    codebook_init_scale: float = 0.0  # 0 selects 1/K
    filter_bias_init: float = -4.0  # initial filters log1p(sigmoid(-4)) ~ 0.018: start quieter than the target
    stft_windows: tuple[int, ...] = dsp.STFT_LOSS_WINDOWS

    def __post_init__(self):
        self.stft_windows = tuple(int(v) for v in self.stft_windows)
        self.validate()

    @property
    def bins(self) -> int:
        return self.window + 2

    @property
    def filter_size(self) -> int:
        return self.window // 2 + 1 if self.tied_bins else self.bins

    def validate(self) -> None:
        ints = [self.window, self.stride, self.latent_dim, self.codebook_size, self.enc_layers,
                self.enc_channels_min, self.enc_channels_max, self.enc_kernel, self.gain_hidden,
                self.dec_hidden, self.dec_block_layers, self.sample_rate]
        if any(v <= 0 for v in ints):
            raise ValueError("all model dimensions must be positive")
        if self.window % self.stride:
            raise ValueError(f"stride {self.stride} must divide window {self.window}")
        if self.window % (2 ** self.enc_layers):
            raise ValueError(f"window {self.window} must be divisible by 2^{self.enc_layers}")

    def encoder_channels(self) -> list[int]:
        """Geometric progression from the min to the max channel count."""
        if self.enc_layers == 1:
            return [self.enc_channels_max]
        ratio = self.enc_channels_max / self.enc_channels_min
        return [int(round(self.enc_channels_min * ratio ** (i / (self.enc_layers - 1))))
                for i in range(self.enc_layers)]

    def baseline(self) -> "ModelConfig":
        return dataclasses.replace(self, quantize=False, gain=False)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(window=512, stride=128, latent_dim=16, codebook_size=32, enc_channels_min=8,
                    enc_channels_max=32, gain_hidden=16, dec_hidden=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stft_windows"] = list(self.stft_windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class EncoderOutput(NamedTuple):
    z: Tensor  # [B, T, d_z]
    g: Tensor  # [B, T]


class ForwardResult(NamedTuple):
    w_hat: Tensor
    z: Tensor
    q: Tensor | None
    indices: np.ndarray | None
    g: Tensor
    filters: Tensor


@dataclass
class Objective:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)


class TimbreModel:
    """VQ auto-encoder whose decoder filters noise frames (or the unquantized baseline)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.basis = dsp.make_basis(config.window, config.stride)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._build(rng)
        self.codebook: Codebook | None = None
        if config.quantize:
            self.codebook = Codebook(config.codebook_size, config.latent_dim, rng,
                                     config.codebook_init_scale or None)
            self.params["codebook"] = self.codebook.embeddings

    # -- construction -----------------------------------------------------
    def _linear(self, rng, name: str, n_in: int, n_out: int, slope: float | None) -> None:
        if slope is None:
            w = T.fan_in_uniform(rng, (n_out, n_in), n_in)
        else:
            w = T.kaiming_uniform(rng, (n_out, n_in), n_in, slope)
        self.params[f"{name}.w"] = T.parameter(w, f"{name}.w")
        self.params[f"{name}.b"] = T.parameter(T.fan_in_uniform(rng, (n_out,), n_in), f"{name}.b")

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        slope = cfg.leaky_slope
        c_prev = 1
        for i, c in enumerate(cfg.encoder_channels()):
            fan_in = c_prev * cfg.enc_kernel
            self.params[f"enc.conv{i}.w"] = T.parameter(
                T.kaiming_uniform(rng, (c, c_prev, cfg.enc_kernel), fan_in, slope), f"enc.conv{i}.w")
            self.params[f"enc.conv{i}.b"] = T.parameter(T.fan_in_uniform(rng, (c,), fan_in), f"enc.conv{i}.b")
            c_prev = c
        flat = c_prev * (cfg.window >> cfg.enc_layers)
        self._linear(rng, "enc.latent", flat, cfg.latent_dim, None)
        if cfg.gain:
            self._linear(rng, "enc.gain0", flat, cfg.gain_hidden, slope)
            self._linear(rng, "enc.gain1", cfg.gain_hidden, 1, None)
        h = cfg.dec_hidden
        for i in range(cfg.dec_block_layers):
            self._linear(rng, f"dec.in{i}", cfg.latent_dim if i == 0 else h, h, slope)
        for name, shape in (("w_ih", (3 * h, h)), ("w_hh", (3 * h, h)), ("b_ih", (3 * h,)), ("b_hh", (3 * h,))):
            self.params[f"dec.gru.{name}"] = T.parameter(T.fan_in_uniform(rng, shape, h), f"dec.gru.{name}")
        for i in range(cfg.dec_block_layers):
            self._linear(rng, f"dec.out{i}", h, h, slope)
        self._linear(rng, "dec.proj", h, cfg.filter_size, None)
        self.params["dec.proj.b"].data[:] = cfg.filter_bias_init

    # -- modules -------------------------------------------------------------
    def num_frames(self, n_samples: int) -> int:
        return dsp.num_frames(n_samples, self.config.window, self.config.stride)

    def output_length(self, n_samples: int) -> int:
        return dsp.output_length(self.num_frames(n_samples), self.config.window, self.config.stride)

    def encode(self, w) -> EncoderOutput:
        """Latents z [B, T, d_z] and positive gains g [B, T] for w [B, n] or [n]."""
        cfg, p = self.config, self.params
        w = T.as_tensor(w)
        if w.ndim == 1:
            w = w.reshape(1, -1)
        bsz = w.shape[0]
        frames = dsp.hann_slice(w, cfg.window, cfg.stride)  # [B, T, L]
        nfr = frames.shape[1]
        x = frames.reshape(bsz * nfr, cfg.window, 1)
        pad = cfg.enc_kernel // 2
        for i in range(cfg.enc_layers):
            x = T.conv1d_nlc(x, p[f"enc.conv{i}.w"], stride=2, padding=pad, bias=p[f"enc.conv{i}.b"])
            x = T.leaky_relu(x, cfg.leaky_slope)
        flat = x.reshape(bsz * nfr, x.shape[1] * x.shape[2])
        z = T.linear(flat, p["enc.latent.w"], p["enc.latent.b"]).reshape(bsz, nfr, cfg.latent_dim)
        if cfg.gain:
            hdn = T.leaky_relu(T.linear(flat, p["enc.gain0.w"], p["enc.gain0.b"]), cfg.leaky_slope)
            g = T.softplus(T.linear(hdn, p["enc.gain1.w"], p["enc.gain1.b"])).reshape(bsz, nfr)
        else:
            g = Tensor(np.ones((bsz, nfr)))
        return EncoderOutput(z, g)

    def decode(self, codes, h0=None, return_state: bool = False):
        """Filter coefficients [B, T, filter_size] in (0, ln 2] from codes [B, T, d_z]."""
        cfg, p = self.config, self.params
        x = T.as_tensor(codes)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[-1] != cfg.latent_dim:
            raise T.DimensionError(f"decode: code dim {x.shape[-1]} != latent_dim {cfg.latent_dim}")
        for i in range(cfg.dec_block_layers):
            x = T.leaky_relu(T.linear(x, p[f"dec.in{i}.w"], p[f"dec.in{i}.b"]), cfg.leaky_slope)
        if h0 is None:
            h0 = np.zeros((x.shape[0], cfg.dec_hidden))
        x = T.gru(x, T.as_tensor(h0), p["dec.gru.w_ih"], p["dec.gru.w_hh"], p["dec.gru.b_ih"], p["dec.gru.b_hh"])
        state = x.data[:, -1] if x.shape[1] else np.asarray(T.as_tensor(h0).data)
        for i in range(cfg.dec_block_layers):
            x = T.leaky_relu(T.linear(x, p[f"dec.out{i}.w"], p[f"dec.out{i}.b"]), cfg.leaky_slope)
        filters = T.log1p(T.sigmoid(T.linear(x, p["dec.proj.w"], p["dec.proj.b"])))
        return (filters, state) if return_state else filters

    def synthesize(self, filters, gains, noise) -> Tensor:
        """Filter noise frames with g_t * H_t and overlap-add back to a waveform."""
        filters, gains = T.as_tensor(filters), T.as_tensor(gains)
        noise = T.as_tensor(noise)
        if noise.ndim == 1:
            noise = noise.reshape(1, -1)
        if filters.ndim == 2:
            filters = filters.reshape(1, *filters.shape)
        if gains.ndim == 1:
            gains = gains.reshape(1, -1)
        spectra = dsp.fourier_frames(noise, self.basis)  # [B, T, N]
        if filters.shape[:2] != spectra.shape[:2] or gains.shape != spectra.shape[:2]:
            raise T.DimensionError(
                f"synthesize: filters {filters.shape[:2]}, gains {gains.shape}, noise frames {spectra.shape[:2]} disagree")
        if self.config.tied_bins:
            filters = T.concat([filters, filters], axis=-1)
        shaped = filters * gains.reshape(*gains.shape, 1) * spectra
        return dsp.overlap_add(shaped, self.basis)

    def noise(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=shape)

    def forward(self, w, rng: np.random.Generator) -> ForwardResult:
        w = T.as_tensor(w)
        if w.ndim == 1:
            w = w.reshape(1, -1)
        enc = self.encode(w)
        q = indices = None
        codes = enc.z
        if self.codebook is not None:
            q, indices = self.codebook.quantize(enc.z)
            codes = straight_through(enc.z, q)
        filters = self.decode(codes)
        w_hat = self.synthesize(filters, enc.g, self.noise(rng, w.shape))
        return ForwardResult(w_hat, enc.z, q, indices, enc.g, filters)

    def objective(self, w, result: ForwardResult, percep=None) -> Objective:
        """Weighted multi-scale STFT + optional deep-feature distance + latent losses."""
        from .vq import codebook_loss, commitment_loss

        cfg = self.config
        w = T.as_tensor(w)
        if w.ndim == 1:
            w = w.reshape(1, -1)
        target = w[:, :result.w_hat.shape[-1]]
        stft = dsp.multiscale_stft_loss(target, result.w_hat, cfg.stft_windows)
        total = stft * cfg.lambda_stft
        comps = {"stft": stft.item(), "percep": 0.0, "codebook": 0.0, "commit": 0.0}
        if percep is not None and cfg.lambda_percep:
            d = percep.distance(target, result.w_hat)
            total = total + d * cfg.lambda_percep
            comps["percep"] = d.item()
        if result.q is not None:
            cb = codebook_loss(result.z, result.q)
            cm = commitment_loss(result.z, result.q)
            total = total + (cb + cm * cfg.beta) * cfg.lambda_latent
            comps["codebook"], comps["commit"] = cb.item(), cm.item()
        comps["total"] = total.item()
        for name, value in comps.items():
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss component {name!r}")
        return Objective(total, comps)

    # -- utilities ---------------------------------------------------------------
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.DimensionError(f"parameter {k}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def baseline_model(config: ModelConfig, seed: int = 0) -> TimbreModel:
    """Same encoder/decoder without codebook or gain head."""
    return TimbreModel(config.baseline(), seed)
