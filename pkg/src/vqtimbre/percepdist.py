"""Deep feature distance: weighted L1 between conv activations of two signals.

d(x, x~) = sum_l (1/T_l) * || w_l * (F_l(x) - F_l(x~)) ||_1

F_l are the activations of a strided 1-D conv stack and w_l >= 0 holds one
weight per channel.  Training such a net needs listener judgements that are
out of scope here, so the weights are either random (for tests) or loaded
from a container written by :meth:`PercepNet.save`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class PercepConfig:
    layers: int = 8
    kernel: int = 15
    stride: int = 2
    channels: int = 32
    max_channels: int = 256

    def channel_list(self) -> list[int]:
        return [min(self.channels * 2 ** i, self.max_channels) for i in range(self.layers)]


def probe_signals() -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed signal pairs whose distances are recorded alongside the weights."""
    sr = 22050
    t = np.arange(4096) / sr
    rng = np.random.default_rng(1234)
    tone = 0.5 * np.sin(2 * np.pi * 440 * t)
    return [
        (tone, tone + 0.05 * rng.uniform(-1, 1, t.size)),
        (tone, 0.5 * np.sin(2 * np.pi * 660 * t)),
        (rng.uniform(-0.5, 0.5, t.size), np.zeros(t.size)),
    ]


class PercepNet:
    def __init__(self, config: PercepConfig, kernels: list[np.ndarray], biases: list[np.ndarray],
                 weights: list[np.ndarray]):
        if config.layers < 1:
            raise ValueError("perceptual net needs at least one layer")
        if not len(kernels) == len(biases) == len(weights) == config.layers:
            raise ValueError("per-layer arrays do not match the layer count")
        for i, w in enumerate(weights):
            if np.any(np.asarray(w) < 0):
                raise ValueError(f"channel weights of layer {i} must be non-negative")
        self.config = config
        self.kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]

    @classmethod
    def random_init(cls, seed: int = 0, config: PercepConfig | None = None) -> "PercepNet":
        config = config or PercepConfig()
        rng = np.random.default_rng(seed)
        kernels, biases, weights = [], [], []
        c_prev = 1
        for c in config.channel_list():
            fan_in = c_prev * config.kernel
            kernels.append(T.kaiming_uniform(rng, (c, c_prev, config.kernel), fan_in, 0.0))
            biases.append(T.fan_in_uniform(rng, (c,), fan_in))
            weights.append(rng.uniform(0.0, 1.0, size=c))
            c_prev = c
        return cls(config, kernels, biases, weights)

    def features(self, x) -> list[Tensor]:
        """Activations of every layer for x [B, n] or [n], each [B, T_l, C_l]."""
        x = T.as_tensor(x)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        h = x.reshape(x.shape[0], x.shape[1], 1)
        pad = self.config.kernel // 2
        out = []
        for k, b in zip(self.kernels, self.biases):
            h = T.relu(T.conv1d_nlc(h, Tensor(k), stride=self.config.stride, padding=pad, bias=Tensor(b)))
            out.append(h)
        return out

    def distance(self, x, x_hat) -> Tensor:
        """Batch-mean deep feature distance; differentiable w.r.t. both inputs."""
        x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
        if x.shape != x_hat.shape:
            raise T.DimensionError(f"perceptual distance: shapes {x.shape} and {x_hat.shape} differ")
        batch = 1 if x.ndim == 1 else x.shape[0]
        total = None
        for fa, fb, w in zip(self.features(x), self.features(x_hat), self.weights):
            term = T.tsum(T.tabs((fa - fb) * w)) * (1.0 / (fa.shape[1] * batch))
            total = term if total is None else total + term
        return total

    # -- persistence ---------------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b, w) in enumerate(zip(self.kernels, self.biases, self.weights)):
            out[f"layer{i}.kernel"], out[f"layer{i}.bias"], out[f"layer{i}.weight"] = k, b, w
        return out

    def rounded(self) -> "PercepNet":
        """Copy with every array rounded through float32, as stored on disk."""
        f32 = lambda arrs: [a.astype(np.float32).astype(np.float64) for a in arrs]
        return PercepNet(self.config, f32(self.kernels), f32(self.biases), f32(self.weights))

    def probe_distances(self) -> list[float]:
        return [self.distance(a, b).item() for a, b in probe_signals()]

    def save(self, path):
        stored = self.rounded()
        meta = {"kind": "percep-net", "config": asdict(self.config), "golden": stored.probe_distances()}
        return checkpoint.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path, tolerance: float = 1e-6) -> "PercepNet":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "percep-net":
            raise checkpoint.CheckpointError(f"{path}: not a perceptual-net weight file")
        config = PercepConfig(**meta["config"])
        get = lambda kind: [arrays[f"layer{i}.{kind}"] for i in range(config.layers)]
        net = cls(config, get("kernel"), get("bias"), get("weight"))
        for i, (want, got) in enumerate(zip(meta.get("golden", []), net.probe_distances())):
            if abs(want - got) > tolerance * max(1.0, abs(want)):
                raise checkpoint.CheckpointError(f"{path}: probe {i} distance {got!r} != recorded {want!r}")
        return net


def load_weights(path) -> PercepNet:
    return PercepNet.load(path)


def random_init(seed: int = 0, config: PercepConfig | None = None) -> PercepNet:
    return PercepNet.random_init(seed, config)
