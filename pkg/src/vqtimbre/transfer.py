"""Timbre transfer, codebook-to-descriptor maps and descriptor-driven synthesis."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from . import tensor as T

MAP_LENGTH = 16
WARMUP_FRAMES = 2
SILENCE_GATE_DB = -80.0


@dataclass
class TransferResult:
    waveform: np.ndarray
    indices: np.ndarray | None
    gains: np.ndarray


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def frame_levels_db(w: np.ndarray, length: int, stride: int) -> np.ndarray:
    frames = dsp.hann_slice(np.asarray(w, dtype=np.float64), length, stride)
    rms = np.sqrt(np.mean(frames ** 2, axis=-1))
    with np.errstate(divide="ignore"):
        return 20 * np.log10(rms)


def transfer(w, model, seed=0, silence_db: float | None = SILENCE_GATE_DB) -> TransferResult:
    """Encode, quantize, decode and resynthesize ``w`` with the source gains.

    Frames quieter than ``silence_db`` get zero gain so silence maps to
    silence even for models without a gain head.  Model state (including
    codebook usage counters) is left untouched.
    """
    cfg = model.config
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError(f"transfer expects a mono waveform, got shape {w.shape}")
    with T.no_grad():
        enc = model.encode(w)
        codes = enc.z
        indices = None
        if model.codebook is not None:
            indices = model.codebook.nearest(enc.z.data)
            codes = model.codebook.lookup(indices)
        filters = model.decode(codes)
        gains = enc.g.data.copy()
        if silence_db is not None:
            gains[0, frame_levels_db(w, cfg.window, cfg.stride) < silence_db] = 0.0
        out = model.synthesize(filters, gains, model.noise(_rng(seed), (1, w.size)))
    return TransferResult(out.data[0], None if indices is None else indices[0], gains[0])


# -- descriptor maps ----------------------------------------------------------------

@dataclass
class DescriptorMap:
    descriptor: str
    values: np.ndarray  # [K]
    valid: np.ndarray  # [K] bool
    length: int = MAP_LENGTH
    gain: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values)

    def __len__(self) -> int:
        return self.values.size

    def nearest(self, targets) -> np.ndarray:
        """Index of the closest valid entry per target; ties go to the lower index."""
        idx = np.nonzero(self.valid)[0]
        if idx.size == 0:
            raise ValueError(f"descriptor map for {self.descriptor!r} has no valid entries")
        targets = np.asarray(targets, dtype=np.float64)
        dist = np.abs(self.values[idx][None, :] - targets.reshape(-1, 1))
        return idx[np.argmin(dist, axis=1)].reshape(targets.shape)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["code_index", "descriptor", "value", "valid"])
            for k, (v, ok) in enumerate(zip(self.values, self.valid)):
                writer.writerow([k, self.descriptor, repr(float(v)), int(ok)])

    @classmethod
    def from_csv(cls, path) -> "DescriptorMap":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty descriptor map")
        rows.sort(key=lambda r: int(r["code_index"]))
        if [int(r["code_index"]) for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: code indices are not 0..K-1")
        return cls(rows[0]["descriptor"], [float(r["value"]) for r in rows], [r["valid"] == "1" for r in rows])


def _descriptor_frames(name: str, w: np.ndarray, model) -> np.ndarray:
    cfg = model.config
    return dsp.descriptor_curve(name, w, cfg.sample_rate, cfg.window, cfg.stride)


def map_codebook(model, descriptor: str, length: int = MAP_LENGTH, warmup: int = WARMUP_FRAMES,
                 seed=0) -> DescriptorMap:
    """Average descriptor of each code decoded as a constant series with unit gain."""
    if model.codebook is None:
        raise ValueError("descriptor maps need a model with a codebook")
    if descriptor not in dsp.DESCRIPTORS:
        raise ValueError(f"unknown descriptor {descriptor!r}; expected one of {sorted(dsp.DESCRIPTORS)}")
    if length <= warmup:
        raise ValueError(f"map length {length} must exceed the {warmup} warm-up frames")
    cfg = model.config
    size = model.codebook.size
    n = dsp.output_length(length, cfg.window, cfg.stride)
    rng = _rng(seed)
    with T.no_grad():
        codes = np.repeat(model.codebook.embeddings.data[:, None, :], length, axis=1)
        filters = model.decode(codes)
        out = model.synthesize(filters, np.ones((size, length)), model.noise(rng, (size, n))).data
    values = np.full(size, np.nan)
    for k in range(size):
        curve = _descriptor_frames(descriptor, out[k], model)[warmup:]
        curve = curve[np.isfinite(curve)]
        if curve.size:
            values[k] = curve.mean()
    return DescriptorMap(descriptor, values, np.isfinite(values), length, 1.0)


@dataclass
class DescriptorSynthesis:
    waveform: np.ndarray
    indices: np.ndarray
    targets: np.ndarray
    achieved: np.ndarray


def synth_from_targets(targets, dmap: DescriptorMap, model, seed=0) -> DescriptorSynthesis:
    """Decode the nearest-mapped code per target as one threaded sequence, unit gain."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if targets.size == 0:
        raise ValueError("no descriptor targets given")
    if model.codebook is None or len(dmap) != model.codebook.size:
        raise ValueError("descriptor map does not match the model codebook")
    indices = dmap.nearest(targets)
    cfg = model.config
    n = dsp.output_length(targets.size, cfg.window, cfg.stride)
    with T.no_grad():
        filters = model.decode(model.codebook.lookup(indices[None, :]))
        out = model.synthesize(filters, np.ones((1, targets.size)), model.noise(_rng(seed), (1, n))).data[0]
    achieved = _descriptor_frames(dmap.descriptor, out, model)
    return DescriptorSynthesis(out, indices, targets, achieved)


def parse_ramp(spec: str) -> np.ndarray:
    """'start:end:steps' -> linearly spaced targets."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"ramp must be start:end:steps, got {spec!r}")
    try:
        start, end, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ValueError(f"ramp must be start:end:steps, got {spec!r}") from None
    if steps < 1:
        raise ValueError(f"ramp needs at least one step, got {steps}")
    return np.linspace(start, end, steps)


def read_targets_csv(path) -> np.ndarray:
    """Targets from a CSV with a 'target' column, or the first column otherwise."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: no targets")
    header = rows[0]
    try:
        float(header[0])
        col, body = 0, rows
    except ValueError:
        col = header.index("target") if "target" in header else 0
        body = rows[1:]
    return np.array([float(r[col]) for r in body if r])


def write_synthesis_csv(path, result: DescriptorSynthesis) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "code_index", "target", "achieved"])
        for i, (k, t, a) in enumerate(zip(result.indices, result.targets, result.achieved)):
            writer.writerow([i, int(k), repr(float(t)), repr(float(a))])
