"""Corpus preparation, batch sampling and the training loop."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import audio, checkpoint
from . import tensor as T
from .model import NonFiniteLoss, TimbreModel

log = logging.getLogger(__name__)

TRIM_FRAME = 1024
TRIM_DB = -60.0
LOG_COLUMNS = ("iter", "total", "stft", "percep", "codebook", "commit", "codes_used")


class CorpusError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """Raised after the emergency checkpoint has been written."""


@dataclass
class Corpus:
    train: np.ndarray
    test: np.ndarray
    sample_rate: int = audio.SAMPLE_RATE
    sources: list[str] = field(default_factory=list)
    test_sources: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def seconds(self) -> tuple[float, float]:
        return self.train.size / self.sample_rate, self.test.size / self.sample_rate


@dataclass
class TrainConfig:
    segment_seconds: float = 1.5
    batch: int = 20
    iters: int = 150_000
    lr: float = 2e-4
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.batch < 1 or self.iters < 0 or self.checkpoint_every < 1:
            raise ValueError("batch and checkpoint_every must be >= 1 and iters >= 0")
        if self.segment_seconds <= 0 or self.lr <= 0:
            raise ValueError("segment_seconds and lr must be positive")

    def segment_samples(self, sample_rate: int = audio.SAMPLE_RATE) -> int:
        return int(round(self.segment_seconds * sample_rate))


def trim_silence(w: np.ndarray, threshold_db: float = TRIM_DB, frame: int = TRIM_FRAME) -> np.ndarray:
    """Drop every ``frame``-sample block whose RMS is below ``threshold_db``."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        return w
    pad = (-w.size) % frame
    blocks = np.pad(w, (0, pad)).reshape(-1, frame)
    # the zero padding must not pull the last partial block under the threshold
    counts = np.full(blocks.shape[0], frame)
    counts[-1] = frame - pad
    rms = np.sqrt((blocks ** 2).sum(axis=1) / counts)
    with np.errstate(divide="ignore"):
        keep = 20 * np.log10(rms) >= threshold_db
    kept = [blocks[i, :counts[i]] for i in np.nonzero(keep)[0]]
    return np.concatenate(kept) if kept else np.zeros(0)


def _load_source(src, sample_rate: int) -> tuple[str, np.ndarray]:
    if isinstance(src, tuple):
        name, arr = src
        return str(name), np.asarray(arr, dtype=np.float64)
    if isinstance(src, np.ndarray):
        return "<array>", np.asarray(src, dtype=np.float64)
    w, _ = audio.read_wav(src, sample_rate)
    return str(src), w


def build_corpus(sources, split_frac: float = 0.15, seed: int = 0, threshold_db: float = TRIM_DB,
                 sample_rate: int = audio.SAMPLE_RATE) -> Corpus:
    """Load, trim and split audio into train/test.

    ``sources`` holds WAV paths, arrays, or (name, array) pairs.  With several
    sources whole files go to the test split (in a seeded order) until it
    holds about ``split_frac`` of the audio; a single source is split by time,
    its last ``split_frac`` becoming the test set.
    """
    if not 0 <= split_frac < 1:
        raise ValueError(f"split_frac must be in [0, 1), got {split_frac}")
    if isinstance(sources, (np.ndarray, tuple, str, Path)):
        sources = [sources]
    loaded, skipped = [], []
    for src in sources:
        try:
            name, w = _load_source(src, sample_rate)
        except (OSError, audio.WavError) as exc:
            warnings.warn(f"skipping unreadable source {src}: {exc}")
            skipped.append(str(src))
            continue
        trimmed = trim_silence(w, threshold_db)
        if trimmed.size == 0:
            warnings.warn(f"skipping {name}: empty after silence trimming")
            skipped.append(name)
            continue
        loaded.append((name, trimmed))
    if not loaded:
        raise CorpusError("corpus is empty after loading and trimming")
    if len(loaded) == 1:
        name, w = loaded[0]
        cut = w.size - int(round(split_frac * w.size))
        return Corpus(w[:cut], w[cut:], sample_rate, [name], [name] if cut < w.size else [], skipped)
    order = np.random.default_rng(seed).permutation(len(loaded))
    total = sum(w.size for _, w in loaded)
    test_idx, test_len = [], 0
    for i in order:
        if test_len >= split_frac * total:
            break
        size = loaded[i][1].size
        # stop if adding this file overshoots by more than leaving it out undershoots
        if test_len and test_len + size - split_frac * total > split_frac * total - test_len:
            break
        test_idx.append(i)
        test_len += size
    test_set = set(test_idx)
    train = [w for i, (_, w) in enumerate(loaded) if i not in test_set]
    test = [loaded[i][1] for i in sorted(test_set)]
    if not train:
        raise CorpusError("test split consumed every source; add files or lower split_frac")
    return Corpus(np.concatenate(train), np.concatenate(test) if test else np.zeros(0), sample_rate,
                  [n for i, (n, _) in enumerate(loaded) if i not in test_set],
                  [loaded[i][0] for i in sorted(test_set)], skipped)


def sample_batch(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """``cfg.batch`` training segments from uniformly random offsets."""
    seg = cfg.segment_samples(corpus.sample_rate)
    if corpus.train.size < seg:
        raise CorpusError(f"training audio ({corpus.train.size} samples) shorter than one segment ({seg})")
    starts = rng.integers(0, corpus.train.size - seg + 1, size=cfg.batch)
    return np.stack([corpus.train[s:s + seg] for s in starts])


@dataclass
class TrainResult:
    history: list[dict]
    final_checkpoint: Path | None
    step: int


def train(model: TimbreModel, corpus: Corpus, cfg: TrainConfig, out_dir=None, resume=None,
          percep=None, callback=None, stop=None, extra: dict | None = None) -> TrainResult:
    """Optimise ``model`` for ``cfg.iters`` steps (continuing from ``resume``).

    Step ``i`` draws its batch and noise from ``default_rng([seed, i])`` so a
    resumed run retraces an uninterrupted one exactly.  Checkpoints written
    during training keep 64-bit floats for that reason.  ``stop(row)`` may
    return True to end early; ``extra`` is stored in every checkpoint's metadata.
    """
    opt = T.Adam(model.params, lr=cfg.lr)
    start = 0
    if resume is not None:
        loaded, meta, arrays = checkpoint.load_model(resume)
        model.load_state_arrays(loaded.state_arrays())
        if model.codebook is not None and loaded.codebook is not None:
            model.codebook.usage_counts[:] = loaded.codebook.usage_counts
        checkpoint.restore_optimizer(opt, meta, arrays)
        start = int(meta["step"])
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        log_path = out / "logs" / "train_log.csv"
        if resume is not None and log_path.exists():
            kept = [r for r in csv.DictReader(open(log_path, newline="")) if int(r["iter"]) < start]
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(kept)
        else:
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
    extra = {**(extra or {}), "train": asdict(cfg)}
    history: list[dict] = []
    step = start
    try:
        while step < cfg.iters:
            rng = np.random.default_rng([cfg.seed, step])
            batch = sample_batch(corpus, cfg, rng)
            try:
                result = model.forward(batch, rng)
                obj = model.objective(batch, result, percep)
                opt.zero_grad()
                obj.total.backward()
                opt.step()
            except (NonFiniteLoss, T.NonFiniteGradient) as exc:
                if out is not None:
                    checkpoint.save_model(out / "checkpoints" / "emergency.ckpt", model, opt, step, extra, "<f8")
                raise TrainingDiverged(f"step {step}: {exc}") from exc
            codes = 0 if result.indices is None else int(np.unique(result.indices).size)
            row = {"iter": step, **{k: obj.components[k] for k in LOG_COLUMNS[1:6]}, "codes_used": codes}
            history.append(row)
            if writer is not None:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            step += 1
            if callback is not None:
                callback(row)
            if out is not None and step % cfg.checkpoint_every == 0:
                checkpoint.save_model(out / "checkpoints" / f"step_{step:07d}.ckpt", model, opt, step, extra, "<f8")
            if stop is not None and stop(row):
                break
    finally:
        if fh is not None:
            fh.close()
    final = None
    if out is not None:
        final = checkpoint.save_model(out / "checkpoints" / "final.ckpt", model, opt, step, extra, "<f8")
    return TrainResult(history, final, step)
