"""Synthetic timbre corpus, frame classifier and the transfer evaluation table."""
from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np
from scipy.signal import istft, resample_poly, stft

from . import dsp
from . import tensor as T
from .transfer import transfer

SAMPLE_RATE = 22050
SYNTH_FRAME = 2048
SYNTH_HOP = 512
RESONANCE_WIDTH = 0.04

# -- synthetic corpus ------------------------------------------------------------------
# Each class pairs an excitation with a fixed spectral envelope so the classes
# differ in long-term spectrum while pitch and loudness vary freely.  Pitched
# classes are noise-excited harmonic resonances rather than pure sinusoids: the
# noise-filtering decoder can match a stochastic partial but not a line.


def _reed_envelope(f):
    return 1.0 / np.sqrt(1.0 + (f / 700.0) ** 4)


def _brass_envelope(f):
    octaves = np.log2(np.maximum(f, 1.0) / 1800.0)
    return np.exp(-0.5 * (octaves / 0.6) ** 2) + 0.03


def _breath_envelope(f):
    return (np.exp(-0.5 * ((f - 4500.0) / 1200.0) ** 2)
            + 0.6 * np.exp(-0.5 * ((f - 7500.0) / 900.0) ** 2) + 0.02)


@dataclass(frozen=True)
class ClassRecipe:
    name: str
    excitation: str  # "saw" (all partials), "square" (odd partials) or "noise"
    envelope: object
    pitch_range: tuple[float, float]


RECIPES = (
    ClassRecipe("reed", "saw", _reed_envelope, (110.0, 330.0)),
    ClassRecipe("brass", "square", _brass_envelope, (150.0, 440.0)),
    ClassRecipe("breath", "noise", _breath_envelope, (200.0, 600.0)),
)


@dataclass
class SynthCorpus:
    names: list[str]
    audio: list[np.ndarray]
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def __len__(self) -> int:
        return len(self.names)


def _resonant_note(f0: np.ndarray, recipe: ClassRecipe, rng: np.random.Generator, sr: int) -> np.ndarray:
    """Noise excitation shaped by a harmonic comb at f0 and the class envelope.

    Each partial k*f0 is a narrow Gaussian band (width RESONANCE_WIDTH * f0)
    weighted 1/k; the square-like family keeps odd partials only.  The comb
    follows the f0 trajectory frame by frame on a 2048/512 STFT grid.
    """
    n = f0.size
    _, _, spec = stft(rng.standard_normal(n), fs=sr, nperseg=SYNTH_FRAME, noverlap=SYNTH_FRAME - SYNTH_HOP)
    freqs = np.fft.rfftfreq(SYNTH_FRAME, 1.0 / sr)
    centres = np.clip(np.arange(spec.shape[1]) * SYNTH_HOP, 0, n - 1)
    mask = np.zeros(spec.shape)
    top = sr / 2 - 500.0
    for j, fc in enumerate(f0[centres]):
        ks = np.arange(1, int(top // fc) + 1)
        if recipe.excitation == "square":
            ks = ks[ks % 2 == 1]
        width = RESONANCE_WIDTH * fc
        comb = (np.exp(-0.5 * ((freqs[:, None] - ks * fc) / width) ** 2) / ks).sum(axis=1)
        mask[:, j] = comb * recipe.envelope(freqs)
    _, out = istft(spec * mask, fs=sr, nperseg=SYNTH_FRAME, noverlap=SYNTH_FRAME - SYNTH_HOP)
    return out[:n]


def _shaped_noise(n: int, envelope, rng: np.random.Generator, sr: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    spec *= envelope(np.fft.rfftfreq(n, 1.0 / sr))
    return np.fft.irfft(spec, n)


def render_class(recipe: ClassRecipe, seconds: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """A sequence of notes with random pitch, vibrato, dynamics and short rests."""
    total = int(round(seconds * sr))
    pieces, filled = [], 0
    lo, hi = recipe.pitch_range
    while filled < total:
        n = int(rng.uniform(0.4, 1.2) * sr)
        t = np.arange(n) / sr
        base = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        vib = rng.uniform(0.0, 0.4) * np.sin(2 * np.pi * rng.uniform(4.0, 6.5) * t + rng.uniform(0, 2 * np.pi))
        glide = rng.uniform(-1.0, 1.0) * t / t[-1]
        f0 = base * 2.0 ** ((vib + glide) / 12.0)
        if recipe.excitation == "noise":
            note = _shaped_noise(n, recipe.envelope, rng, sr)
        else:
            note = _resonant_note(f0, recipe, rng, sr)
        note /= np.max(np.abs(note)) + 1e-12
        attack, release = int(rng.uniform(0.02, 0.08) * sr), int(rng.uniform(0.08, 0.2) * sr)
        env = np.ones(n)
        env[:attack] = np.linspace(0, 1, attack)
        env[n - release:] = np.linspace(1, 0, release)
        gain = 10 ** (rng.uniform(-18.0, 0.0) / 20)
        pieces.append(note * env * gain)
        pieces.append(np.zeros(int(rng.uniform(0.0, 0.1) * sr)))
        filled += n + pieces[-1].size
    w = np.concatenate(pieces)[:total]
    return 0.9 * w / np.max(np.abs(w))


def synth_corpus(classes: int = 3, seconds_per_class: float = 20.0, seed: int = 0,
                 sample_rate: int = SAMPLE_RATE) -> SynthCorpus:
    if not 1 <= classes <= len(RECIPES):
        raise ValueError(f"between 1 and {len(RECIPES)} classes are available, got {classes}")
    rng = np.random.default_rng(seed)
    audio = [render_class(RECIPES[c], seconds_per_class, rng, sample_rate) for c in range(classes)]
    return SynthCorpus([RECIPES[c].name for c in range(classes)], audio, sample_rate, seed)


def band_noise(seconds: float, low: float = 400.0, high: float = 5000.0, seed: int = 0,
               bandwidth: float = 0.15, shape: str = "band",
               sample_rate: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray]:
    """Band-limited noise whose centre (or cutoff) wanders log-uniformly over [low, high].

    The frequency follows a smooth random path (new target every 0.5 s,
    glided in log frequency).  ``shape="band"`` gives a Gaussian band of
    width ``bandwidth`` times the centre; ``shape="lowpass"`` gives a
    fourth-order low-pass magnitude with that cutoff.  Returns the waveform
    and the per-STFT-frame frequency.
    """
    if shape not in ("band", "lowpass"):
        raise ValueError(f"shape must be 'band' or 'lowpass', got {shape!r}")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    _, _, spec = stft(rng.standard_normal(n), fs=sample_rate, nperseg=SYNTH_FRAME,
                      noverlap=SYNTH_FRAME - SYNTH_HOP)
    freqs = np.fft.rfftfreq(SYNTH_FRAME, 1.0 / sample_rate)
    frames = spec.shape[1]
    knot_every = max(1, int(0.5 * sample_rate / SYNTH_HOP))
    knots = rng.uniform(math.log(low), math.log(high), size=frames // knot_every + 2)
    centre = np.exp(np.interp(np.arange(frames), np.arange(knots.size) * knot_every, knots))
    if shape == "band":
        mask = np.exp(-0.5 * ((freqs[:, None] - centre[None, :]) / (bandwidth * centre[None, :])) ** 2)
    else:
        mask = 1.0 / np.sqrt(1.0 + (freqs[:, None] / centre[None, :]) ** 8)
    _, out = istft(spec * mask, fs=sample_rate, nperseg=SYNTH_FRAME, noverlap=SYNTH_FRAME - SYNTH_HOP)
    out = out[:n]
    return 0.9 * out / np.max(np.abs(out)), centre


def long_term_centroid(w: np.ndarray, sample_rate: int = SAMPLE_RATE) -> float:
    """Centroid of the average magnitude spectrum over non-silent frames."""
    frames = dsp.hann_slice(np.asarray(w, dtype=np.float64), 2048, 512)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    mags = np.abs(np.fft.rfft(frames[rms > 1e-3], axis=1)).mean(axis=0)
    freqs = np.fft.rfftfreq(2048, 1.0 / sample_rate)
    return float((mags * freqs).sum() / mags.sum())


# -- frame classifier -------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    frame: int = 4096
    pool: int = 4
    channels: tuple[int, ...] = (8, 16, 16, 16)
    kernel: int = 9
    epochs: int = 25
    batch: int = 32
    lr: float = 2e-3
    augment_semitones: float = 2.0
    augment_steps: int = 5
    seed: int = 0

    @property
    def bins(self) -> int:
        return (self.frame // 2) // self.pool


def frame_features(w: np.ndarray, cfg: ClassifierConfig) -> np.ndarray:
    """Per-frame log-magnitude spectra of non-overlapping frames, mean-removed.

    Bins are averaged in groups of ``cfg.pool``; subtracting the per-frame
    mean makes the features independent of overall level.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.size // cfg.frame
    if n == 0:
        return np.zeros((0, cfg.bins))
    frames = w[:n * cfg.frame].reshape(n, cfg.frame) * np.hanning(cfg.frame)
    mag = np.abs(np.fft.rfft(frames, axis=1))[:, :cfg.bins * cfg.pool]
    mag = mag.reshape(n, cfg.bins, cfg.pool).mean(axis=2)
    logmag = np.log10(mag + 1e-6)
    return logmag - logmag.mean(axis=1, keepdims=True)


def frame_levels(w: np.ndarray, frame: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    n = w.size // frame
    rms = np.sqrt(np.mean(w[:n * frame].reshape(n, frame) ** 2, axis=1))
    with np.errstate(divide="ignore"):
        return 20 * np.log10(rms)


def pitch_shift(w: np.ndarray, semitones: float) -> np.ndarray:
    """Resampling pitch shift (duration changes with pitch)."""
    if semitones == 0:
        return np.asarray(w, dtype=np.float64)
    ratio = Fraction(2 ** (-semitones / 12)).limit_denominator(200)
    return resample_poly(w, ratio.numerator, ratio.denominator)


def training_set(audio: list[np.ndarray], cfg: ClassifierConfig, augment: bool = True,
                 min_db: float = -60.0) -> tuple[np.ndarray, np.ndarray]:
    """(features, labels) over non-silent frames, optionally pitch-augmented."""
    shifts = np.linspace(-cfg.augment_semitones, cfg.augment_semitones, cfg.augment_steps) if augment else [0.0]
    feats, labels = [], []
    for label, w in enumerate(audio):
        for s in shifts:
            shifted = pitch_shift(w, float(s))
            keep = frame_levels(shifted, cfg.frame) > min_db
            f = frame_features(shifted, cfg)[keep]
            feats.append(f)
            labels.append(np.full(f.shape[0], label))
    return np.concatenate(feats), np.concatenate(labels)


def dataset_checksum(features: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(features, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


class FrameClassifier:
    """Conv stack over [log-spectrum, frequency-coordinate] channels, global mean pool, softmax."""

    def __init__(self, classes: int, cfg: ClassifierConfig | None = None):
        if classes < 2:
            raise ValueError(f"a classifier needs at least 2 classes, got {classes}")
        self.cfg = cfg or ClassifierConfig()
        self.classes = classes
        rng = np.random.default_rng(self.cfg.seed)
        self.params: dict[str, T.Tensor] = {}
        c_prev = 2
        for i, c in enumerate(self.cfg.channels):
            fan_in = c_prev * self.cfg.kernel
            self.params[f"conv{i}.w"] = T.parameter(T.kaiming_uniform(rng, (c, c_prev, self.cfg.kernel), fan_in, 0.0))
            self.params[f"conv{i}.b"] = T.parameter(np.zeros(c))
            c_prev = c
        self.params["out.w"] = T.parameter(T.fan_in_uniform(rng, (classes, c_prev), c_prev))
        self.params["out.b"] = T.parameter(np.zeros(classes))
        self._coord = np.linspace(-1.0, 1.0, self.cfg.bins)

    def logits(self, features) -> T.Tensor:
        x = np.asarray(features, dtype=np.float64)
        inp = np.stack([x, np.broadcast_to(self._coord, x.shape)], axis=-1)  # [B, bins, 2]
        h = T.Tensor(inp)
        for i in range(len(self.cfg.channels)):
            h = T.relu(T.conv1d_nlc(h, self.params[f"conv{i}.w"], stride=2, padding=self.cfg.kernel // 2,
                                    bias=self.params[f"conv{i}.b"]))
        pooled = T.mean(h, axis=1)
        return T.linear(pooled, self.params["out.w"], self.params["out.b"])

    def predict_proba_features(self, features: np.ndarray) -> np.ndarray:
        if features.shape[0] == 0:
            return np.zeros((0, self.classes))
        with T.no_grad():
            return T.softmax_array(self.logits(features).data, axis=-1)

    def predict_proba(self, w: np.ndarray) -> np.ndarray:
        """Class probabilities for every non-overlapping frame of ``w``."""
        return self.predict_proba_features(frame_features(w, self.cfg))

    def predict(self, w: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(w), axis=-1)

    def fit(self, features: np.ndarray, labels: np.ndarray) -> list[float]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed + 1)
        opt = T.Adam(self.params, lr=cfg.lr)
        losses = []
        for _ in range(cfg.epochs):
            order = rng.permutation(labels.size)
            total = 0.0
            for s in range(0, order.size, cfg.batch):
                idx = order[s:s + cfg.batch]
                loss = T.cross_entropy(self.logits(features[idx]), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * idx.size
            losses.append(total / labels.size)
        return losses


@dataclass
class ClassifierReport:
    accuracy: float
    per_class: list[float]
    frames: int
    degenerate: bool
    train_checksum: str


def frame_accuracy(clf: FrameClassifier, audio: list[np.ndarray], min_db: float = -60.0) -> tuple[float, list[float], int]:
    feats, labels = training_set(audio, clf.cfg, augment=False, min_db=min_db)
    pred = np.argmax(clf.predict_proba_features(feats), axis=-1)
    per_class = [float(np.mean(pred[labels == c] == c)) if np.any(labels == c) else float("nan")
                 for c in range(clf.classes)]
    return float(np.mean(pred == labels)), per_class, int(labels.size)


def train_classifier(train_audio: list[np.ndarray], test_audio: list[np.ndarray],
                     cfg: ClassifierConfig | None = None, augment: bool = True) -> tuple[FrameClassifier, ClassifierReport]:
    """Fit on ``train_audio`` (one waveform per class) and score held-out frames."""
    if len(train_audio) < 2:
        raise ValueError(f"a classifier needs at least 2 classes, got {len(train_audio)}")
    cfg = cfg or ClassifierConfig()
    feats, labels = training_set(train_audio, cfg, augment)
    clf = FrameClassifier(len(train_audio), cfg)
    clf.fit(feats, labels)
    acc, per_class, frames = frame_accuracy(clf, test_audio)
    pred = np.argmax(clf.predict_proba_features(training_set(test_audio, cfg, False)[0]), axis=-1)
    degenerate = np.unique(pred).size <= 1
    if degenerate:
        warnings.warn(f"classifier predicts a single label on held-out frames (accuracy {acc:.3f} ~ 1/C)")
    return clf, ClassifierReport(acc, per_class, frames, bool(degenerate), dataset_checksum(feats, labels))


# -- evaluation --------------------------------------------------------------------------------


@dataclass
class EvalRow:
    domain: str
    accuracy: float
    dtw_f0: float
    dtw_loudness: float
    lsd: float
    frames: int = 0


@dataclass
class EvalReport:
    model: str
    rows: list[EvalRow] = field(default_factory=list)

    def average(self) -> EvalRow:
        def avg(name):
            vals = np.array([getattr(r, name) for r in self.rows], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            return float(vals.mean()) if vals.size else float("nan")

        return EvalRow("average", avg("accuracy"), avg("dtw_f0"), avg("dtw_loudness"), avg("lsd"),
                       sum(r.frames for r in self.rows))

    def to_csv(self, path) -> None:
        cols = [f.name for f in fields(EvalRow)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", *cols])
            for r in [*self.rows, self.average()]:
                writer.writerow([self.model, *(repr(v) if isinstance(v, float) else v for v in asdict(r).values())])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        report = cls(rows[0]["model"] if rows else "")
        for r in rows:
            if r["domain"] == "average":
                continue
            report.rows.append(EvalRow(r["domain"], float(r["accuracy"]), float(r["dtw_f0"]),
                                       float(r["dtw_loudness"]), float(r["lsd"]), int(r["frames"])))
        return report

    def to_table(self) -> str:
        head = f"{'target':<10} {'accuracy':>9} {'DTW f0':>9} {'DTW loud':>9} {'LSD':>9}"
        lines = [f"[{self.model}]", head, "-" * len(head)]
        for r in [*self.rows, self.average()]:
            lines.append(f"{r.domain:<10} {r.accuracy:>9.4f} {r.dtw_f0:>9.4f} {r.dtw_loudness:>9.4f} {r.lsd:>9.4f}")
        return "\n".join(lines)


def curve_distances(source: np.ndarray, output: np.ndarray, sample_rate: int = SAMPLE_RATE) -> tuple[float, float]:
    """DTW distances between source and output f0 curves and loudness curves.

    f0 frames unvoiced in either signal are dropped before alignment; with
    fewer than two shared voiced frames the f0 distance is NaN.
    """
    n = min(source.size, output.size)
    src, out = source[:n], output[:n]
    loud = dsp.dtw(dsp.loudness_curve(src), dsp.loudness_curve(out)).distance
    fa, fb = dsp.f0_track(src, sample_rate), dsp.f0_track(out, sample_rate)
    both = np.isfinite(fa) & np.isfinite(fb)
    f0 = dsp.dtw(fa[both], fb[both]).distance if both.sum() >= 2 else float("nan")
    return f0, loud


def reconstruction_lsd(model, w: np.ndarray, seed: int = 0) -> float:
    out = transfer(w, model, seed=seed, silence_db=None).waveform
    return dsp.lsd(w[:out.size], out)


def evaluate(model, sources: dict[str, np.ndarray], classifier: FrameClassifier, target_class: int,
             target_test: np.ndarray, target_name: str = "", seed: int = 0, min_db: float = -60.0) -> EvalRow:
    """One Table-1 row: transfer every non-target source into ``model``'s domain.

    Accuracy is frame-level: the share of non-silent source frames whose
    transferred output is classified as ``target_class``.
    """
    hits = frames = 0
    f0s, louds = [], []
    for i, (name, w) in enumerate(sources.items()):
        out = transfer(w, model, seed=seed + i).waveform
        levels = frame_levels(w[:out.size], classifier.cfg.frame)
        pred = classifier.predict(out)[:levels.size]
        keep = levels[:pred.size] > min_db
        hits += int(np.sum(pred[keep] == target_class))
        frames += int(keep.sum())
        f0, loud = curve_distances(w, out, model.config.sample_rate)
        f0s.append(f0)
        louds.append(loud)
    acc = hits / frames if frames else float("nan")
    mean = lambda xs: float(np.nanmean(xs)) if np.any(np.isfinite(xs)) else float("nan")
    return EvalRow(target_name or str(target_class), acc, mean(f0s), mean(louds),
                   reconstruction_lsd(model, target_test, seed), frames)



def transfer_report(label: str, models: list, names: list[str], test_audio: list[np.ndarray],
                    classifier: FrameClassifier, seed: int = 0) -> EvalReport:
    """Evaluate one model per class, feeding it the other classes' held-out audio."""
    if not len(models) == len(names) == len(test_audio):
        raise ValueError("need one model and one test waveform per class")
    rows = []
    for c, model in enumerate(models):
        sources = {names[j]: test_audio[j] for j in range(len(names)) if j != c}
        rows.append(evaluate(model, sources, classifier, c, test_audio[c], names[c], seed))
    return EvalReport(label, rows)


@dataclass
class BenchmarkResult:
    vq: EvalReport
    baseline: EvalReport
    classifier: ClassifierReport
    histories: dict[str, list[dict]]


def transfer_benchmark(train_cfg, model_cfg=None, seconds_per_class: float = 20.0, seed: int = 0,
                       split_frac: float = 0.15, classifier_cfg: ClassifierConfig | None = None,
                       log=None) -> BenchmarkResult:
    """Train a VQ model and a baseline per synthetic class, then compare transfer.

    Both model kinds share the corpus, initial seed, step budget and
    classifier, so the reports differ only in the bottleneck.
    """
    from . import trainer
    from .model import ModelConfig, TimbreModel

    model_cfg = model_cfg or ModelConfig.toy()
    synth = synth_corpus(len(RECIPES), seconds_per_class, seed)
    splits = [trainer.build_corpus([(n, w)], split_frac, seed) for n, w in zip(synth.names, synth.audio)]
    tests = [s.test for s in splits]
    clf, clf_report = train_classifier([s.train for s in splits], tests,
                                       classifier_cfg or ClassifierConfig(seed=seed))
    if log:
        log(f"classifier accuracy {clf_report.accuracy:.4f}")
    models = {"vq-vae": [], "baseline": []}
    histories = {}
    for label, cfg in (("vq-vae", model_cfg), ("baseline", model_cfg.baseline())):
        for name, split in zip(synth.names, splits):
            model = TimbreModel(cfg, seed)
            histories[f"{label}/{name}"] = trainer.train(model, split, train_cfg).history
            models[label].append(model)
            if log:
                last = histories[f"{label}/{name}"][-50:]
                log(f"{label}/{name}: final stft {np.mean([r['stft'] for r in last]):.4f}")
    reports = {label: transfer_report(label, ms, synth.names, tests, clf, seed) for label, ms in models.items()}
    return BenchmarkResult(reports["vq-vae"], reports["baseline"], clf_report, histories)
