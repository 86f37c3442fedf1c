import numpy as np
import pytest
from scipy.stats import spearmanr

from vqtimbre import dsp, evalharness as ev
from vqtimbre.evalharness import ClassifierConfig, EvalReport, EvalRow
from vqtimbre.transfer import TransferResult

SR = 22050


@pytest.fixture(scope="module")
def corpus():
    return ev.synth_corpus(3, 8.0, seed=5)


@pytest.fixture(scope="module")
def quick_cfg():
    return ClassifierConfig(epochs=12, augment_steps=3, seed=1)


@pytest.fixture(scope="module")
def classifier(corpus, quick_cfg):
    half = [w[: w.size // 2] for w in corpus.audio]
    rest = [w[w.size // 2:] for w in corpus.audio]
    return ev.train_classifier(half, rest, quick_cfg)


def pass_through(w, model, seed=0, silence_db=None):
    """Analysis followed by unit-filter overlap-add: an identity decoder."""
    basis = dsp.make_basis(512, 128)
    frames = dsp.fourier_frames(np.asarray(w)[None, :], basis)
    out = dsp.overlap_add(frames, basis).data[0]
    return TransferResult(out, None, np.ones(1))


class TestSynthCorpus:
    def test_seeded(self, corpus):
        again = ev.synth_corpus(3, 8.0, seed=5)
        for a, b in zip(corpus.audio, again.audio):
            assert np.array_equal(a, b)

    def test_seed_changes_audio(self, corpus):
        other = ev.synth_corpus(3, 8.0, seed=6)
        assert not np.array_equal(corpus.audio[0], other.audio[0])

    def test_lengths_and_peaks(self, corpus):
        assert corpus.names == ["reed", "brass", "breath"]
        for w in corpus.audio:
            assert w.size == 8 * SR
            assert 0 < np.max(np.abs(w)) <= 1.0

    def test_centroids_separated(self, corpus):
        cents = sorted(ev.long_term_centroid(w) for w in corpus.audio)
        assert np.min(np.diff(cents)) > 500

    def test_pitched_classes_are_voiced(self, corpus):
        for w in corpus.audio[:2]:
            f0 = dsp.f0_track(w)
            assert np.mean(np.isfinite(f0)) > 0.5

    @pytest.mark.parametrize("classes", [0, 4])
    def test_class_count_checked(self, classes):
        with pytest.raises(ValueError):
            ev.synth_corpus(classes, 1.0)


class TestBandNoise:
    @pytest.mark.parametrize("shape", ["band", "lowpass"])
    def test_centroid_follows_frequency_path(self, shape):
        w, freq = ev.band_noise(10.0, seed=1, shape=shape)
        cent = dsp.spectral_centroid(w)
        n = min(cent.size, freq.size)
        ok = np.isfinite(cent[:n])
        assert spearmanr(cent[:n][ok], freq[:n][ok]).statistic > 0.9
        assert w.size == 10 * SR and np.max(np.abs(w)) == pytest.approx(0.9)

    def test_path_stays_in_range(self):
        _, freq = ev.band_noise(10.0, low=500, high=2000, seed=2)
        assert freq.min() >= 500 - 1e-9 and freq.max() <= 2000 + 1e-9

    def test_seeded(self):
        assert np.array_equal(ev.band_noise(2.0, seed=3)[0], ev.band_noise(2.0, seed=3)[0])

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            ev.band_noise(1.0, shape="comb")


class TestFeatures:
    def test_shape(self):
        cfg = ClassifierConfig()
        feats = ev.frame_features(np.random.default_rng(0).standard_normal(3 * 4096 + 100), cfg)
        assert feats.shape == (3, cfg.bins)

    def test_gain_invariant(self):
        cfg = ClassifierConfig()
        w = np.random.default_rng(0).standard_normal(2 * 4096)
        np.testing.assert_allclose(ev.frame_features(w, cfg), ev.frame_features(0.1 * w, cfg), atol=1e-3)

    def test_pitch_shift_moves_frequency(self):
        t = np.arange(SR) / SR
        shifted = ev.pitch_shift(np.sin(2 * np.pi * 440 * t), 12.0)
        spec = np.abs(np.fft.rfft(shifted * np.hanning(shifted.size)))
        peak = np.argmax(spec) * SR / shifted.size
        assert peak == pytest.approx(880, abs=3)

    def test_augmentation_changes_checksum(self, corpus, quick_cfg):
        plain = ev.training_set(corpus.audio, quick_cfg, augment=False)
        aug = ev.training_set(corpus.audio, quick_cfg, augment=True)
        assert ev.dataset_checksum(*plain) != ev.dataset_checksum(*aug)
        assert aug[0].shape[0] > plain[0].shape[0]

    def test_silent_frames_dropped(self, quick_cfg):
        w = np.concatenate([np.zeros(4096), 0.5 * np.ones(4096)])
        feats, labels = ev.training_set([w, w], quick_cfg, augment=False)
        assert feats.shape[0] == 2 and list(labels) == [0, 1]


class TestClassifier:
    def test_probabilities_sum_to_one(self, classifier, corpus):
        clf, _ = classifier
        proba = clf.predict_proba(corpus.audio[2])
        assert proba.shape[1] == 3
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)

    def test_learns_something(self, classifier):
        _, report = classifier
        assert report.accuracy > 0.6 and not report.degenerate
        assert len(report.per_class) == 3

    def test_deterministic(self, classifier, corpus, quick_cfg):
        half = [w[: w.size // 2] for w in corpus.audio]
        rest = [w[w.size // 2:] for w in corpus.audio]
        _, again = ev.train_classifier(half, rest, quick_cfg)
        assert again.accuracy == classifier[1].accuracy
        assert again.train_checksum == classifier[1].train_checksum

    def test_needs_two_classes(self, corpus):
        with pytest.raises(ValueError):
            ev.train_classifier(corpus.audio[:1], corpus.audio[:1])

    def test_degenerate_flagged(self, quick_cfg):
        rng = np.random.default_rng(0)
        same = 0.3 * rng.standard_normal(6 * 4096)
        cfg = ClassifierConfig(epochs=1, augment_steps=1, seed=0)
        with pytest.warns(UserWarning, match="single label"):
            _, report = ev.train_classifier([same, same.copy()], [same, same.copy()], cfg, augment=False)
        assert report.degenerate


class TestReport:
    def make(self):
        return EvalReport("vq-vae", [EvalRow("reed", 0.5, 0.1, 0.2, 10.0, 30),
                                     EvalRow("brass", 1.0, float("nan"), 0.4, 12.0, 20)])

    def test_average_skips_nan(self):
        avg = self.make().average()
        assert avg.accuracy == 0.75 and avg.dtw_f0 == pytest.approx(0.1) and avg.frames == 50

    def test_csv_round_trip(self, tmp_path):
        report = self.make()
        report.to_csv(tmp_path / "r.csv")
        back = EvalReport.from_csv(tmp_path / "r.csv")
        assert back.model == "vq-vae" and len(back.rows) == 2
        for a, b in zip(report.rows, back.rows):
            np.testing.assert_equal(list(vars(a).values()), list(vars(b).values()))

    def test_table_layout(self):
        lines = self.make().to_table().splitlines()
        assert lines[0] == "[vq-vae]"
        assert lines[1].split() == ["target", "accuracy", "DTW", "f0", "DTW", "loud", "LSD"]
        assert lines[-1].startswith("average")


class TestEvaluate:
    def test_pass_through_has_zero_loudness_distance(self, classifier, corpus, monkeypatch):
        monkeypatch.setattr(ev, "transfer", pass_through)
        clf, _ = classifier
        model = type("Stub", (), {"config": type("C", (), {"sample_rate": SR})()})()
        sources = {"reed": corpus.audio[0][: 3 * SR], "brass": corpus.audio[1][: 3 * SR]}
        row = ev.evaluate(model, sources, clf, 2, corpus.audio[2][: 3 * SR], "breath")
        # only the unreconstructed edge frames differ
        assert row.dtw_loudness < 1e-3
        assert row.dtw_f0 < 1e-3
        assert row.lsd < 0.05
        assert 0 <= row.accuracy <= 1 and row.frames > 0

    def test_identity_transfer_lsd_matches_reconstruction(self, classifier, corpus):
        from vqtimbre.model import ModelConfig, TimbreModel

        clf, _ = classifier
        model = TimbreModel(ModelConfig.toy(), 0)
        target = corpus.audio[0][: 2 * SR]
        row = ev.evaluate(model, {"brass": corpus.audio[1][: 2 * SR]}, clf, 0, target, "reed", seed=4)
        assert row.lsd == ev.reconstruction_lsd(model, target, seed=4)
