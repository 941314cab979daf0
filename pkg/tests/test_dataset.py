import numpy as np
import pytest
from numpy.testing import assert_allclose

from protoeeg import dataset as ds
from protoeeg.errors import ConfigurationError, DataFormatError


@pytest.fixture(scope="module")
def small_set():
    cfg = ds.SynthConfig(n_samples=60, seed=3)
    return ds.generate_synthetic(cfg)


class TestSynthConfig:
    def test_bad_spike_rate(self):
        with pytest.raises(ConfigurationError):
            ds.SynthConfig(n_samples=10, spike_rate=1.5)

    def test_bad_widths(self):
        with pytest.raises(ConfigurationError):
            ds.SynthConfig(n_samples=10, sharp_width_ms=(70.0, 20.0))

    def test_nonpositive_n(self):
        with pytest.raises(ConfigurationError):
            ds.SynthConfig(n_samples=0)

    def test_wrong_annotator_count(self):
        with pytest.raises(ConfigurationError):
            ds.AnnotatorModel(sensitivities=(1.0, 2.0), biases=(0.1, 0.2))

    def test_roundtrip_dict(self):
        cfg = ds.SynthConfig(n_samples=5, seed=9, spike_rate=0.3)
        again = ds.SynthConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.digest() == cfg.digest()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="wavelet"):
            ds.SynthConfig.from_dict({"n_samples": 5, "wavelet": True})


class TestGenerator:
    def test_deterministic(self):
        cfg = ds.SynthConfig(n_samples=12, seed=42)
        a, ma = ds.generate_synthetic(cfg)
        b, mb = ds.generate_synthetic(cfg)
        for x, y in zip(a, b):
            assert x.votes == y.votes
            assert x.values.tobytes() == y.values.tobytes()
        assert ma.splits == mb.splits

    def test_spike_rate_zero_vote_floor(self):
        samples, _ = ds.generate_synthetic(
            ds.SynthConfig(n_samples=1000, seed=1, spike_rate=0.0))
        assert np.mean([s.votes for s in samples]) < 1.0

    def test_full_salience_saturates_votes(self):
        rng = np.random.default_rng(3)
        votes = [ds.simulate_votes(1.0, ds.AnnotatorModel(), rng) for _ in range(1000)]
        assert np.mean(votes) > 7.0

    def test_vote_monotone_in_salience(self):
        rng = np.random.default_rng(4)
        ann = ds.AnnotatorModel()
        means = []
        for s in np.linspace(0.0, 1.0, 10):
            means.append(np.mean([ds.simulate_votes(float(s), ann, rng)
                                  for _ in range(2000)]))
        diffs = np.diff(means)
        assert np.all(diffs > -0.05)  # nondecreasing up to Monte Carlo noise

    def test_sample_shapes_and_ranges(self, small_set):
        samples, manifest = small_set
        assert manifest.sample_count == 60
        for s in samples:
            assert s.values.shape == (128, 37)
            assert s.values.dtype == np.float32
            assert 0 <= s.votes <= 8

    def test_event_adds_energy(self):
        base = ds.SynthConfig(n_samples=300, seed=8, spike_rate=0.0)
        spiky = ds.SynthConfig(n_samples=300, seed=8, spike_rate=1.0)
        quiet, _ = ds.generate_synthetic(base)
        loud, _ = ds.generate_synthetic(spiky)
        q = np.mean([np.max(np.abs(s.values)) for s in quiet])
        l = np.mean([np.max(np.abs(s.values)) for s in loud])
        assert l > q


class TestHistogram:
    def test_empty(self):
        assert_allclose(ds.class_histogram([]), np.zeros(9))

    def test_single(self):
        s = ds.EEGSample(np.zeros((128, 37), np.float32), votes=8, sample_id=0)
        assert_allclose(ds.class_histogram([s]), [0, 0, 0, 0, 0, 0, 0, 0, 1])

    def test_defaults_populate_every_class(self):
        samples, _ = ds.generate_synthetic(ds.SynthConfig(n_samples=10_000, seed=5))
        hist = ds.class_histogram(samples)
        assert hist.sum() == 10_000
        assert np.all(hist > 0)


def _fake_samples(votes_list):
    return [ds.EEGSample(np.zeros((4, 37), np.float32), votes=v, sample_id=i)
            for i, v in enumerate(votes_list)]


class TestSplit:
    def test_sizes_at_10k(self):
        rng = np.random.default_rng(0)
        samples = _fake_samples(rng.integers(0, 9, size=10_000))
        man = ds.split(samples, seed=0)
        sizes = [len(man.ids_for(s)) for s in ("train", "val", "test")]
        for got, want in zip(sizes, (7300, 1200, 1500)):
            assert abs(got - want) <= 9  # +-1 per class

    def test_all_train(self):
        samples = _fake_samples([0, 1, 4, 8] * 5)
        man = ds.split(samples, fractions=(1.0, 0.0, 0.0), seed=1)
        assert len(man.ids_for("train")) == 20
        assert not man.ids_for("val") and not man.ids_for("test")

    def test_deterministic(self):
        samples = _fake_samples(list(range(9)) * 30)
        a = ds.split(samples, seed=5)
        b = ds.split(samples, seed=5)
        assert a.splits == b.splits

    def test_stratified_within_one(self):
        rng = np.random.default_rng(2)
        votes = rng.integers(0, 9, size=3000)
        samples = _fake_samples(votes)
        man = ds.split(samples, seed=3)
        for c in range(9):
            ids = [s.sample_id for s in samples if s.votes == c]
            n = len(ids)
            for frac, name in zip((0.73, 0.12, 0.15), ("train", "val", "test")):
                got = sum(1 for i in ids if man.splits[i] == name)
                assert abs(got - frac * n) <= 1

    def test_each_class_in_every_split(self):
        samples = _fake_samples([0] * 3 + [5] * 4 + [8] * 100)
        man = ds.split(samples, seed=7)
        for c, members in ((0, 3), (5, 4), (8, 100)):
            names = {man.splits[s.sample_id] for s in samples if s.votes == c}
            assert names == {"train", "val", "test"}

    def test_every_id_assigned_once(self):
        samples = _fake_samples(list(range(9)) * 10)
        man = ds.split(samples, seed=0)
        assert sorted(man.splits) == [s.sample_id for s in samples]

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            ds.split([])

    def test_bad_fractions(self):
        samples = _fake_samples([1, 2, 3])
        with pytest.raises(ConfigurationError):
            ds.split(samples, fractions=(0.5, 0.5, 0.5))


class TestStorage:
    def test_roundtrip_bit_exact(self, small_set, tmp_path):
        samples, manifest = small_set
        path = tmp_path / "d.peeg"
        ds.save(samples, manifest, path)
        loaded, man2 = ds.load(path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert a.sample_id == b.sample_id
            assert a.votes == b.votes
            assert a.values.tobytes() == b.values.tobytes()
        assert man2.splits == manifest.splits
        assert man2.config_digest == manifest.config_digest

    def test_wrong_magic(self, small_set, tmp_path):
        samples, manifest = small_set
        path = tmp_path / "d.peeg"
        ds.save(samples, manifest, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="magic"):
            ds.load(path)

    def test_truncated(self, small_set, tmp_path):
        samples, manifest = small_set
        path = tmp_path / "d.peeg"
        ds.save(samples, manifest, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(DataFormatError, match="truncat"):
            ds.load(path)

    def test_checksum_flip(self, small_set, tmp_path):
        samples, manifest = small_set
        path = tmp_path / "d.peeg"
        ds.save(samples, manifest, path)
        blob = bytearray(path.read_bytes())
        blob[40] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="checksum"):
            ds.load(path)

    def test_missing_manifest(self, small_set, tmp_path):
        samples, manifest = small_set
        path = tmp_path / "d.peeg"
        ds.save(samples, manifest, path)
        ds.manifest_path(path).unlink()
        with pytest.raises(DataFormatError, match="manifest"):
            ds.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            ds.load(tmp_path / "nope.peeg")


class TestSampleValidation:
    def test_wrong_shape(self):
        s = ds.EEGSample(np.zeros((64, 37), np.float32), votes=0, sample_id=1)
        with pytest.raises(ConfigurationError):
            s.validate()

    def test_nonfinite(self):
        vals = np.zeros((128, 37), np.float32)
        vals[0, 0] = np.nan
        with pytest.raises(ConfigurationError):
            ds.EEGSample(vals, votes=0, sample_id=1).validate()

    def test_votes_range(self):
        s = ds.EEGSample(np.zeros((128, 37), np.float32), votes=9, sample_id=1)
        with pytest.raises(ConfigurationError):
            s.validate()


def test_split_arrays_ordering(small_set):
    samples, manifest = small_set
    values, votes, ids = ds.split_arrays(samples, manifest, "train")
    assert values.dtype == np.float64
    assert list(ids) == manifest.ids_for("train")
    by_id = {s.sample_id: s for s in samples}
    for i, sid in enumerate(ids):
        assert votes[i] == by_id[sid].votes
