"""Synthetic multi-annotator EEG windows, binary storage, and splits.

The generator mimics the shape of a clinical spike-review dataset:
1-second windows, 37 channels, and a vote count in 0..8 from eight
simulated annotators.  Each window is pink-noise background plus an
alpha rhythm; with probability ``spike_rate`` a spike-and-wave event
with latent salience s in (0, 1] is added, and annotators vote positive
with probability sigmoid(a_j * (s + noise - b_j)).

Storage is a little-endian binary container (magic ``PEEG``) with a
JSON manifest sidecar carrying split assignments.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError

TIME_STEPS = 128
CHANNELS = 37
SAMPLE_RATE_HZ = 128.0
NUM_CLASSES = 9
NUM_ANNOTATORS = 8
DEFAULT_FRACTIONS = (0.73, 0.12, 0.15)
SPLIT_NAMES = ("train", "val", "test")

MAGIC = b"PEEG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_RECORD_HEAD = struct.Struct("<QB")


@dataclass(frozen=True)
class AnnotatorModel:
    # steep sigmoids + staggered thresholds: the vote count behaves like an
    # ordinal reading of event salience with a narrow disagreement band
    sensitivities: tuple[float, ...] = (24.0, 26.0, 28.0, 30.0, 32.0, 34.0, 36.0, 38.0)
    biases: tuple[float, ...] = (0.15, 0.24, 0.33, 0.42, 0.50, 0.58, 0.67, 0.78)
    vote_noise: float = 0.02

    def __post_init__(self):
        if len(self.sensitivities) != NUM_ANNOTATORS or len(self.biases) != NUM_ANNOTATORS:
            raise ConfigurationError(
                f"annotator model needs exactly {NUM_ANNOTATORS} sensitivity/bias pairs"
            )
        if self.vote_noise < 0:
            raise ConfigurationError("vote_noise must be >= 0")


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    seed: int = 0
    spike_rate: float = 0.55
    noise_exponent: float = 1.0
    background_rms_uv: float = 8.0
    alpha_amplitude_uv: float = 3.0
    sharp_width_ms: tuple[float, float] = (20.0, 70.0)
    slow_width_ms: tuple[float, float] = (150.0, 350.0)
    # narrow gain spread keeps event salience decodable from the waveform
    amplitude_uv: tuple[float, float] = (95.0, 115.0)
    annotators: AnnotatorModel = field(default_factory=AnnotatorModel)
    sample_rate_hz: float = SAMPLE_RATE_HZ  # windows are always 1 second long

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ConfigurationError(f"n_samples must be positive, got {self.n_samples}")
        if not 0.0 <= self.spike_rate <= 1.0:
            raise ConfigurationError(f"spike_rate must lie in [0, 1], got {self.spike_rate}")
        for name in ("sharp_width_ms", "slow_width_ms", "amplitude_uv"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ConfigurationError(f"{name} range ({lo}, {hi}) is not a positive range")
        if self.sample_rate_hz < 32:
            raise ConfigurationError("sample_rate_hz below 32 cannot hold the event morphology")

    @property
    def time_steps(self) -> int:
        return int(round(self.sample_rate_hz))

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "seed": self.seed,
            "spike_rate": self.spike_rate,
            "noise_exponent": self.noise_exponent,
            "background_rms_uv": self.background_rms_uv,
            "alpha_amplitude_uv": self.alpha_amplitude_uv,
            "sharp_width_ms": list(self.sharp_width_ms),
            "slow_width_ms": list(self.slow_width_ms),
            "amplitude_uv": list(self.amplitude_uv),
            "annotators": {
                "sensitivities": list(self.annotators.sensitivities),
                "biases": list(self.annotators.biases),
                "vote_noise": self.annotators.vote_noise,
            },
            "sample_rate_hz": self.sample_rate_hz,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        known = {"n_samples", "seed", "spike_rate", "noise_exponent", "background_rms_uv",
                 "alpha_amplitude_uv", "sharp_width_ms", "slow_width_ms", "amplitude_uv",
                 "annotators", "sample_rate_hz"}
        for key in raw:
            if key not in known:
                raise ConfigurationError(f"unknown generator config key {key!r}")
        kwargs = dict(raw)
        for name in ("sharp_width_ms", "slow_width_ms", "amplitude_uv"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        if "annotators" in kwargs:
            ann = kwargs["annotators"]
            extra = set(ann) - {"sensitivities", "biases", "vote_noise"}
            if extra:
                raise ConfigurationError(f"unknown annotator config key {sorted(extra)[0]!r}")
            kwargs["annotators"] = AnnotatorModel(
                sensitivities=tuple(ann.get("sensitivities",
                                            AnnotatorModel().sensitivities)),
                biases=tuple(ann.get("biases", AnnotatorModel().biases)),
                vote_noise=float(ann.get("vote_noise", AnnotatorModel().vote_noise)),
            )
        return cls(**kwargs)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class EEGSample:
    values: np.ndarray  # (time, channel) float32, microvolts
    votes: int
    sample_id: int

    def validate(self, time_steps: int = TIME_STEPS, channels: int = CHANNELS) -> None:
        if self.values.shape != (time_steps, channels):
            raise ConfigurationError(
                f"sample {self.sample_id}: shape {self.values.shape} != "
                f"({time_steps}, {channels})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError(f"sample {self.sample_id}: non-finite values")
        if not 0 <= self.votes <= NUM_ANNOTATORS:
            raise ConfigurationError(
                f"sample {self.sample_id}: votes {self.votes} outside 0..{NUM_ANNOTATORS}"
            )


@dataclass
class DatasetManifest:
    version: int
    sample_count: int
    channel_count: int
    time_steps: int
    sample_rate_hz: float
    splits: dict  # sample_id (int) -> "train" | "val" | "test"
    seed: int
    config_digest: str

    def ids_for(self, split: str) -> list[int]:
        if split not in SPLIT_NAMES:
            raise ConfigurationError(f"unknown split {split!r}")
        return sorted(sid for sid, name in self.splits.items() if name == split)

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "sample_count": self.sample_count,
            "channel_count": self.channel_count,
            "time_steps": self.time_steps,
            "sample_rate_hz": self.sample_rate_hz,
            "splits": {str(k): v for k, v in sorted(self.splits.items())},
            "seed": self.seed,
            "config_digest": self.config_digest,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"manifest is not valid JSON: {exc}") from exc
        required = ("version", "sample_count", "channel_count", "time_steps",
                    "sample_rate_hz", "splits", "seed", "config_digest")
        for key in required:
            if key not in raw:
                raise DataFormatError(f"manifest missing field {key!r}")
        splits = {}
        for key, name in raw["splits"].items():
            if name not in SPLIT_NAMES:
                raise DataFormatError(f"manifest split for sample {key} is {name!r}")
            splits[int(key)] = name
        return cls(version=int(raw["version"]), sample_count=int(raw["sample_count"]),
                   channel_count=int(raw["channel_count"]), time_steps=int(raw["time_steps"]),
                   sample_rate_hz=float(raw["sample_rate_hz"]), splits=splits,
                   seed=int(raw["seed"]), config_digest=str(raw["config_digest"]))


# ---------------------------------------------------------------------------
# generation


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def simulate_votes(salience: float, annotators: AnnotatorModel, rng) -> int:
    """Draw one vote count for a window of the given latent salience."""
    a = np.asarray(annotators.sensitivities)
    b = np.asarray(annotators.biases)
    eps = rng.normal(0.0, annotators.vote_noise, size=NUM_ANNOTATORS)
    p = _sigmoid(a * (salience + eps - b))
    return int(np.sum(rng.random(NUM_ANNOTATORS) < p))


def _pink_background(rng, cfg: SynthConfig, n_t: int) -> np.ndarray:
    n_freq = n_t // 2 + 1
    amp = np.zeros(n_freq)
    amp[1:] = np.arange(1, n_freq, dtype=np.float64) ** (-cfg.noise_exponent / 2.0)
    z = rng.standard_normal((CHANNELS, n_freq)) + 1j * rng.standard_normal((CHANNELS, n_freq))
    z[:, 0] = 0.0
    x = np.fft.irfft(z * amp, n=n_t, axis=1).T  # (time, channel)
    rms = np.sqrt(np.mean(x ** 2))
    if rms > 0:
        x *= cfg.background_rms_uv / rms
    # shared alpha rhythm with per-channel amplitude
    f = rng.uniform(8.0, 12.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ch_amp = rng.uniform(0.3, 1.0, size=CHANNELS) * cfg.alpha_amplitude_uv
    t = np.arange(n_t) / cfg.sample_rate_hz
    x += np.sin(2.0 * np.pi * f * t + phase)[:, None] * ch_amp[None, :]
    return x


def _spike_wave_event(rng, cfg: SynthConfig, salience: float, n_t: int) -> np.ndarray:
    """Sharp triangular transient plus half-sine slow wave on a channel patch."""
    fs = cfg.sample_rate_hz
    sharp_s = rng.uniform(*cfg.sharp_width_ms) / 1000.0
    slow_s = rng.uniform(*cfg.slow_width_ms) / 1000.0
    amp = salience * rng.uniform(*cfg.amplitude_uv)
    center_ch = int(rng.integers(0, CHANNELS))
    halfwidth = int(rng.integers(3, 9))
    onset = int(rng.uniform(0.15, 0.60) * n_t)

    n_sharp = max(3, int(round(sharp_s * fs)))
    n_slow = max(4, int(round(slow_s * fs)))
    peak = max(1, n_sharp // 3)  # fast rise, slower fall
    tri = np.concatenate([
        np.linspace(0.0, -1.0, peak + 1)[1:],
        np.linspace(-1.0, 0.0, n_sharp - peak + 1)[1:],
    ])
    slow = 0.45 * np.sin(np.pi * np.arange(1, n_slow + 1) / (n_slow + 1))
    waveform = amp * np.concatenate([tri, slow])

    spatial = np.maximum(0.0, 1.0 - np.abs(np.arange(CHANNELS) - center_ch) / halfwidth)
    out = np.zeros((n_t, CHANNELS))
    stop = min(n_t, onset + len(waveform))
    out[onset:stop] = waveform[: stop - onset, None] * spatial[None, :]
    return out


def generate_synthetic(config: SynthConfig):
    """Generate samples plus a manifest with the default stratified split.

    Deterministic under ``config.seed``: every sample draws from its own
    child generator, so the draw order is part of the format.
    """
    n_t = config.time_steps
    children = np.random.SeedSequence(config.seed).spawn(config.n_samples)
    samples = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        has_event = rng.random() < config.spike_rate
        salience = float(rng.uniform(0.1, 1.0)) if has_event else 0.0
        values = _pink_background(rng, config, n_t)
        if has_event:
            values += _spike_wave_event(rng, config, salience, n_t)
        votes = simulate_votes(salience, config.annotators, rng)
        sample = EEGSample(values=values.astype(np.float32), votes=votes, sample_id=i)
        sample.validate(time_steps=n_t)
        samples.append(sample)

    manifest = split(samples, fractions=DEFAULT_FRACTIONS, seed=config.seed)
    manifest.sample_rate_hz = config.sample_rate_hz
    manifest.time_steps = n_t
    manifest.config_digest = config.digest()
    return samples, manifest


# ---------------------------------------------------------------------------
# splitting


def split(samples, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> DatasetManifest:
    """Stratified-by-vote-class split, deterministic under seed.

    Within each class sizes follow largest-remainder rounding, and any
    class with >= 3 members lands in every split.
    """
    if not samples:
        raise ConfigurationError("cannot split an empty sample collection")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigurationError(f"fractions must be three non-negative reals, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got {sum(fractions)}")

    rng = np.random.default_rng(seed)
    assignments: dict[int, str] = {}
    by_class: dict[int, list[int]] = {}
    for s in samples:
        by_class.setdefault(s.votes, []).append(s.sample_id)

    for votes in sorted(by_class):
        ids = np.array(sorted(by_class[votes]), dtype=np.int64)
        rng.shuffle(ids)
        n = len(ids)
        exact = [f * n for f in fractions]
        counts = [int(np.floor(e)) for e in exact]
        leftover = n - sum(counts)
        order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in range(leftover):
            counts[order[i % 3]] += 1
        if n >= 3 and all(f > 0 for f in fractions):
            # every split must see this class
            while min(counts) == 0:
                counts[counts.index(max(counts))] -= 1
                counts[counts.index(min(counts))] += 1
        pos = 0
        for name, c in zip(SPLIT_NAMES, counts):
            for sid in ids[pos:pos + c]:
                assignments[int(sid)] = name
            pos += c

    time_steps = samples[0].values.shape[0]
    return DatasetManifest(
        version=FORMAT_VERSION,
        sample_count=len(samples),
        channel_count=CHANNELS,
        time_steps=time_steps,
        sample_rate_hz=float(time_steps),
        splits=assignments,
        seed=seed,
        config_digest="",
    )


def class_histogram(samples) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in samples:
        counts[s.votes] += 1
    return counts


# ---------------------------------------------------------------------------
# storage


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".manifest.json")


def save(samples, manifest: DatasetManifest, path) -> None:
    path = Path(path)
    if not samples:
        raise ConfigurationError("refusing to save an empty dataset")
    time_steps, channels = samples[0].values.shape
    payload = bytearray()
    for s in samples:
        s.validate(time_steps=time_steps, channels=channels)
        payload += _RECORD_HEAD.pack(s.sample_id, s.votes)
        payload += np.ascontiguousarray(s.values, dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(samples), time_steps, channels)
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    manifest_path(path).write_text(manifest.to_json())


def load(path):
    """Read a dataset container and its manifest sidecar."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file {path} does not exist")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size + 4:
        raise DataFormatError("dataset file truncated: header incomplete")
    magic, version, count, time_steps, channels = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported dataset version {version}")
    record = _RECORD_HEAD.size + time_steps * channels * 4
    expected = _HEADER.size + count * record + 4
    if len(blob) != expected:
        raise DataFormatError(
            f"dataset payload truncated: expected {expected} bytes, got {len(blob)}"
        )
    payload = blob[_HEADER.size:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != stored_crc:
        raise DataFormatError(f"checksum mismatch: stored {stored_crc:#x}, computed {crc:#x}")

    samples = []
    offset = 0
    for _ in range(count):
        sid, votes = _RECORD_HEAD.unpack_from(payload, offset)
        offset += _RECORD_HEAD.size
        values = np.frombuffer(payload, dtype="<f4", count=time_steps * channels,
                               offset=offset).reshape(time_steps, channels)
        offset += time_steps * channels * 4
        sample = EEGSample(values=values.copy(), votes=int(votes), sample_id=int(sid))
        sample.validate(time_steps=time_steps, channels=channels)
        samples.append(sample)

    mpath = manifest_path(path)
    if not mpath.exists():
        raise DataFormatError(f"manifest sidecar {mpath} does not exist")
    manifest = DatasetManifest.from_json(mpath.read_text())
    if manifest.sample_count != count:
        raise DataFormatError(
            f"manifest sample_count {manifest.sample_count} != container count {count}"
        )
    return samples, manifest


def split_arrays(samples, manifest: DatasetManifest, split_name: str):
    """(values f64 (N,T,C), votes, sample_ids) for one split, id-ordered."""
    by_id = {s.sample_id: s for s in samples}
    ids = manifest.ids_for(split_name)
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigurationError(f"manifest references missing sample ids {missing[:5]}")
    values = np.stack([by_id[i].values for i in ids]).astype(np.float64)
    votes = np.array([by_id[i].votes for i in ids], dtype=np.int64)
    return values, votes, np.array(ids, dtype=np.int64)
