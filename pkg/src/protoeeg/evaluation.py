"""Binary reduction of 9-class outputs, AUROC, and bootstrap intervals.

The vote classes collapse to a binary task at the 4-vote threshold: the
positive score averages the five high-vote class probabilities, the
negative score the four low-vote ones, and a two-way softmax renormalizes
the pair.  AUROC uses the Mann-Whitney convention (ties get half credit),
which the threshold-sweep trapezoid area reproduces exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import (ConfigurationError, ContractError, DimensionError,
                     NumericError, UndefinedMetricError)

POSITIVE_VOTE_THRESHOLD = 4
AMBIGUOUS_VOTES = frozenset({3, 4, 5})

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class BinaryScore:
    """Two-way collapsed prediction for one sample."""

    p_pos: float
    p_neg: float
    sample_id: int
    label: int  # 1 when votes >= POSITIVE_VOTE_THRESHOLD

    def __post_init__(self):
        if abs(self.p_pos + self.p_neg - 1.0) > 1e-12:
            raise ContractError(
                f"p_pos + p_neg = {self.p_pos + self.p_neg!r}, expected 1")
        if not (0.0 < self.p_pos < 1.0):
            raise ContractError(f"p_pos {self.p_pos!r} outside (0, 1)")
        if self.label not in (0, 1):
            raise ContractError(f"binary label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class RocResult:
    auroc: float
    fpr: np.ndarray
    tpr: np.ndarray
    n_pos: int
    n_neg: int

    def validate(self) -> None:
        if not (0.0 <= self.auroc <= 1.0):
            raise ContractError(f"auroc {self.auroc} outside [0, 1]")
        if (self.fpr[0], self.tpr[0]) != (0.0, 0.0):
            raise ContractError("ROC curve must start at (0, 0)")
        if (self.fpr[-1], self.tpr[-1]) != (1.0, 1.0):
            raise ContractError("ROC curve must end at (1, 1)")
        if np.any(np.diff(self.fpr) < 0) or np.any(np.diff(self.tpr) < 0):
            raise ContractError("ROC curve must be nondecreasing")


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lower: float
    upper: float
    rounds: int
    seed: int

    def __post_init__(self):
        if not (self.lower <= self.point <= self.upper):
            raise ContractError(
                f"CI [{self.lower}, {self.upper}] excludes point {self.point}")


def binarize(probs9, votes: int = 0, sample_id: int = -1) -> BinaryScore:
    """Collapse a 9-class distribution to a renormalized (p_pos, p_neg) pair.

    p_pos averages classes 4..8, p_neg classes 0..3, and the pair goes
    through a two-way softmax.  The softmax is monotone in the raw
    difference, so rankings (and AUROC) are unaffected by it.
    """
    probs = np.asarray(probs9, dtype=np.float64)
    if probs.shape != (9,):
        raise ContractError(f"expected 9 class probabilities, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ContractError("class probabilities must be finite")
    if np.any(probs < -1e-12) or abs(probs.sum() - 1.0) > 1e-9:
        raise ContractError("class probabilities must be a distribution")
    p_pos_raw = probs[POSITIVE_VOTE_THRESHOLD:].mean()
    p_neg_raw = probs[:POSITIVE_VOTE_THRESHOLD].mean()
    shift = max(p_pos_raw, p_neg_raw)
    e_pos = np.exp(p_pos_raw - shift)
    e_neg = np.exp(p_neg_raw - shift)
    p_pos = float(e_pos / (e_pos + e_neg))
    return BinaryScore(p_pos=p_pos, p_neg=1.0 - p_pos,
                       sample_id=int(sample_id),
                       label=int(votes >= POSITIVE_VOTE_THRESHOLD))


def _check_score_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise DimensionError(
            f"scores {scores.shape} and labels {labels.shape} must be "
            "matching 1-d arrays")
    if not np.all(np.isfinite(scores)):
        raise NumericError("scores contain non-finite values")
    if not np.all(np.isin(labels, (0, 1))):
        raise ContractError("labels must be binary (0 or 1)")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes (n_pos={n_pos}, n_neg={n_neg})")
    return scores, labels, n_pos, n_neg


def _auroc_value(scores, labels, n_pos, n_neg) -> float:
    """Mann-Whitney statistic via midranks (ties get half credit)."""
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def auroc(scores, labels) -> RocResult:
    """AUROC with the ROC curve from a descending threshold sweep.

    The trapezoid area under the sweep equals the midrank statistic; the
    two are cross-checked and any disagreement raises.
    """
    scores, labels, n_pos, n_neg = _check_score_inputs(scores, labels)
    value = _auroc_value(scores, labels, n_pos, n_neg)

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tps = np.cumsum(sorted_labels)
    fps = np.cumsum(1 - sorted_labels)
    last_of_group = np.r_[np.nonzero(np.diff(sorted_scores))[0],
                          sorted_scores.size - 1]
    fpr = np.r_[0.0, fps[last_of_group] / n_neg]
    tpr = np.r_[0.0, tps[last_of_group] / n_pos]
    area = float(_trapezoid(tpr, fpr))
    if abs(area - value) > 1e-9:
        raise NumericError(
            f"threshold-sweep area {area} disagrees with rank statistic {value}")

    result = RocResult(auroc=value, fpr=fpr, tpr=tpr, n_pos=n_pos, n_neg=n_neg)
    result.validate()
    return result


def filtered_view(samples):
    """Drop borderline samples (3, 4, or 5 votes); accepts vote-carrying
    objects or plain integers."""
    kept = []
    for sample in samples:
        votes = sample.votes if hasattr(sample, "votes") else int(sample)
        if votes not in AMBIGUOUS_VOTES:
            kept.append(sample)
    return kept


def ambiguity_mask(votes) -> np.ndarray:
    """Boolean keep-mask over a votes array: True where the sample survives."""
    votes = np.asarray(votes)
    return ~np.isin(votes, tuple(AMBIGUOUS_VOTES))


def bootstrap_ci(scores, labels, rounds: int = 10000, seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap of the AUROC, deterministic under seed.

    Resamples with replacement; rounds that draw a single class are
    redrawn so exactly `rounds` estimates enter the percentiles.  The
    interval is widened (rarely) to include the point estimate, keeping
    lower <= point <= upper.
    """
    scores, labels, n_pos, n_neg = _check_score_inputs(scores, labels)
    if rounds < 1:
        raise ConfigurationError("bootstrap rounds must be >= 1")
    point = _auroc_value(scores, labels, n_pos, n_neg)
    n = scores.size
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    estimates = np.empty(rounds)
    for r in range(rounds):
        while True:
            idx = rng.integers(0, n, size=n)
            pos = int(labels[idx].sum())
            if 0 < pos < n:
                break
        estimates[r] = _auroc_value(scores[idx], labels[idx], pos, n - pos)
    lower, upper = np.percentile(estimates, [2.5, 97.5])
    return BootstrapCI(point=point, lower=float(min(lower, point)),
                       upper=float(max(upper, point)), rounds=rounds,
                       seed=seed)


def score_samples(model, samples) -> list:
    """BinaryScore per test sample, in the given order."""
    if not samples:
        raise ConfigurationError("test split is empty")
    values = np.stack([np.asarray(s.values, dtype=np.float64) for s in samples])
    probs = model.forward_probs(values)["probabilities"]
    return [binarize(probs[i], votes=s.votes, sample_id=s.sample_id)
            for i, s in enumerate(samples)]


def metrics_from_scores(binary_scores, votes, rounds: int = 10000,
                        seed: int = 0) -> dict:
    """Unfiltered and filtered AUROC with bootstrap CIs as a JSON-ready dict."""
    votes = np.asarray(votes)
    p_pos = np.array([b.p_pos for b in binary_scores])
    labels = np.array([b.label for b in binary_scores])
    if votes.shape != p_pos.shape:
        raise DimensionError("votes must align with scores")

    unfiltered = auroc(p_pos, labels)
    ci_u = bootstrap_ci(p_pos, labels, rounds=rounds, seed=seed)
    keep = ambiguity_mask(votes)
    filtered = auroc(p_pos[keep], labels[keep])
    ci_f = bootstrap_ci(p_pos[keep], labels[keep], rounds=rounds, seed=seed)
    return {
        "auroc_unfiltered": unfiltered.auroc,
        "ci_unfiltered": [ci_u.lower, ci_u.upper],
        "auroc_filtered": filtered.auroc,
        "ci_filtered": [ci_f.lower, ci_f.upper],
        "n_test": int(votes.size),
        "n_filtered": int(keep.sum()),
        "seed": int(seed),
        "rounds": int(rounds),
    }


def evaluate(model, samples, rounds: int = 10000, seed: int = 0) -> dict:
    """Score a test split and report both AUROC views with CIs."""
    scores = score_samples(model, samples)
    votes = [s.votes for s in samples]
    return metrics_from_scores(scores, votes, rounds=rounds, seed=seed)
