"""Case-based explanation reports: this EEG looks like that EEG.

Every explanation is a complete accounting — similarity times class
connection summed over all prototypes reproduces the class logit with no
remainder — rendered as JSON, a plain-text table, and an SVG that lays the
query window next to the training windows its prototypes came from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, MissingSampleError, NumericError,
                     ProvenanceError)
from .evaluation import BinaryScore, binarize
from .model import ProtoEEGNet, points_contributed
from .training import TrainData, embed_all


def _fmt(x: float) -> str:
    """Canonical number formatting shared by every output surface."""
    return format(float(x), ".12g")


@dataclass(frozen=True)
class PrototypeRow:
    prototype_class: int
    prototype_index: int
    similarity: float
    class_connection: float
    points: float
    source_sample_id: int

    def to_dict(self) -> dict:
        return {"prototype_class": self.prototype_class,
                "prototype_index": self.prototype_index,
                "similarity": self.similarity,
                "class_connection": self.class_connection,
                "points": self.points,
                "source_sample_id": self.source_sample_id}


@dataclass(frozen=True)
class ClassSection:
    class_id: int
    probability: float
    logit: float
    residual: float
    rows: tuple

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "probability": self.probability,
                "logit": self.logit, "residual": self.residual,
                "rows": [r.to_dict() for r in self.rows]}


@dataclass(frozen=True)
class Explanation:
    sample_id: int
    predicted_class: int
    probabilities: tuple
    binary: BinaryScore  # None unless the head covers the nine vote classes
    sections: tuple  # predicted class first, then by descending probability

    def to_dict(self) -> dict:
        binary = None
        if self.binary is not None:
            binary = {"p_pos": self.binary.p_pos, "p_neg": self.binary.p_neg,
                      "label": self.binary.label}
        return {
            "sample_id": self.sample_id,
            "predicted_class": self.predicted_class,
            "probabilities": list(self.probabilities),
            "binary": binary,
            "sections": [s.to_dict() for s in self.sections],
        }


def _require_provenance(model: ProtoEEGNet) -> None:
    if any(rec is None for rec in model.bank.provenance):
        raise ProvenanceError(
            "prototypes have no push provenance; run push_prototypes (or "
            "train through a push epoch) before requesting explanations")


def explain(model: ProtoEEGNet, sample, top_k: int = 3) -> Explanation:
    """Full per-prototype accounting for one sample.

    Sections cover every class — the predicted one first, the rest by
    descending probability — each keeping its top_k rows by absolute
    points contributed.
    """
    if not isinstance(top_k, (int, np.integer)) or top_k < 1:
        raise ConfigurationError(f"top_k must be a positive integer, got {top_k!r}")
    _require_provenance(model)

    out = model.forward_probs(np.asarray(sample.values, dtype=np.float64))
    sims = out["similarities"]
    logits = out["logits"]
    probs = out["probabilities"]
    predicted = int(np.argmax(probs))
    points = points_contributed(sims, model.head.data)  # (num_classes, count)

    bank = model.bank
    order = sorted(range(bank.num_classes),
                   key=lambda k: (k != predicted, -probs[k], k))
    sections = []
    for k in order:
        residual = float(logits[k]) - float(np.sum(points[k]))
        if abs(residual) > 1e-12:
            raise NumericError(
                f"class {k} logit fails completeness: residual {residual!r}")
        ranked = sorted(range(bank.count),
                        key=lambda j: (-abs(points[k, j]), j))[:top_k]
        rows = tuple(
            PrototypeRow(
                prototype_class=bank.class_of(j),
                prototype_index=j % bank.per_class,
                similarity=float(sims[j]),
                class_connection=float(model.head.data[k, j]),
                points=float(points[k, j]),
                source_sample_id=bank.provenance[j].source_sample_id)
            for j in ranked)
        sections.append(ClassSection(class_id=k, probability=float(probs[k]),
                                     logit=float(logits[k]),
                                     residual=residual, rows=rows))

    binary = None
    if probs.shape == (9,):  # the vote-scale reduction needs all nine classes
        binary = binarize(probs, votes=getattr(sample, "votes", 0),
                          sample_id=getattr(sample, "sample_id", -1))
    return Explanation(sample_id=int(getattr(sample, "sample_id", -1)),
                       predicted_class=predicted,
                       probabilities=tuple(float(p) for p in probs),
                       binary=binary, sections=tuple(sections))


# ---------------------------------------------------------------------------
# rendering


def _trace_polylines(values, x0, y0, width, height, color) -> list:
    """One polyline per channel, vertically stacked, amplitude-normalized."""
    values = np.asarray(values, dtype=np.float64)
    n_t, n_c = values.shape
    step = height / n_c
    amp = np.max(np.abs(values)) or 1.0
    xs = x0 + np.arange(n_t) * (width / (n_t - 1))
    parts = []
    for c in range(n_c):
        ys = y0 + (c + 0.5) * step - values[:, c] / amp * (step * 1.3)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="0.6" points="{pts}"/>')
    return parts


def _svg_report(explanation: Explanation, query_values, sources) -> str:
    """Hand-built SVG: query window beside each top prototype's source."""
    rows = explanation.sections[0].rows
    panel_w, panel_h, gutter, margin = 420, 230, 40, 20
    header_h = 64
    row_h = panel_h + 42
    width = margin * 2 + panel_w * 2 + gutter
    height = header_h + row_h * len(rows) + margin

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{margin}" y="28" font-family="monospace" font-size="16" '
           f'fill="#222">sample {explanation.sample_id} — predicted class '
           f'{explanation.predicted_class} '
           f'(p={_fmt(explanation.sections[0].probability)})</text>']
    if explanation.binary is not None:
        out.append(f'<text x="{margin}" y="50" font-family="monospace" '
                   f'font-size="13" fill="#222">'
                   f'p_pos={_fmt(explanation.binary.p_pos)} '
                   f'p_neg={_fmt(explanation.binary.p_neg)}</text>')

    for i, row in enumerate(rows):
        top = header_h + i * row_h
        src = sources[row.source_sample_id]
        out.append(f'<text x="{margin}" y="{top + 14}" font-family="monospace" '
                   f'font-size="12" fill="#222">query vs prototype '
                   f'({row.prototype_class},{row.prototype_index}) — '
                   f'similarity {_fmt(row.similarity)} · '
                   f'weight {_fmt(row.class_connection)} · '
                   f'points {_fmt(row.points)} · '
                   f'source {row.source_sample_id}</text>')
        out.extend(_trace_polylines(query_values, margin, top + 24,
                                    panel_w, panel_h, "#1f77b4"))
        out.extend(_trace_polylines(src, margin + panel_w + gutter, top + 24,
                                    panel_w, panel_h, "#d62728"))
    out.append("</svg>")
    return "\n".join(out)


def _text_report(explanation: Explanation) -> str:
    lines = [f"sample {explanation.sample_id}  "
             f"predicted class {explanation.predicted_class}"]
    if explanation.binary is not None:
        lines.append(f"binary: p_pos={_fmt(explanation.binary.p_pos)} "
                     f"p_neg={_fmt(explanation.binary.p_neg)} "
                     f"label={explanation.binary.label}")
    lines.append("")
    for section in explanation.sections:
        lines.append(f"class {section.class_id}  "
                     f"p={_fmt(section.probability)}  "
                     f"logit={_fmt(section.logit)}  "
                     f"residual={_fmt(section.residual)}")
        lines.append(f"  {'rank':>4}  {'prototype':<10}  {'similarity':>18}  "
                     f"{'weight':>18}  {'points':>18}  {'source':>8}")
        for rank, row in enumerate(section.rows, start=1):
            proto = f"({row.prototype_class},{row.prototype_index})"
            lines.append(f"  {rank:>4}  {proto:<10}  "
                         f"{_fmt(row.similarity):>18}  "
                         f"{_fmt(row.class_connection):>18}  "
                         f"{_fmt(row.points):>18}  "
                         f"{row.source_sample_id:>8}")
        lines.append("")
    return "\n".join(lines)


def render_report(explanation: Explanation, dataset, out_dir) -> dict:
    """Write explain_<id>.{json,svg,txt} into out_dir; returns the paths.

    `dataset` is any iterable of samples carrying `.sample_id` and
    `.values`; it must contain the query sample and every source sample
    referenced by the predicted class's rows.
    """
    index = {s.sample_id: np.asarray(s.values, dtype=np.float64)
             for s in dataset}
    if explanation.sample_id not in index:
        raise MissingSampleError(
            f"query sample {explanation.sample_id} not in dataset")
    needed = {row.source_sample_id for row in explanation.sections[0].rows}
    missing = sorted(needed - set(index))
    if missing:
        raise MissingSampleError(
            f"source sample {missing[0]} not in dataset")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"explain_{explanation.sample_id}"
    paths = {kind: out_dir / f"{stem}.{kind}" for kind in ("json", "svg", "txt")}
    paths["json"].write_text(
        json.dumps(explanation.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["svg"].write_text(
        _svg_report(explanation, index[explanation.sample_id], index) + "\n")
    paths["txt"].write_text(_text_report(explanation) + "\n")
    return paths


# ---------------------------------------------------------------------------
# prototype-quality audit


def global_prototype_report(model: ProtoEEGNet, dataset) -> dict:
    """Per-prototype similarity audit over the training split.

    Flags prototypes that resemble some off-class sample more than any
    sample of their own class.
    """
    _require_provenance(model)
    if isinstance(dataset, TrainData):
        data = dataset
    else:
        samples, manifest = dataset
        data = TrainData.from_dataset(samples, manifest)
    labels = data.train_labels
    bank = model.bank
    counts = np.bincount(labels, minlength=bank.num_classes)
    missing = np.nonzero(counts[:bank.num_classes] == 0)[0]
    if missing.size:
        raise ConfigurationError(
            f"class {int(missing[0])} has no training samples to audit against")

    latents = embed_all(model, data.train_values)
    sims = latents @ bank.vectors.data.T  # (n, count)
    rows, flagged = [], []
    for j in range(bank.count):
        c = bank.class_of(j)
        on = sims[labels == c, j]
        off = sims[labels != c, j]
        max_off = float(off.max()) if off.size else -np.inf
        rec = bank.provenance[j]
        is_flagged = bool(max_off > float(on.max()))
        rows.append({
            "prototype_class": c,
            "prototype_index": j % bank.per_class,
            "source_sample_id": rec.source_sample_id,
            "push_similarity": rec.similarity,
            "push_epoch": rec.epoch,
            "mean_on_class": float(on.mean()),
            "max_on_class": float(on.max()),
            "max_off_class": max_off,
            "flagged": is_flagged,
        })
        if is_flagged:
            flagged.append(j)
    return {"prototypes": rows, "flagged": flagged}
