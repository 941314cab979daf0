"""Staged optimization: warm, secondary warm, joint, push, convex head fit.

The schedule runs three gradient phases back to back — prototypes warm up
alone, then move together with the backbone, then every parameter group
trains jointly under a halving learning-rate ladder.  At configured epochs
the prototypes are projected ("pushed") onto their most similar same-class
training latents and the head is re-fit by a convex proximal pass that
drives off-class weights toward exact zeros.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataset import split_arrays
from .errors import ConfigurationError
from .losses import LossCoefficients, total_loss
from .model import ProtoEEGNet, PushRecord, save_model

__all__ = [
    "TrainConfig", "TrainData", "TrainHistory", "embed_all", "stage_spans",
    "joint_lr_factor", "run_warm_stage", "run_secondary_warm_stage",
    "run_joint_stage", "push_prototypes", "optimize_last_layer", "train",
]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and optimizer settings for a full training run.

    Epochs are counted 1..num_train_epochs.  `push_epochs` fire after the
    named epoch finishes; the last push always lands on the final epoch.
    """

    num_train_epochs: int = 130
    num_warm_epochs: int = 10
    num_secondary_warm_epochs: int = 10
    push_start: int = 70
    push_epochs: tuple = (110, 120, 130)
    joint_lr_step_size: int = 30
    joint_lr_decay: float = 0.5
    warm_prototype_lr: float = 3e-3
    secondary_prototype_lr: float = 3e-3
    secondary_feature_lr: float = 1e-3
    joint_prototype_lr: float = 0.05
    joint_feature_lr: float = 1e-3
    joint_last_layer_lr: float = 1e-5
    batch_size: int = 32
    train_push_batch_size: int = 75
    last_layer_max_iters: int = 500
    last_layer_tol: float = 1e-9
    coefficients: LossCoefficients = field(default_factory=LossCoefficients)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_train_epochs", "num_warm_epochs",
                     "num_secondary_warm_epochs", "push_start",
                     "joint_lr_step_size", "batch_size",
                     "train_push_batch_size", "last_layer_max_iters", "seed"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigurationError(f"{name} must be an integer, got {v!r}")
        if self.num_train_epochs < 1:
            raise ConfigurationError("num_train_epochs must be >= 1")
        if self.num_warm_epochs < 0 or self.num_secondary_warm_epochs < 0:
            raise ConfigurationError("warm epoch counts must be >= 0")
        if self.num_warm_epochs + self.num_secondary_warm_epochs > self.num_train_epochs:
            raise ConfigurationError(
                "num_warm_epochs + num_secondary_warm_epochs "
                f"({self.num_warm_epochs}+{self.num_secondary_warm_epochs}) "
                f"exceeds num_train_epochs ({self.num_train_epochs})")
        if self.push_start < 0:
            raise ConfigurationError("push_start must be >= 0")
        pushes = tuple(self.push_epochs)
        if not pushes:
            raise ConfigurationError("push_epochs must name at least one epoch")
        if any(not isinstance(e, (int, np.integer)) for e in pushes):
            raise ConfigurationError("push_epochs must be integers")
        if list(pushes) != sorted(set(int(e) for e in pushes)):
            raise ConfigurationError("push_epochs must be strictly increasing")
        if pushes[0] <= self.push_start:
            raise ConfigurationError(
                f"push epoch {pushes[0]} is not after push_start {self.push_start}")
        if pushes[-1] != self.num_train_epochs:
            raise ConfigurationError(
                f"final push epoch {pushes[-1]} must equal "
                f"num_train_epochs {self.num_train_epochs}")
        if self.joint_lr_step_size < 1:
            raise ConfigurationError("joint_lr_step_size must be >= 1")
        if not (0.0 < self.joint_lr_decay <= 1.0):
            raise ConfigurationError("joint_lr_decay must be in (0, 1]")
        for name in ("warm_prototype_lr", "secondary_prototype_lr",
                     "secondary_feature_lr", "joint_prototype_lr",
                     "joint_feature_lr", "joint_last_layer_lr"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0")
        if self.batch_size < 1 or self.train_push_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.last_layer_max_iters < 1:
            raise ConfigurationError("last_layer_max_iters must be >= 1")
        if not (self.last_layer_tol > 0):
            raise ConfigurationError("last_layer_tol must be > 0")
        if not isinstance(self.coefficients, LossCoefficients):
            raise ConfigurationError("coefficients must be LossCoefficients")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "push_epochs":
                v = [int(e) for e in v]
            elif f.name == "coefficients":
                v = v.to_dict()
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigurationError(f"unknown training config key {key!r}")
        kw = dict(raw)
        if "push_epochs" in kw:
            kw["push_epochs"] = tuple(int(e) for e in kw["push_epochs"])
        if "coefficients" in kw and isinstance(kw["coefficients"], dict):
            kw["coefficients"] = LossCoefficients.from_dict(kw["coefficients"])
        return cls(**kw)


def stage_spans(config: TrainConfig) -> dict:
    """Global 1-based epoch range of each gradient stage."""
    w = config.num_warm_epochs
    s = config.num_secondary_warm_epochs
    return {
        "warm": range(1, w + 1),
        "secondary_warm": range(w + 1, w + s + 1),
        "joint": range(w + s + 1, config.num_train_epochs + 1),
    }


def joint_lr_factor(config: TrainConfig, epoch: int) -> float:
    """Decay multiplier for joint learning rates at a global epoch number.

    Offsets are measured from the first joint epoch implied by the config;
    the factor halves (by `joint_lr_decay`) every `joint_lr_step_size` epochs.
    """
    first_joint = config.num_warm_epochs + config.num_secondary_warm_epochs + 1
    offset = epoch - first_joint
    if offset < 0:
        raise ConfigurationError(f"epoch {epoch} precedes the joint stage")
    return config.joint_lr_decay ** (offset // config.joint_lr_step_size)


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class TrainData:
    """Dense split arrays ready for batching (values f64, labels/ids i64)."""

    train_values: np.ndarray
    train_labels: np.ndarray
    train_ids: np.ndarray
    val_values: np.ndarray
    val_labels: np.ndarray
    val_ids: np.ndarray

    @classmethod
    def from_dataset(cls, samples, manifest) -> "TrainData":
        tv, tl, ti = split_arrays(samples, manifest, "train")
        vv, vl, vi = split_arrays(samples, manifest, "val")
        return cls(tv, tl, ti, vv, vl, vi)

    @classmethod
    def of(cls, values, labels, ids=None) -> "TrainData":
        """Wrap raw train arrays (no validation split); handy for small runs."""
        values = np.asarray(values, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if ids is None:
            ids = np.arange(len(labels), dtype=np.int64)
        else:
            ids = np.asarray(ids, dtype=np.int64)
        empty_v = np.empty((0,) + values.shape[1:], dtype=np.float64)
        empty_i = np.empty(0, dtype=np.int64)
        return cls(values, labels, ids, empty_v, empty_i.copy(), empty_i.copy())


def _require_nonempty(data: TrainData) -> None:
    if data.train_values.shape[0] == 0:
        raise ConfigurationError("training split is empty")


def embed_all(model: ProtoEEGNet, values: np.ndarray,
              batch_size: int = 256) -> np.ndarray:
    """Latents for a stack of windows, off the autodiff tape, in chunks."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty((values.shape[0], model.config.latent_dim))
    with dc.no_grad():
        for lo in range(0, values.shape[0], batch_size):
            z = model.embed(values[lo:lo + batch_size])
            out[lo:lo + z.data.shape[0]] = z.data
    return out


# ---------------------------------------------------------------------------
# history


@dataclass
class TrainHistory:
    """One record per epoch plus any non-fatal warnings raised on the way."""

    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def stage_boundaries(self) -> list:
        """Last epoch of each stage except the final one (e.g. [10, 20])."""
        out = []
        for prev, cur in zip(self.records, self.records[1:]):
            if cur["stage"] != prev["stage"]:
                out.append(prev["epoch"])
        return out

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl() + "\n")

    @classmethod
    def load(cls, path) -> "TrainHistory":
        records = [json.loads(line)
                   for line in Path(path).read_text().splitlines() if line]
        return cls(records=records)


def _zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _validation_metrics(model: ProtoEEGNet, data: TrainData):
    if data.val_values.shape[0] == 0:
        return None
    out = model.forward_probs(data.val_values)
    probs = out["probabilities"]
    labels = data.val_labels
    picked = np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)
    return {
        "cross_entropy": float(-np.mean(np.log(picked))),
        "accuracy": float(np.mean(np.argmax(probs, axis=1) == labels)),
    }


def _epoch_pass(model, data, config, opt, rng, latents_cache=None) -> dict:
    """One shuffled gradient epoch; returns sample-weighted mean losses."""
    n = data.train_values.shape[0]
    perm = rng.permutation(n)
    keys = ("total", "cross_entropy", "cluster", "separation",
            "orthogonality", "l1")
    agg = dict.fromkeys(keys, 0.0)
    for lo in range(0, n, config.batch_size):
        idx = perm[lo:lo + config.batch_size]
        if latents_cache is not None:
            latents = dc.Tensor(latents_cache[idx])
        else:
            latents = model.embed(data.train_values[idx])
        report = total_loss(latents, data.train_labels[idx], model.bank,
                            model.head, config.coefficients)
        _zero_grads(model.all_parameters())
        dc.backward(report.tensor)
        opt.step()
        model.bank.renormalize()
        for key in keys:
            agg[key] += getattr(report, key) * len(idx)
    return {k: float(v / n) for k, v in agg.items()}


def _record(history, model, data, *, epoch, stage, lr, losses) -> None:
    if history is None:
        return
    history.append({
        "epoch": int(epoch),
        "stage": stage,
        "lr": {k: float(v) for k, v in lr.items()},
        "loss": losses,
        "val": _validation_metrics(model, data),
    })


# ---------------------------------------------------------------------------
# gradient stages


def run_warm_stage(model, data, config, epochs=None, *, rng=None,
                   history=None) -> ProtoEEGNet:
    """Train prototype vectors alone; backbone and head stay untouched.

    Latents are computed once up front — with the backbone frozen they
    cannot change within the stage.
    """
    _require_nonempty(data)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    if epochs is None:
        epochs = range(1, config.num_warm_epochs + 1)
    opt = dc.Adam([{"name": "prototypes", "params": [model.bank.vectors],
                    "lr": config.warm_prototype_lr}])
    cache = embed_all(model, data.train_values)
    for epoch in epochs:
        losses = _epoch_pass(model, data, config, opt, rng,
                             latents_cache=cache)
        _record(history, model, data, epoch=epoch, stage="warm",
                lr={"prototypes": config.warm_prototype_lr}, losses=losses)
    return model


def run_secondary_warm_stage(model, data, config, epochs=None, *, rng=None,
                             history=None) -> ProtoEEGNet:
    """Train prototypes and backbone together; head stays frozen."""
    _require_nonempty(data)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    if epochs is None:
        w = config.num_warm_epochs
        epochs = range(w + 1, w + config.num_secondary_warm_epochs + 1)
    lr = {"prototypes": config.secondary_prototype_lr,
          "features": config.secondary_feature_lr}
    opt = dc.Adam([
        {"name": "prototypes", "params": [model.bank.vectors],
         "lr": lr["prototypes"]},
        {"name": "features", "params": model.backbone_parameters(),
         "lr": lr["features"]},
    ])
    for epoch in epochs:
        losses = _epoch_pass(model, data, config, opt, rng)
        _record(history, model, data, epoch=epoch, stage="secondary_warm",
                lr=lr, losses=losses)
    return model


def run_joint_stage(model, data, config, epochs=None, *, rng=None,
                    history=None) -> ProtoEEGNet:
    """Train all parameter groups, halving their rates on the ladder."""
    _require_nonempty(data)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    if epochs is None:
        first = config.num_warm_epochs + config.num_secondary_warm_epochs + 1
        epochs = range(first, config.num_train_epochs + 1)
    opt = dc.Adam([
        {"name": "prototypes", "params": [model.bank.vectors],
         "lr": config.joint_prototype_lr},
        {"name": "features", "params": model.backbone_parameters(),
         "lr": config.joint_feature_lr},
        {"name": "last_layer", "params": [model.head],
         "lr": config.joint_last_layer_lr},
    ])
    for epoch in epochs:
        factor = joint_lr_factor(config, epoch)
        lr = {"prototypes": config.joint_prototype_lr * factor,
              "features": config.joint_feature_lr * factor,
              "last_layer": config.joint_last_layer_lr * factor}
        for name, value in lr.items():
            opt.set_lr(name, value)
        losses = _epoch_pass(model, data, config, opt, rng)
        _record(history, model, data, epoch=epoch, stage="joint",
                lr=lr, losses=losses)
    return model


# ---------------------------------------------------------------------------
# prototype projection


def push_prototypes(model, data, config, *, epoch: int = 0) -> list:
    """Snap each prototype onto its most similar same-class training latent.

    Samples are scanned in ascending sample_id order in batches of
    `train_push_batch_size`; a strict improvement is required to replace
    the incumbent, so ties resolve to the smallest sample_id.  Prototype
    rows are overwritten with the winning latents byte for byte.
    """
    _require_nonempty(data)
    bank = model.bank
    labels = data.train_labels
    counts = np.bincount(labels, minlength=bank.num_classes)
    missing = np.nonzero(counts[:bank.num_classes] == 0)[0]
    if missing.size:
        raise ConfigurationError(
            f"class {int(missing[0])} has no training samples to push onto")

    protos = bank.vectors.data
    best_sim = np.full(bank.count, -np.inf)
    best_id = np.full(bank.count, -1, dtype=np.int64)
    best_latent = np.zeros_like(protos)
    order = np.argsort(data.train_ids, kind="stable")

    for lo in range(0, order.size, config.train_push_batch_size):
        sel = order[lo:lo + config.train_push_batch_size]
        z = embed_all(model, data.train_values[sel],
                      batch_size=config.train_push_batch_size)
        sims = z @ protos.T
        batch_labels = labels[sel]
        batch_ids = data.train_ids[sel]
        for c in np.unique(batch_labels):
            rows = np.nonzero(batch_labels == c)[0]
            lo_j = int(c) * bank.per_class
            block = sims[rows][:, lo_j:lo_j + bank.per_class]
            arg = np.argmax(block, axis=0)  # first max <=> smallest id
            top = block[arg, np.arange(block.shape[1])]
            for slot in range(bank.per_class):
                j = lo_j + slot
                if top[slot] > best_sim[j]:
                    r = rows[arg[slot]]
                    best_sim[j] = top[slot]
                    best_id[j] = batch_ids[r]
                    best_latent[j] = z[r]

    records = []
    for j in range(bank.count):
        c, slot = divmod(j, bank.per_class)
        rec = PushRecord(
            prototype_class=c, prototype_index=slot,
            source_sample_id=int(best_id[j]),
            similarity=float(np.clip(best_sim[j], -1.0, 1.0)),
            epoch=int(epoch))
        bank.provenance[j] = rec
        records.append(rec)
    protos[:] = best_latent
    return records


# ---------------------------------------------------------------------------
# convex last-layer fit


def _offclass_mask(num_classes: int, per_class: int) -> np.ndarray:
    cols = np.arange(num_classes * per_class) // per_class
    return cols[None, :] != np.arange(num_classes)[:, None]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _head_objective(weights, sims, labels, off_mask, l1_coef) -> float:
    logits = sims @ weights.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1)) + logits.max(axis=1)
    ce = float(np.mean(lse - logits[np.arange(len(labels)), labels]))
    return ce + l1_coef * float(np.abs(weights[off_mask]).sum())


def _prox_head_fit(sims, labels, weights0, per_class, l1_coef, max_iters,
                   tol) -> tuple:
    """Proximal-gradient fit of the class-connection matrix.

    Gradient steps on the mean cross-entropy at 1/L (L from the spectral
    norm of the similarity matrix), soft-thresholding off-class entries
    only.  Backtracking halves the step if the composite objective fails
    to decrease, so the trace is monotone by construction.
    """
    n, _ = sims.shape
    num_classes = weights0.shape[0]
    off = _offclass_mask(num_classes, per_class)
    w = weights0.copy()

    sigma = np.linalg.svd(sims, compute_uv=False)[0] if n else 0.0
    lipschitz = max(sigma * sigma / (2.0 * max(n, 1)), 1e-12)
    base_step = 1.0 / lipschitz

    obj = _head_objective(w, sims, labels, off, l1_coef)
    trace = [obj]
    converged = False
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        probs = _softmax_rows(sims @ w.T)
        probs[np.arange(n), labels] -= 1.0
        grad = probs.T @ sims / n

        eta = base_step
        while True:
            cand = w - eta * grad
            thr = eta * l1_coef
            cand = np.where(off, np.sign(cand) * np.maximum(np.abs(cand) - thr, 0.0),
                            cand)
            new_obj = _head_objective(cand, sims, labels, off, l1_coef)
            if new_obj <= obj:
                break
            if eta <= 1e-18:  # cannot descend further: numerical optimum
                cand, new_obj = w, obj
                break
            eta *= 0.5

        drop = obj - new_obj
        w, obj = cand, new_obj
        trace.append(obj)
        if drop < tol:
            converged = True
            break

    info = {"converged": converged, "iterations": iterations,
            "objective_initial": trace[0], "objective": obj, "trace": trace}
    return w, info


def optimize_last_layer(model, data, l1_coef: float = 0.01,
                        max_iters: int = 500, tol: float = 1e-9) -> tuple:
    """Convex re-fit of the head with backbone and prototypes frozen.

    Returns (model, info); info carries the monotone objective trace and
    a `converged` flag — hitting max_iters is reported, never raised.
    """
    _require_nonempty(data)
    sims = embed_all(model, data.train_values) @ model.bank.vectors.data.T
    weights, info = _prox_head_fit(sims, data.train_labels, model.head.data,
                                   model.bank.per_class, l1_coef, max_iters,
                                   tol)
    model.head.data[:] = weights
    return model, info


# ---------------------------------------------------------------------------
# orchestration


def _segments(span, push_set) -> list:
    """Split an epoch range into runs that each end at a push epoch."""
    out, start = [], None
    for e in span:
        if start is None:
            start = e
        if e in push_set:
            out.append(range(start, e + 1))
            start = None
    if start is not None:
        out.append(range(start, span[-1] + 1))
    return out


_STAGE_OPS = {
    "warm": run_warm_stage,
    "secondary_warm": run_secondary_warm_stage,
    "joint": run_joint_stage,
}


def train(config: TrainConfig, dataset, model: ProtoEEGNet = None,
          out_dir=None) -> tuple:
    """Full schedule: warm, secondary warm, joint, with push + convex fit
    after every epoch named in `push_epochs`.

    `dataset` is a TrainData bundle or a (samples, manifest) pair.  Returns
    (model, TrainHistory).  With `out_dir` set, writes `history.jsonl` and a
    checkpoint at every push epoch.
    """
    if isinstance(dataset, TrainData):
        data = dataset
    else:
        samples, manifest = dataset
        data = TrainData.from_dataset(samples, manifest)
    _require_nonempty(data)
    if model is None:
        model = ProtoEEGNet.initialize(seed=config.seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    history = TrainHistory()
    push_set = set(config.push_epochs)

    for stage, span in stage_spans(config).items():
        if not span:
            continue
        op = _STAGE_OPS[stage]
        for seg in _segments(span, push_set):
            op(model, data, config, seg, rng=rng, history=history.records)
            last = seg[-1]
            if last not in push_set:
                continue
            pushes = push_prototypes(model, data, config, epoch=last)
            model, info = optimize_last_layer(
                model, data, l1_coef=config.coefficients.l1,
                max_iters=config.last_layer_max_iters,
                tol=config.last_layer_tol)
            if not info["converged"]:
                history.warnings.append(
                    f"last-layer fit hit max_iters={config.last_layer_max_iters} "
                    f"at epoch {last} (objective {info['objective']:.6g})")
            rec = history.records[-1]
            rec["push"] = [p.to_dict() for p in pushes]
            rec["convex"] = {"converged": info["converged"],
                             "iterations": info["iterations"],
                             "objective_initial": info["objective_initial"],
                             "objective": info["objective"]}
            rec["val"] = _validation_metrics(model, data)
            if out_dir is not None:
                save_model(model, out_dir / f"checkpoint_epoch{last:03d}.pegm")

    if len(history.records) != config.num_train_epochs:
        raise ConfigurationError(
            f"history covers {len(history.records)} epochs, expected "
            f"{config.num_train_epochs}")
    if out_dir is not None:
        history.save(out_dir / "history.jsonl")
    return model, history
