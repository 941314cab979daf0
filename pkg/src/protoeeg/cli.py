"""Command-line interface for the prototype EEG classifier.

Subcommands: synth, preprocess, split, train, eval, push, explain, report.
Every one of them accepts ``--seed``, ``--config`` (a UTF-8 JSON file) and
``--out`` (the run directory; no subcommand writes anywhere else).  Config
resolution is defaults <- file <- command-line flags, key by key; an unknown
key or a value of the wrong type fails fast naming the key.

The resolved configuration, the seed, and SHA-256 checksums of every input
and output artifact land in ``<out>/resolved_config.json``, which is enough
to reproduce a run bit for bit.

Exit codes: 0 success; 1 usage or configuration error; 2 data or file
format error; 3 numeric failure during computation.

``PROTOEEG_BACKEND`` selects the compute backend (``numba`` or ``numpy``)
and ``PROTOEEG_THREADS`` caps compiled-kernel parallelism; both are read
at import time by the kernels module.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import sigproc
from .dataset import (DatasetManifest, EEGSample, SynthConfig,
                      generate_synthetic, load, save)
from .errors import (ConfigurationError, ContractError, DataFormatError,
                     DegenerateInputError, DimensionError, MissingSampleError,
                     NumericError, ProtoeegError, ProvenanceError,
                     UndefinedMetricError, UsageError)
from .evaluation import metrics_from_scores, score_samples
from .explain import explain, global_prototype_report, render_report
from .model import load_model, save_model
from .training import TrainConfig, TrainData, push_prototypes, train

_DATA_ERRORS = (DataFormatError, MissingSampleError, ProvenanceError,
                UndefinedMetricError)
_NUMERIC_ERRORS = (NumericError, DegenerateInputError, DimensionError,
                   ContractError)


# --------------------------------------------------------------------------
# config resolution


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataFormatError(f"config file {p} must hold a JSON object")
    return raw


def _check_type(key: str, value, template) -> None:
    """Reject file values whose JSON type disagrees with the default's."""
    if template is None:
        return
    if isinstance(template, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(template, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(template, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
    elif isinstance(template, str):
        ok = isinstance(value, str)
        want = "a string"
    elif isinstance(template, (list, tuple)):
        ok = isinstance(value, (list, tuple))
        want = "a list"
    elif isinstance(template, dict):
        ok = isinstance(value, dict)
        want = "an object"
    else:
        return
    if not ok:
        raise ConfigurationError(
            f"config key {key!r} expects {want}, got {type(value).__name__}")


def resolve_config(defaults: dict, config_path, overrides: dict) -> dict:
    """defaults <- JSON file <- CLI flags; later sources win key by key.

    Unknown keys in the file and override values that are not None but
    target no known key both fail with the key named.
    """
    merged = dict(defaults)
    for key, value in _load_config_file(config_path).items():
        if key not in merged:
            raise ConfigurationError(f"unknown config key {key!r}")
        _check_type(key, value, merged[key])
        merged[key] = value
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in merged:
            raise ConfigurationError(f"unknown config key {key!r}")
        merged[key] = value
    return merged


def _build(factory, merged: dict):
    try:
        return factory(merged)
    except ProtoeegError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad config value: {exc}") from exc


# --------------------------------------------------------------------------
# run-directory bookkeeping


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _ensure_out(arg) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, command: str, config: dict, inputs: dict) -> None:
    """Echo the run record: resolved config plus input/output checksums."""
    outputs = sorted(p for p in out.rglob("*")
                     if p.is_file() and p.name != "resolved_config.json")
    doc = {
        "command": command,
        "seed": config.get("seed"),
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in sorted(inputs.items())},
        "outputs": {p.relative_to(out).as_posix(): _sha256(p) for p in outputs},
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    (out / "resolved_config.json").write_text(text, "utf-8")


def _dataset_file(arg) -> Path:
    p = Path(arg)
    return p / "dataset.peeg" if p.is_dir() else p


def _model_file(arg) -> Path:
    p = Path(arg)
    if p.is_dir():
        return p / "model.pegm"
    if not p.exists() and p.with_suffix(".pegm").exists():
        return p.with_suffix(".pegm")
    return p


# --------------------------------------------------------------------------
# subcommands


def _cmd_synth(ns) -> None:
    defaults = SynthConfig(n_samples=1).to_dict()
    defaults["n_samples"] = None  # must come from --n or the config file
    merged = resolve_config(defaults, ns.config,
                            {"n_samples": ns.n, "seed": ns.seed})
    if merged["n_samples"] is None:
        raise UsageError("synth needs --n or an 'n_samples' config key")
    cfg = _build(SynthConfig.from_dict, merged)
    samples, manifest = generate_synthetic(cfg)
    out = _ensure_out(ns.out)
    data_path = out / "dataset.peeg"
    save(samples, manifest, data_path)
    _write_resolved(out, "synth", cfg.to_dict(), inputs={})
    print(f"wrote {len(samples)} windows to {data_path}")


def _cmd_preprocess(ns) -> None:
    defaults = {"notch_hz": sigproc.DEFAULT_NOTCH_HZ,
                "notch_q": sigproc.DEFAULT_NOTCH_Q,
                "highpass_hz": sigproc.DEFAULT_HIGHPASS_HZ,
                "highpass_order": sigproc.DEFAULT_HIGHPASS_ORDER,
                "target_fs": sigproc.TARGET_FS,
                "seed": 0}
    merged = resolve_config(defaults, ns.config, {"seed": ns.seed})
    src = Path(ns.input)
    if not src.exists():
        raise DataFormatError(f"input archive {src} does not exist")
    try:
        archive = np.load(src, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read {src} as an .npz archive: {exc}") from exc
    names = set(archive.files)
    if "values" not in names or "sample_rate_hz" not in names:
        raise DataFormatError(
            "input archive needs 'values' (n, time, channel) and 'sample_rate_hz'")
    values = np.asarray(archive["values"], dtype=np.float64)
    if values.ndim != 3:
        raise DataFormatError(
            f"'values' must be (n, time, channel), got shape {values.shape}")
    fs_in = float(np.asarray(archive["sample_rate_hz"]).reshape(-1)[0])
    n = values.shape[0]
    votes = (np.asarray(archive["votes"], dtype=np.int64) if "votes" in names
             else np.zeros(n, dtype=np.int64))
    ids = (np.asarray(archive["ids"], dtype=np.int64) if "ids" in names
           else np.arange(n, dtype=np.int64))
    if votes.shape != (n,) or ids.shape != (n,):
        raise DataFormatError("'votes' and 'ids' must be 1-d with one entry per window")

    samples = []
    for i in range(n):
        window = sigproc.preprocess_window(
            values[i], fs_in,
            notch_hz=merged["notch_hz"], notch_q=merged["notch_q"],
            highpass_hz=merged["highpass_hz"],
            highpass_order=int(merged["highpass_order"]),
            fs_out=merged["target_fs"])
        samples.append(EEGSample(values=window.astype(np.float32),
                                 votes=int(votes[i]), sample_id=int(ids[i])))
    digest = hashlib.sha256(
        json.dumps(merged, sort_keys=True).encode()).hexdigest()
    time_steps, channels = samples[0].values.shape
    manifest = DatasetManifest(
        version=ds.FORMAT_VERSION, sample_count=n, channel_count=channels,
        time_steps=time_steps, sample_rate_hz=float(merged["target_fs"]),
        splits={}, seed=int(merged["seed"]), config_digest=digest)
    out = _ensure_out(ns.out)
    data_path = out / "dataset.peeg"
    save(samples, manifest, data_path)
    _write_resolved(out, "preprocess", merged, inputs={"input": src})
    print(f"preprocessed {n} windows ({fs_in:g} Hz -> {merged['target_fs']:g} Hz) "
          f"to {data_path}")


def _cmd_split(ns) -> None:
    defaults = {"fractions": list(ds.DEFAULT_FRACTIONS), "seed": 0}
    overrides = {"fractions": list(ns.fractions) if ns.fractions else None,
                 "seed": ns.seed}
    merged = resolve_config(defaults, ns.config, overrides)
    data_file = _dataset_file(ns.data)
    samples, old = load(data_file)
    manifest = ds.split(samples, fractions=tuple(merged["fractions"]),
                        seed=int(merged["seed"]))
    # split() only sees samples; acquisition facts carry over from the source
    manifest.sample_rate_hz = old.sample_rate_hz
    manifest.config_digest = old.config_digest
    out = _ensure_out(ns.out)
    data_path = out / "dataset.peeg"
    save(samples, manifest, data_path)
    _write_resolved(out, "split", merged, inputs={"dataset": data_file})
    sizes = {name: len(manifest.ids_for(name)) for name in ("train", "val", "test")}
    print(f"split {len(samples)} windows into {sizes} at {data_path}")


def _cmd_train(ns) -> None:
    defaults = TrainConfig().to_dict()
    merged = resolve_config(defaults, ns.config,
                            {"seed": ns.seed,
                             "num_train_epochs": ns.epochs,
                             "batch_size": ns.batch_size})
    cfg = _build(TrainConfig.from_dict, merged)
    data_file = _dataset_file(ns.data)
    samples, manifest = load(data_file)
    out = _ensure_out(ns.out)
    model, history = train(cfg, (samples, manifest), out_dir=out)
    final = out / "model.pegm"
    save_model(model, final)
    for warning in history.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    _write_resolved(out, "train", cfg.to_dict(), inputs={"dataset": data_file})
    last = history.records[-1]
    tail = ""
    if last.get("val"):
        tail = (f"; val accuracy {last['val']['accuracy']:.3f}, "
                f"val cross-entropy {last['val']['cross_entropy']:.4f}")
    print(f"trained {cfg.num_train_epochs} epochs; model at {final}{tail}")


def _cmd_eval(ns) -> None:
    defaults = {"split": "test", "rounds": 10000, "seed": 0, "filtered": False}
    merged = resolve_config(defaults, ns.config,
                            {"split": ns.split, "rounds": ns.rounds,
                             "seed": ns.seed, "filtered": ns.filtered})
    model_file = _model_file(ns.model)
    model = load_model(model_file)
    data_file = _dataset_file(ns.data)
    samples, manifest = load(data_file)
    wanted = set(manifest.ids_for(str(merged["split"])))
    subset = [s for s in samples if s.sample_id in wanted]
    if not subset:
        raise ConfigurationError(f"split {merged['split']!r} is empty in {data_file}")
    scores = score_samples(model, subset)
    votes = [s.votes for s in subset]
    metrics = metrics_from_scores(scores, votes, rounds=int(merged["rounds"]),
                                  seed=int(merged["seed"]))
    out = _ensure_out(ns.out)
    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", "utf-8")
    score_rows = [{"sample_id": b.sample_id, "p_pos": b.p_pos, "p_neg": b.p_neg,
                   "label": b.label, "votes": int(v)}
                  for b, v in zip(scores, votes)]
    (out / "scores.json").write_text(
        json.dumps(score_rows, indent=2, sort_keys=True) + "\n", "utf-8")
    _write_resolved(out, "eval", merged,
                    inputs={"model": model_file, "dataset": data_file})
    view = "filtered" if merged["filtered"] else "unfiltered"
    lo, hi = metrics[f"ci_{view}"]
    n = metrics["n_filtered"] if view == "filtered" else metrics["n_test"]
    print(f"AUROC ({view}): {metrics['auroc_' + view]:.4f}  "
          f"CI95 [{lo:.4f}, {hi:.4f}]  n={n}")


def _cmd_push(ns) -> None:
    defaults = TrainConfig().to_dict()
    merged = resolve_config(defaults, ns.config, {"seed": ns.seed})
    cfg = _build(TrainConfig.from_dict, merged)
    model_file = _model_file(ns.model)
    model = load_model(model_file)
    data_file = _dataset_file(ns.data)
    samples, manifest = load(data_file)
    data = TrainData.from_dataset(samples, manifest)
    records = push_prototypes(model, data, cfg, epoch=0)
    out = _ensure_out(ns.out)
    save_model(model, out / "model.pegm")
    (out / "push_records.json").write_text(
        json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True) + "\n",
        "utf-8")
    _write_resolved(out, "push", cfg.to_dict(),
                    inputs={"model": model_file, "dataset": data_file})
    print(f"pushed {len(records)} prototypes; model at {out / 'model.pegm'}")


def _cmd_explain(ns) -> None:
    defaults = {"top_k": 3, "seed": 0}
    merged = resolve_config(defaults, ns.config,
                            {"top_k": ns.top_k, "seed": ns.seed})
    model_file = _model_file(ns.model)
    model = load_model(model_file)
    data_file = _dataset_file(ns.data)
    samples, _ = load(data_file)
    sample = next((s for s in samples if s.sample_id == ns.sample_id), None)
    if sample is None:
        raise MissingSampleError(
            f"sample id {ns.sample_id} is not present in {data_file}")
    explanation = explain(model, sample, top_k=int(merged["top_k"]))
    out = _ensure_out(ns.out)
    paths = render_report(explanation, samples, out)
    _write_resolved(out, "explain", merged,
                    inputs={"model": model_file, "dataset": data_file})
    for kind, path in sorted(paths.items()):
        print(f"{kind}: {path}")


def _cmd_report(ns) -> None:
    defaults = {"seed": 0}
    merged = resolve_config(defaults, ns.config, {"seed": ns.seed})
    model_file = _model_file(ns.model)
    model = load_model(model_file)
    data_file = _dataset_file(ns.data)
    samples, manifest = load(data_file)
    doc = global_prototype_report(model, (samples, manifest))
    out = _ensure_out(ns.out)
    (out / "prototype_report.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8")
    _write_resolved(out, "report", merged,
                    inputs={"model": model_file, "dataset": data_file})
    print(f"{len(doc['flagged'])} of {len(doc['prototypes'])} prototypes flagged; "
          f"report at {out / 'prototype_report.json'}")


# --------------------------------------------------------------------------
# parser and dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; the contract is 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="protoeeg",
        description="Prototype-based EEG spike classifier.",
        epilog="Environment: PROTOEEG_BACKEND=numba|numpy selects the compute "
               "backend; PROTOEEG_THREADS caps compiled-kernel parallelism.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                parser_class=_Parser)

    def command(name: str, help_: str, handler):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=None,
                       help="override the seed")
        p.add_argument("--config", default=None, metavar="FILE",
                       help="JSON config file (defaults <- file <- flags)")
        p.add_argument("--out", required=True, metavar="DIR",
                       help="output directory; all writes land here")
        p.set_defaults(handler=handler)
        return p

    p = command("synth", "generate a synthetic labelled dataset", _cmd_synth)
    p.add_argument("--n", type=int, default=None, help="number of windows")

    p = command("preprocess", "notch, high-pass and resample raw windows",
                _cmd_preprocess)
    p.add_argument("--input", required=True, metavar="NPZ",
                   help=".npz with values (n, time, channel) and sample_rate_hz; "
                        "optional votes and ids")

    p = command("split", "re-split an existing dataset", _cmd_split)
    p.add_argument("--data", required=True, help="dataset file or directory")
    p.add_argument("--fractions", type=float, nargs=3, default=None,
                   metavar=("TRAIN", "VAL", "TEST"))

    p = command("train", "run the full training schedule", _cmd_train)
    p.add_argument("--data", required=True, help="dataset file or directory")
    p.add_argument("--epochs", type=int, default=None,
                   help="override num_train_epochs")
    p.add_argument("--batch-size", type=int, default=None,
                   help="override batch_size")

    p = command("eval", "AUROC with bootstrap CIs on a held-out split", _cmd_eval)
    p.add_argument("--model", required=True, help="model file or run directory")
    p.add_argument("--data", required=True, help="dataset file or directory")
    p.add_argument("--split", default=None, choices=("train", "val", "test"))
    p.add_argument("--rounds", type=int, default=None,
                   help="bootstrap rounds (default 10000)")
    p.add_argument("--filtered", action="store_const", const=True, default=None,
                   help="headline the consensus-filtered AUROC")

    p = command("push", "project prototypes onto nearest training latents",
                _cmd_push)
    p.add_argument("--model", required=True, help="model file or run directory")
    p.add_argument("--data", required=True, help="dataset file or directory")

    p = command("explain", "render the prototype evidence report for one sample",
                _cmd_explain)
    p.add_argument("--model", required=True, help="model file or run directory")
    p.add_argument("--data", required=True, help="dataset file or directory")
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--top-k", type=int, default=None,
                   help="prototype rows per class section (default 3)")

    p = command("report", "global prototype quality report", _cmd_report)
    p.add_argument("--model", required=True, help="model file or run directory")
    p.add_argument("--data", required=True, help="dataset file or directory")

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help; keep main() returning an int
        return exc.code if isinstance(exc.code, int) else 0
    if getattr(ns, "handler", None) is None:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        ns.handler(ns)
    except UsageError as exc:
        print(f"{parser.prog} {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"{parser.prog} {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"{parser.prog} {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"{parser.prog} {ns.command}: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
