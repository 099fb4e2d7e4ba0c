"""Command-line entry point: synth, extract, train, sample, evaluate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
import zlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .evaluation import (
    EvaluationError,
    altered_connectivity,
    downstream_classify,
    edge_auroc,
    group_average_bec,
    kfold_split,
    make_classifier,
    roi_importance,
)
from .generator import BecError, ConfigError
from .ingest import (
    AtlasMask,
    DataError,
    SynthSpec,
    extract_roi_series,
    load_manifest,
    load_nifti,
    read_matrix,
    save_manifest,
    synth_population,
    with_folds,
    write_matrix,
)
from .schedule import ScheduleError
from .training import (
    CheckpointError,
    NumericalError,
    Trainer,
    TrainConfig,
    PRESETS,
    load_checkpoint,
    resume_trainer,
    sample_bec,
    save_checkpoint,
)

log = logging.getLogger("becdiff")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------- config


def read_config(path: Optional[str], section: str) -> dict:
    """Keys of ``[section]`` in a TOML file (empty when no file is given)."""
    if not path:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib

    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    sub = data.get(section, {})
    if not isinstance(sub, dict):
        raise UsageError(f"config section [{section}] must be a table")
    return sub


def toml_text(section: str, values: dict) -> str:
    lines = [f"[{section}]"]
    for k, v in values.items():
        lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def layered(cls, defaults: dict, file_values: dict, flag_values: dict):
    """defaults < config file < flags; flags left at None are unset."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(file_values) - names
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    merged = {**defaults, **file_values}
    merged.update({k: v for k, v in flag_values.items() if v is not None and k in names})
    return cls(**merged)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_dataclass_flags(parser, cls, skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            # argparse's BooleanOptionalAction would read --no-sma as "sma = False"
            parser.add_argument(_flag(f.name), dest=f.name, action="store_const", const=True,
                                default=None)
            if not f.name.startswith("no_"):
                parser.add_argument(_flag("no_" + f.name), dest=f.name, action="store_const",
                                    const=False)
        elif isinstance(default, list):
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                type=lambda s: [int(x) for x in s.split(",")])
        else:
            parser.add_argument(_flag(f.name), dest=f.name, type=type(default), default=None)


def git_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out: Path, command: str, config: dict, seed, inputs: dict,
                       outputs: list, started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "inputs": inputs,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        "version": git_version(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def subject_seed(seed: int, subject_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(subject_id.encode())]).generate_state(1)[0])


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> list:
    spec = layered(SynthSpec, {}, read_config(args.config, "synth"), vars(args))
    out = Path(args.out)
    records = synth_population(spec)
    folds = kfold_split([r.label for r in records], args.folds, spec.seed)
    records = with_folds(records, folds)
    manifest = out / "manifest.csv"
    save_manifest(records, manifest)
    outputs = [manifest] + sorted(p for p in out.rglob("*.csv") if p != manifest)
    return _finish(out, "synth", dataclasses.asdict(spec), spec.seed, {}, outputs)


def cmd_extract(args) -> list:
    cfg = {"discard": 10, **read_config(args.config, "extract")}
    if args.discard is not None:
        cfg["discard"] = args.discard
    atlas = AtlasMask.from_labels(load_nifti(args.atlas))
    series = extract_roi_series(load_nifti(args.volume), atlas, int(cfg["discard"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / (args.name or "rough.csv")
    write_matrix(target, series.values)
    return _finish(out, "extract", cfg, None, {"volume": args.volume, "atlas": args.atlas}, [target])


def train_config_from_args(args) -> TrainConfig:
    base = dict(PRESETS[args.preset]) if args.preset else {}
    flags = vars(args).copy()
    cfg = layered(TrainConfig, base, read_config(args.config, "train"), flags)
    cfg.validate()
    return cfg


def _split(records, test_fold: int):
    if test_fold < 0:
        return records, []
    train = [r for r in records if r.fold != test_fold]
    test = [r for r in records if r.fold == test_fold]
    if not train:
        raise UsageError(f"no training subjects outside fold {test_fold}")
    return train, test


def cmd_train(args) -> list:
    records = load_manifest(args.manifest, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = _split(records, args.test_fold)
    if args.resume:
        trainer = resume_trainer(args.resume, train)
        cfg = trainer.cfg
    else:
        cfg = train_config_from_args(args)
        classes = sorted({r.label for r in records})
        trainer = Trainer(cfg, train, classes)
        metrics = out / "metrics.jsonl"
        if metrics.exists():
            metrics.unlink()
    (out / "config.toml").write_text(toml_text("train", dataclasses.asdict(cfg)))
    epochs = args.epochs_to_run if args.epochs_to_run is not None else cfg.epochs - trainer.epoch
    trainer.fit(epochs=epochs, run_dir=out, max_steps=args.max_steps)
    final = out / "checkpoints" / "final.pt"
    save_checkpoint(trainer, final)
    outputs = [out / "config.toml", out / "metrics.jsonl"] + sorted((out / "checkpoints").glob("*.pt"))
    return _finish(out, "train", dataclasses.asdict(cfg), cfg.seed,
                   {"manifest": str(args.manifest), "resume": args.resume}, outputs)


def cmd_sample(args) -> list:
    models = load_checkpoint(args.checkpoint)
    cfg = models.cfg
    records = load_manifest(args.manifest, threads=args.threads)
    if args.fold is not None:
        records = [r for r in records if r.fold == args.fold]
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sched = cfg.schedule()
    outputs = []
    rows = ["id,label,fold,f0_path,bec_path,bec_std_path"]
    for r in records:
        res = sample_bec(r.rough, models, sched, subject_seed(seed, r.id), args.n_samples)
        f0p, becp = out / f"{r.id}_f0.csv", out / f"{r.id}_bec.csv"
        write_matrix(f0p, res.f0)
        write_matrix(becp, res.bec)
        outputs += [f0p, becp]
        stdp = ""
        if res.bec_std is not None:
            write_matrix(out / f"{r.id}_bec_std.csv", res.bec_std)
            outputs.append(out / f"{r.id}_bec_std.csv")
            stdp = f"{r.id}_bec_std.csv"
        rows.append(f"{r.id},{r.label},{r.fold},{f0p.name},{becp.name},{stdp}")
    index = out / "samples.csv"
    index.write_text("\n".join(rows) + "\n")
    outputs.append(index)
    return _finish(out, "sample", {"n_samples": args.n_samples, "fold": args.fold}, seed,
                   {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)}, outputs)


def _read_samples(samples_dir: Path) -> dict:
    import csv

    index = samples_dir / "samples.csv"
    if not index.exists():
        raise DataError(f"{index} not found; run `sample` first")
    out = {}
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["id"]] = (row["label"], read_matrix(samples_dir / row["bec_path"]))
    return out


def cmd_evaluate(args) -> list:
    cfg = {"classifier": "linear-margin", "k": 5, "threshold": 0.1, "top_k": 10,
           **read_config(args.config, "evaluate")}
    for key in ("classifier", "k", "threshold", "top_k"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    seed = args.seed if args.seed is not None else 0
    samples = _read_samples(Path(args.samples))
    records = load_manifest(args.manifest, threads=args.threads)
    truth = {r.id: r.true_bec for r in records}
    ids = sorted(samples)
    labels = {i: samples[i][0] for i in ids}
    becs = {i: samples[i][1] for i in ids}
    if args.classes:
        classes = args.classes.split(",")
    else:
        classes = []
        for r in records:
            if r.label not in classes:
                classes.append(r.label)
    classes = [c for c in classes if any(labels[i] == c for i in ids)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    metrics: dict = {}
    avg = {}
    for c in classes:
        avg[c] = group_average_bec([becs[i] for i in ids if labels[i] == c], cfg["threshold"])
        p = out / f"bec_avg_{c}.csv"
        write_matrix(p, avg[c])
        outputs.append(p)

    top = {}
    importance_rows = ["task,roi,score,top"]
    for a_i, early in enumerate(classes):
        for late in classes[a_i + 1:]:
            key = f"{early}vs{late}"
            sel = [i for i in ids if labels[i] in (early, late)]
            X = np.stack([becs[i] for i in sel])
            y = [labels[i] for i in sel]
            folds = kfold_split(y, cfg["k"], seed)
            report = downstream_classify(X, y, cfg["classifier"], cfg["k"], seed, folds=folds)
            metrics[key] = {cfg["classifier"]: report.to_dict()}
            alt = altered_connectivity(avg[early], avg[late], cfg["top_k"])
            p = out / f"delta_{early}_{late}.csv"
            write_matrix(p, alt.delta)
            outputs.append(p)
            top[key] = alt.to_dict()
            scores = np.zeros(X.shape[-1])
            for f in range(cfg["k"]):
                test = folds == f
                clf = make_classifier(cfg["classifier"], seed).fit(
                    X[~test], [lab for lab, m in zip(y, test) if not m])
                scores += roi_importance(clf, X[test], [lab for lab, m in zip(y, test) if m]).scores
            scores /= cfg["k"]
            order = sorted(range(len(scores)), key=lambda r: (-scores[r], r))
            n_top = -(-len(scores) // 10)
            for r in range(len(scores)):
                importance_rows.append(f"{key},{r},{scores[r]!r},{int(r in order[:n_top])}")

    recov = [edge_auroc(becs[i], truth[i]) for i in ids if truth.get(i) is not None]
    recov = [v for v in recov if v is not None]
    if recov:
        metrics["edge_recovery_auroc"] = float(np.mean(recov))

    for name, payload in (("metrics.json", metrics), ("top_connections.json", top)):
        p = out / name
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        outputs.append(p)
    p = out / "roi_importance.csv"
    p.write_text("\n".join(importance_rows) + "\n")
    outputs.append(p)
    return _finish(out, "evaluate", cfg, seed,
                   {"samples": str(args.samples), "manifest": str(args.manifest)}, outputs)


_STARTED = {}


def _finish(out: Path, command: str, config: dict, seed, inputs: dict, outputs: list) -> list:
    write_run_manifest(out, command, config, seed, inputs, outputs,
                       _STARTED.get("t", datetime.now(timezone.utc).isoformat()))
    return outputs


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="TOML file; sections named by command")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="data-loading threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="becdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesise a VAR(1) population")
    add_dataclass_flags(s, SynthSpec, skip=("seed",))
    s.add_argument("--folds", type=int, default=5)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", parents=[common], help="atlas-average a 4D NIfTI volume")
    e.add_argument("--volume", required=True)
    e.add_argument("--atlas", required=True)
    e.add_argument("--discard", type=int, default=None)
    e.add_argument("--name", default=None, help="output file name (default rough.csv)")
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", parents=[common], help="train generator and discriminator")
    t.add_argument("--manifest", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default=None)
    t.add_argument("--test-fold", type=int, default=0, help="held-out fold; -1 trains on all")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--epochs-to-run", type=int, default=None)
    t.add_argument("--max-steps", type=int, default=None)
    add_dataclass_flags(t, TrainConfig, skip=("seed",))
    t.set_defaults(func=cmd_train)

    sm = sub.add_parser("sample", parents=[common], help="denoise subjects and estimate BECs")
    sm.add_argument("--checkpoint", required=True)
    sm.add_argument("--manifest", required=True)
    sm.add_argument("--n-samples", type=int, default=1)
    sm.add_argument("--fold", type=int, default=None, help="only subjects in this fold")
    sm.set_defaults(func=cmd_sample)

    ev = sub.add_parser("evaluate", parents=[common], help="metrics and group-level analysis")
    ev.add_argument("--samples", required=True, help="directory written by `sample`")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--classes", default=None, help="comma-separated class order, early to late")
    ev.add_argument("--classifier", choices=["linear-margin", "connectivity-cnn"], default=None)
    ev.add_argument("--k", type=int, default=None)
    ev.add_argument("--threshold", type=float, default=None)
    ev.add_argument("--top-k", dest="top_k", type=int, default=None)
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # result values never depend on --threads; compute stays single-threaded
    torch.set_num_threads(1)
    _STARTED["t"] = datetime.now(timezone.utc).isoformat()
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BecError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, ScheduleError, CheckpointError, EvaluationError,
            UsageError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
