"""Command line: ``srlrnn {simulate,preprocess,train,evaluate,sweep-epsilon}``.

Settings come from built-in defaults, then an optional JSON or YAML config
file (``--config``), then command-line flags, later sources winning. The
file holds one section per command plus an optional top-level ``seed``::

    seed: 3
    simulate: {n: 5000, p_noise: 0.3, model: {dose: 0.5}}
    train: {data: cohort.jsonl, epsilon: 0.5, epochs: 12}

Unknown keys are rejected. Every invocation writes into a fresh
timestamped directory under ``$SRLRNN_OUTPUT_ROOT`` (default ``runs``)
together with ``config.json``, the fully resolved settings.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from .cohort import DoctorPolicy, PatientModel, sample_cohort
from .etl import (DataError, PreprocessSettings, preprocess_records, preprocess_trajectories, read_code_map,
                  read_extract, read_jsonl, write_jsonl)
from .metrics import write_csv
from .pipeline import (SWEEP_FIELDS, SweepSettings, evaluate, load_state, save_state, summarize_sweep,
                       sweep_cell, train_policy)
from .srl import TRACE_FIELDS, TrainConfig

log = logging.getLogger("srlrnn")

OUTPUT_ROOT_ENV = "SRLRNN_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _model_defaults() -> dict:
    return {f.name: f.default for f in dataclasses.fields(PatientModel)
            if f.name not in ("effects", "obs_matrix")}


def _train_defaults() -> dict:
    return TrainConfig().to_dict()


DEFAULTS = {
    "simulate": {"n": 5000, "seed": 0, "p_noise": 0.3, "output": None, "model": _model_defaults()},
    "preprocess": {"input": None, "output": None, "code_map": None,
                   **dataclasses.asdict(PreprocessSettings())},
    "train": {"data": None, "validation": None, "resume": None, **_train_defaults()},
    "evaluate": {"checkpoint": None, "data": None, "bins": 50, "threshold": None, "doctor": False},
    "sweep-epsilon": {"epsilons": [0.0, 0.25, 0.5, 0.75, 1.0], "seeds": [0, 1, 2, 3, 4],
                      **dataclasses.asdict(SweepSettings()), "train": _train_defaults(),
                      "model": _model_defaults()},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    return doc


def resolve(command: str, file_doc: dict, flags: dict, assignments: List[str]) -> dict:
    """Defaults, then the file section, then flags and ``--set`` assignments."""
    known = set(DEFAULTS) | {"seed"}
    unknown = set(file_doc) - known
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS[command])
    if "seed" in file_doc:
        if "seed" in cfg:
            cfg["seed"] = file_doc["seed"]
        elif "seeds" in cfg:
            cfg["seeds"] = [file_doc["seed"]]
    cfg = _merge(cfg, file_doc.get(command) or {}, "")
    cfg = _merge(cfg, {k: v for k, v in flags.items() if v is not None}, "")
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node: Dict = {}
        leaf = node
        parts = key.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = value
        cfg = _merge(cfg, node, "")
    return cfg


def make_run_dir(command: str, root: Optional[str] = None) -> Path:
    root = Path(root or os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for n in range(1000):
        path = root / (f"{command}-{stamp}" + (f"-{n}" if n else ""))
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            continue
    raise OSError(f"could not create a run directory under {root}")


def _write_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"missing required setting {key!r}")
    return cfg[key]


def _train_config(cfg: dict) -> TrainConfig:
    keys = set(_train_defaults())
    try:
        return TrainConfig.from_dict({k: v for k, v in cfg.items() if k in keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training settings: {exc}") from exc


def _patient_model(params: dict) -> PatientModel:
    try:
        return PatientModel(**params)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulator settings: {exc}") from exc


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def _precheck(command: str, cfg: dict) -> None:
    """Cheap validation done before a run directory is created."""
    if command == "simulate" and (not isinstance(cfg["n"], int) or cfg["n"] < 1):
        raise UsageError(f"n must be a positive integer, got {cfg['n']!r}")
    if command == "sweep-epsilon":
        if cfg["n_admissions"] < 10:
            raise UsageError("n_admissions must be at least 10")
        for eps in cfg["epsilons"]:
            if not 0.0 <= float(eps) <= 1.0:
                raise UsageError(f"epsilon {eps} outside [0, 1]")
    if command == "train" and not cfg["resume"]:
        _train_config(cfg)


def cmd_simulate(cfg: dict, run_dir: Path) -> None:
    model = _patient_model(cfg["model"])
    try:
        doctor = DoctorPolicy(cfg["p_noise"], model.n_meds)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cohort = sample_cohort(model, doctor, cfg["n"], cfg["seed"])
    out = Path(cfg["output"]) if cfg["output"] else run_dir / "cohort.jsonl"
    write_jsonl(cohort, out)
    survival = float(np.mean([t.survived for t in cohort]))
    mean_len = float(np.mean([t.length for t in cohort]))
    _write_json(run_dir / "summary.json", {"n": len(cohort), "survival_rate": survival, "mean_length": mean_len,
                                           "output": str(out)})
    print(f"n={len(cohort)} survival_rate={survival:.4f} mean_length={mean_len:.3f} -> {out}")


def cmd_preprocess(cfg: dict, run_dir: Path) -> None:
    src = Path(_require(cfg, "input"))
    keys = set(dataclasses.asdict(PreprocessSettings()))
    settings = PreprocessSettings(**{k: v for k, v in cfg.items() if k in keys})
    out = Path(cfg["output"]) if cfg["output"] else run_dir / "admissions.jsonl"
    if src.is_dir():
        code_map = read_code_map(cfg["code_map"]) if cfg["code_map"] else None
        trajs, vocab, variables, report = preprocess_records(read_extract(src), settings, code_map)
        _write_json(run_dir / "vocabulary.json", {"medications": vocab.medications, "diseases": vocab.diseases,
                                                  "variables": list(variables)})
    else:
        trajs, report = preprocess_trajectories(read_jsonl(src), settings)
    if not trajs:
        raise DataError("every admission was excluded")
    write_jsonl(trajs, out)
    report.write_csv(run_dir / "exclusions.csv")
    excluded = sum(report.excluded.values())
    print(f"retained={report.retained} excluded={excluded} "
          + " ".join(f"{k}={v}" for k, v in sorted(report.excluded.items())) + f" -> {out}")


def cmd_train(cfg: dict, run_dir: Path) -> None:
    data = read_jsonl(_require(cfg, "data"))
    validation = read_jsonl(cfg["validation"]) if cfg["validation"] else []
    ckpt = run_dir / "checkpoint.json"
    resume = None
    if cfg["resume"]:
        try:
            resume = load_state(cfg["resume"])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot resume: {exc}") from exc
        # everything but the epoch budget comes from the checkpoint
        config = TrainConfig.from_dict({**resume.config.to_dict(), "epochs": cfg["epochs"]})
    else:
        config = _train_config(cfg)
    _write_json(run_dir / "config.json", {"command": "train", **cfg, "resolved_train_config": config.to_dict()})

    def checkpoint(state):
        save_state(state, ckpt)
        write_csv(run_dir / "metrics.csv", TRACE_FIELDS, [[r[f] for f in TRACE_FIELDS] for r in state.trace])

    state = train_policy(config, data, validation, resume=resume, on_epoch=checkpoint)
    checkpoint(state)
    last = state.trace[-1] if state.trace else None
    msg = f"epochs={state.epochs_done}"
    if last:
        msg += f" td_error={last['mean_td_error']:.5f} return={last['mean_return']:.3f} jaccard={last['jaccard']:.4f}"
    print(msg + f" -> {ckpt}")


def cmd_evaluate(cfg: dict, run_dir: Path) -> None:
    try:
        state = load_state(_require(cfg, "checkpoint"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from exc
    data = read_jsonl(_require(cfg, "data"))
    try:
        ev = evaluate(state, data, int(cfg["bins"]), cfg["threshold"], bool(cfg["doctor"]))
    except ValueError as exc:
        raise DataError(f"checkpoint and data do not match: {exc}") from exc
    write_csv(run_dir / "jaccard.csv", ("admission_id", "jaccard"),
              zip(ev.patient_ids, ev.per_patient_jaccard.tolist()))
    write_csv(run_dir / "mortality_curve.csv", ("bin_center", "rate", "support"),
              zip(ev.mortality.centers.tolist(), ev.mortality.rates.tolist(), ev.mortality.support.tolist()))
    write_csv(run_dir / "difference_curve.csv", ("difference", "rate", "support"),
              zip(ev.difference.values.tolist(), ev.difference.rates.tolist(), ev.difference.support.tolist()))
    write_csv(run_dir / "returns.csv", ("quantity", "value"), [
        ("observed_return", ev.observed_return),
        ("policy_start_q", ev.policy_start_q),
        ("doctor_start_q", ev.doctor_start_q),
        ("policy_expected_q", ev.policy_expected_q),
    ])
    summary = ev.summary()
    _write_json(run_dir / "summary.json", summary)
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))


def cmd_sweep(cfg: dict, run_dir: Path) -> None:
    base = _train_config(cfg["train"])
    model = _patient_model(cfg["model"])
    settings = SweepSettings(**{k: cfg[k] for k in dataclasses.asdict(SweepSettings())})
    rows = []
    for seed in cfg["seeds"]:
        for eps in cfg["epsilons"]:
            row = sweep_cell(float(eps), int(seed), base, settings, model)
            rows.append(row)
            log.info("epsilon=%.2f seed=%d survival=%.4f jaccard=%.4f", eps, seed, row["true_survival"], row["jaccard"])
            write_csv(run_dir / "sweep_runs.csv", SWEEP_FIELDS, [[r[f] for f in SWEEP_FIELDS] for r in rows])
    summary = summarize_sweep(rows)
    fields = tuple(summary[0])
    write_csv(run_dir / "sweep_summary.csv", fields, [[r[f] for f in fields] for r in summary])
    print("epsilon  survival  jaccard  est_mortality")
    for r in summary:
        print(f"{r['epsilon']:7.2f}  {r['true_survival_mean']:8.4f}  {r['jaccard_mean']:7.4f}  "
              f"{r['estimated_mortality_mean']:13.4f}")


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep-epsilon": cmd_sweep,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srlrnn", description="Supervised actor-critic treatment recommendation.")
    p.add_argument("--output-root", help=f"run directory root (default ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON or YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any setting (dotted keys, JSON values)")

    sp = sub.add_parser("simulate", help="write a synthetic cohort")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--p-noise", dest="p_noise", type=float)
    sp.add_argument("--output")

    sp = sub.add_parser("preprocess", help="CSV extract or JSONL to trajectory JSONL")
    common(sp)
    sp.add_argument("--input")
    sp.add_argument("--output")
    sp.add_argument("--code-map", dest="code_map")
    sp.add_argument("--top-meds", dest="top_meds", type=int)
    sp.add_argument("--top-diseases", dest="top_diseases", type=int)
    sp.add_argument("--knn", type=int)

    sp = sub.add_parser("train", help="fit actor and critic")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--validation")
    sp.add_argument("--resume", help="checkpoint.json to continue from")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("evaluate", help="offline metrics of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--bins", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--doctor", action="store_true", default=None,
                    help="score the logged prescriptions instead of the policy")

    sp = sub.add_parser("sweep-epsilon", help="train and score policies over an epsilon grid")
    common(sp)
    sp.add_argument("--epsilons", type=lambda s: [float(x) for x in s.split(",")])
    sp.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")])
    sp.add_argument("--n-admissions", dest="n_admissions", type=int)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    run_dir = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        flags = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "set", "output_root", "verbose")}
        file_doc = load_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_doc, flags, args.set)
        _precheck(args.command, cfg)
        run_dir = make_run_dir(args.command, args.output_root)
        if args.command != "train":
            _write_json(run_dir / "config.json", {"command": args.command, **cfg})
        COMMANDS[args.command](cfg, run_dir)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if run_dir is not None:
            print(f"run directory: {run_dir}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
