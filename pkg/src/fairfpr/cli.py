"""``fairfpr`` command line: generate, train, evaluate, sweep, replay.

Every command writes into a run directory holding exactly one
``manifest.json`` with the fully resolved config, input paths, SHA-256
hashes of every output file and the wall-clock duration. ``replay`` re-runs
a manifest into a new directory.

Exit codes: 0 success, 2 config/input error, 3 training divergence,
4 checkpoint/dataset incompatibility, 5 partial sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import synthdata as sd
from .metrics import write_report
from .trainer import TrainConfig, TrainingDiverged, evaluate, load_checkpoint, save_checkpoint, train

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPATIBLE, EXIT_PARTIAL = 0, 2, 3, 4, 5
SWEEP_AXES = ("gamma_u", "p", "alpha")
DEFAULT_GAMMAS = (1e-3, 1e-2, 1e-1)


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def read_json(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"{path}: {e.strerror}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e


def unwrap_manifest(doc):
    """A manifest can stand in for the config it recorded."""
    if isinstance(doc, dict) and "command" in doc and "config" in doc:
        return doc["config"]
    return doc


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config, seed, inputs, started):
    out_dir = Path(out_dir)
    hashes = {
        str(p.relative_to(out_dir)): sha256(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "fairfpr_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": hashes,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def default_out(tag):
    return Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{tag}"


# -- generate ---------------------------------------------------------------

def resolve_generate_config(doc, seed=None):
    doc = dict(unwrap_manifest(doc) or {})
    doc.pop("schema_version", None)
    known = {"groups", "raw_dim", "seed", "holdout_identities_per_group"}
    unknown = set(doc) - known
    if unknown:
        raise CliError(f"unknown generate config fields: {sorted(unknown)}")
    try:
        groups = [sd.GroupSpec.from_dict(g) for g in doc["groups"]] if "groups" in doc else sd.default_specs()
        for g in groups:
            g.validate()
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"invalid group spec: {e}") from e
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "groups": [g.__dict__.copy() for g in groups],
        "raw_dim": int(doc.get("raw_dim", 32)),
        "seed": int(doc.get("seed", 0) if seed is None else seed),
        "holdout_identities_per_group": int(doc.get("holdout_identities_per_group", sd.BENCHMARK_HOLDOUT)),
    }
    return cfg


def run_generate(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = [sd.GroupSpec.from_dict(g) for g in cfg["groups"]]
    try:
        d = sd.generate(specs, cfg["raw_dim"], cfg["seed"])
        sd.save(d, out_dir / "dataset")
        if cfg["holdout_identities_per_group"] > 0:
            tr, ev = sd.split(d, cfg["holdout_identities_per_group"], cfg["seed"])
            sd.save(tr, out_dir / "train")
            sd.save(ev, out_dir / "eval")
    except ValueError as e:
        raise CliError(str(e)) from e
    return d


def cmd_generate(args):
    started = time.time()
    doc = read_json(args.config) if args.config else {}
    cfg = resolve_generate_config(doc, args.seed)
    out = Path(args.out or default_out("generate"))
    run_generate(cfg, out)
    write_manifest(out, "generate", cfg, cfg["seed"], {"config": args.config}, started)
    print(out)
    return EXIT_OK


# -- train ------------------------------------------------------------------

def load_dataset(path):
    try:
        return sd.load(path)
    except OSError as e:
        raise CliError(f"cannot read dataset {path}: {e}") from e
    except ValueError as e:
        raise CliError(str(e)) from e


def resolve_train_config(doc, seed=None):
    doc = dict(unwrap_manifest(doc) or {})
    if seed is not None:
        doc["seed"] = int(seed)
    try:
        cfg = TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid train config: {e}") from e
    return cfg


def run_train(dataset, cfg, out_dir):
    """Train and write ``checkpoint.{json,csv}`` and ``telemetry.ndjson`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tel_path = out_dir / "telemetry.ndjson"
    with open(tel_path, "w", encoding="utf-8") as fh:
        def sink(rec):
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        try:
            state, _ = train(dataset, cfg, telemetry_sink=sink)
        except ValueError as e:
            raise CliError(str(e)) from e
    save_checkpoint(state, out_dir / "checkpoint", seed=cfg.seed)
    return state


def cmd_train(args):
    started = time.time()
    cfg = resolve_train_config(read_json(args.config) if args.config else {}, args.seed)
    dataset = load_dataset(args.dataset)
    out = Path(args.out or default_out("train"))
    try:
        run_train(dataset, cfg, out)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        print(json.dumps(e.record, indent=2), file=sys.stderr)
        return EXIT_DIVERGED
    resolved = {"schema_version": SCHEMA_VERSION, **cfg.to_dict()}
    write_manifest(out, "train", resolved, cfg.seed, {"dataset": str(args.dataset)}, started)
    print(out)
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------

def parse_floats(text):
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise CliError(f"cannot parse number list {text!r}") from e
    if not vals:
        raise CliError("empty number list")
    return vals


def checkpoint_path(path):
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint"
    return p.with_suffix("") if p.suffix in (".json", ".csv") else p


def run_evaluate(ckpt, dataset, gammas, out_dir, pair_seed=0, max_pairs=None):
    """Evaluate a checkpoint and write ``report.json`` and ``roc-<group>.csv``."""
    try:
        state, _ = load_checkpoint(checkpoint_path(ckpt))
    except (OSError, KeyError, ValueError) as e:
        raise CliError(f"cannot load checkpoint {ckpt}: {e}") from e
    if dataset.raw_dim != state.encoder.raw_dim:
        raise CliError(f"dataset raw_dim {dataset.raw_dim} does not match checkpoint input dim "
                       f"{state.encoder.raw_dim}", EXIT_INCOMPATIBLE)
    if len(dataset.groups) < 2:
        raise CliError(f"bias degree needs at least two demographic groups; dataset has {dataset.groups}")
    try:
        report = evaluate(state, dataset, gammas, max_pairs, pair_seed, strict=False)
    except ValueError as e:
        raise CliError(f"evaluation refused: {e}") from e
    write_report(report, out_dir)
    return report


def cmd_evaluate(args):
    started = time.time()
    gammas = parse_floats(args.gammas)
    dataset = load_dataset(args.dataset)
    out = Path(args.out or default_out("evaluate"))
    seed = 0 if args.seed is None else args.seed
    run_evaluate(args.checkpoint, dataset, gammas, out, seed, args.max_pairs)
    cfg = {"schema_version": SCHEMA_VERSION, "gammas": gammas, "pair_seed": seed, "max_pairs": args.max_pairs}
    write_manifest(out, "evaluate", cfg, seed,
                   {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset)}, started)
    print(out)
    return EXIT_OK


# -- sweep ------------------------------------------------------------------

def with_axis(cfg_dict, axis, value):
    d = json.loads(json.dumps(cfg_dict))
    d.setdefault("loss", {})[axis] = value
    return d


def _child(job):
    """Train + evaluate one sweep value; returns ``(value, report_dict | None, error | None)``."""
    value, cfg_dict, train_path, eval_path, gammas, out_dir = job
    try:
        cfg = resolve_train_config(cfg_dict)
        run_train(load_dataset(train_path), cfg, out_dir)
        report = run_evaluate(out_dir, load_dataset(eval_path), gammas, out_dir)
        return value, report.to_dict(), None
    except (CliError, TrainingDiverged, ValueError) as e:
        return value, None, f"{type(e).__name__}: {e}"


def summary_rows(results, gammas):
    groups = sorted({g for _, rep, _ in results if rep for g in rep["groups"]})
    header = ["value"] + [f"acc_{g}" for g in groups] + ["avg", "std"] + [f"delta@{g!r}" for g in gammas] + ["error"]
    rows = []
    for value, rep, err in results:
        if rep is None:
            rows.append([repr(value)] + [""] * (len(header) - 2) + [err])
            continue
        accs = [repr(rep["per_group"][g]["accuracy"]) if g in rep["per_group"] else "" for g in groups]
        deltas = [repr(rep["bias_degree"][repr(g)]) for g in gammas]
        rows.append([repr(value)] + accs + [repr(rep["accuracy_mean"]), repr(rep["accuracy_std"])] + deltas + [""])
    return header, rows


def run_sweep(base_cfg, axis, values, train_path, eval_path, gammas, out_dir, threads=1):
    if axis not in SWEEP_AXES:
        raise CliError(f"axis must be one of {SWEEP_AXES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = resolve_train_config(base_cfg).to_dict()
    jobs = [(v, with_axis(base, axis, v), str(train_path), str(eval_path), list(gammas),
             str(out_dir / f"{axis}={v!r}")) for v in values]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_child, jobs))
    else:
        results = [_child(j) for j in jobs]
    header, rows = summary_rows(results, gammas)
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return results


def cmd_sweep(args):
    started = time.time()
    values = parse_floats(args.values)
    gammas = parse_floats(args.gammas)
    base = read_json(args.config) if args.config else {}
    base = dict(unwrap_manifest(base))
    if args.seed is not None:
        base["seed"] = args.seed
    out = Path(args.out or default_out(f"sweep-{args.axis}"))
    eval_path = args.eval_dataset or args.dataset
    threads = max(1, int(os.environ.get("FAIRFPR_THREADS", "1") or 1))
    results = run_sweep(base, args.axis, values, args.dataset, eval_path, gammas, out, threads)
    resolved = {"schema_version": SCHEMA_VERSION, "base": resolve_train_config(base).to_dict(),
                "axis": args.axis, "values": values, "gammas": gammas}
    write_manifest(out, "sweep", resolved, resolved["base"]["seed"],
                   {"dataset": str(args.dataset), "eval_dataset": str(eval_path)}, started)
    print(out)
    failed = [v for v, rep, _ in results if rep is None]
    if failed:
        print(f"error: {len(failed)} sweep value(s) failed: {failed}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# -- replay -----------------------------------------------------------------

def replay(manifest_path, out_dir):
    """Re-run the command recorded in a manifest into ``out_dir``; returns the exit code."""
    m = read_json(manifest_path)
    cmd, cfg, inputs = m.get("command"), m.get("config"), m.get("inputs", {})
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    if cmd == "generate":
        cfg_path = out_dir.parent / (out_dir.name + ".config.json")
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        argv = ["generate", "--config", str(cfg_path), "--out", str(out_dir)]
    elif cmd == "train":
        argv = ["train", "--config", str(manifest_path), "--dataset", inputs["dataset"], "--out", str(out_dir)]
    elif cmd == "evaluate":
        argv = ["evaluate", "--checkpoint", inputs["checkpoint"], "--dataset", inputs["dataset"],
                "--gammas", ",".join(repr(g) for g in cfg["gammas"]), "--seed", str(cfg["pair_seed"]),
                "--out", str(out_dir)]
        if cfg.get("max_pairs") is not None:
            argv += ["--max-pairs", str(cfg["max_pairs"])]
    elif cmd == "sweep":
        base_path = out_dir.parent / (out_dir.name + ".base.json")
        base_path.write_text(json.dumps(cfg["base"]), encoding="utf-8")
        argv = ["sweep", "--config", str(base_path), "--dataset", inputs["dataset"],
                "--eval-dataset", inputs["eval_dataset"], "--axis", cfg["axis"],
                "--values", ",".join(repr(v) for v in cfg["values"]),
                "--gammas", ",".join(repr(g) for g in cfg["gammas"]), "--out", str(out_dir)]
    else:
        raise CliError(f"{manifest_path}: unknown command {cmd!r}")
    return main(argv)


def cmd_replay(args):
    return replay(args.manifest, args.out or default_out("replay"))


def build_parser():
    ap = argparse.ArgumentParser(prog="fairfpr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fairfpr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic grouped dataset (+ train/eval split)")
    g.add_argument("--config", help="JSON generator config (groups, raw_dim, seed, holdout_identities_per_group)")
    g.add_argument("--out", help="run directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an encoder + classifier")
    t.add_argument("--dataset", required=True, help="dataset path prefix (e.g. runs/x/train)")
    t.add_argument("--config", help="JSON train config or a previous manifest")
    t.add_argument("--out", help="run directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="fairness report for a checkpoint")
    e.add_argument("--checkpoint", required=True, help="run directory or checkpoint path")
    e.add_argument("--dataset", required=True)
    e.add_argument("--gammas", default=",".join(repr(x) for x in DEFAULT_GAMMAS))
    e.add_argument("--out", help="run directory")
    e.add_argument("--seed", type=int, help="pair sampling seed")
    e.add_argument("--max-pairs", type=int, help="cap per group and polarity")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="train+evaluate over one loss hyperparameter")
    s.add_argument("--dataset", required=True, help="training dataset prefix")
    s.add_argument("--eval-dataset", help="evaluation dataset prefix (default: --dataset)")
    s.add_argument("--config", help="base JSON train config")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True)
    s.add_argument("--gammas", default="0.01")
    s.add_argument("--out", help="run directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("replay", help="re-run a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="run directory")
    r.set_defaults(func=cmd_replay)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
