"""Command-line entry point: ``armopo <command> --config run.json --out DIR``.

Output layout under ``--out``::

    data/<regime>.armd, data/refs.json
    models/<regime>/<kind>/cell_<i>/{manifest.json, net_*.ckpt, report.json}
    models/<regime>/<kind>/selected.json
    mopo/<regime>/<kind>/cell_<i>/seed_<s>/{agent/, result.json}
    mopo/<regime>/<kind>/scores.json
    analysis/correlation.{csv,json}
    plots/*.csv
    <command>_manifest.json

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_config
from .nnet import TrainingDivergence

log = logging.getLogger("armopo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig, files) -> None:
    entries = [
        {"path": str(p.relative_to(out)), "sha256": _sha256(p)} for p in sorted(set(files)) if p.is_file()
    ]
    _dump(out / f"{command.replace('-', '_')}_manifest.json", {"command": command, "config": cfg.to_dict(), "files": entries})


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _data_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.data_dir) if cfg.data_dir else out / "data"


def _load_regime(cfg: RunConfig, out: Path, regime: str):
    from .data import read_dataset

    path = _data_dir(cfg, out) / f"{regime}.armd"
    if not path.exists():
        raise ConfigError(f"missing dataset {path}; run gen-data first")
    return read_dataset(path)


def _refs(cfg: RunConfig, out: Path) -> dict:
    path = _data_dir(cfg, out) / "refs.json"
    if not path.exists():
        raise ConfigError(f"missing {path}; run gen-data first")
    return json.loads(path.read_text())


# -- gen-data ---------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path, workers: int = 1) -> list[Path]:
    from .data import make_regime_suite, write_dataset

    suite, refs = make_regime_suite(cfg.env, cfg.seed, cfg.data.regime_config(), cfg.data.sac_config())
    d = out / "data"
    written = []
    for regime, ds in suite.items():
        p = d / f"{regime}.armd"
        p.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(p, ds)
        written.append(p)
    _dump(d / "refs.json", refs)
    written.append(d / "refs.json")
    return written


# -- train-model ------------------------------------------------------------


def _train_cell(cfg_dict: dict, out: str, regime: str, kind: str, i: int) -> str:
    from .data import split
    from .metrics import evaluate_model
    from .models import save_model, train_model
    from .seeding import derive_seed

    cfg = parse_config(cfg_dict)
    outp = Path(out)
    ds = _load_regime(cfg, outp, regime)
    train_ds, val_ds = split(ds, cfg.data.val_fraction, derive_seed(cfg.seed, "split", regime))
    mcfg = cfg.model.cells(kind)[i]
    model, _ = train_model(train_ds, val_ds, mcfg, derive_seed(cfg.seed, "model", regime, kind, i))
    cell_dir = outp / "models" / regime / kind / f"cell_{i}"
    save_model(model, cell_dir, mcfg)
    report = evaluate_model(
        model,
        val_ds,
        ds.traces(cfg.metrics.l_max),
        cfg.metrics,
        np.random.default_rng(derive_seed(cfg.seed, "metrics", regime, kind, i)),
        metadata={"regime": regime, "kind": kind, "cell": i, "model_config": asdict(mcfg)},
    )
    (cell_dir / "report.json").write_text(report.to_json())
    return str(cell_dir)


def _select(cfg: RunConfig, out: Path, regime: str, kind: str) -> dict:
    from .metrics import MetricReport

    base = out / "models" / regime / kind
    n = len(cfg.model.cells(kind))
    scores = []
    for i in range(n):
        rep = MetricReport.from_json((base / f"cell_{i}" / "report.json").read_text())
        v = rep.aggregate[cfg.model.selection]
        scores.append(float("-inf") if v is None or not np.isfinite(v) else float(v))
    best = int(np.argmax(scores))
    sel = {"rule": f"argmax aggregate {cfg.model.selection}", "cell": best, "scores": scores}
    _dump(base / "selected.json", sel)
    return sel


def cmd_train_model(cfg: RunConfig, out: Path, workers: int = 1) -> list[Path]:
    jobs = [
        (cfg.to_dict(), str(out), regime, kind, i)
        for regime in cfg.regimes
        for kind in cfg.model.kinds
        for i in range(len(cfg.model.cells(kind)))
    ]
    for regime in cfg.regimes:
        _load_regime(cfg, out, regime)
    _map(_train_cell, jobs, workers)
    files = []
    for regime in cfg.regimes:
        for kind in cfg.model.kinds:
            _select(cfg, out, regime, kind)
            files += sorted((out / "models" / regime / kind).rglob("*"))
    return files


# -- eval-model -------------------------------------------------------------


def cmd_eval_model(cfg: RunConfig, out: Path, workers: int = 1, model_dir: str | None = None) -> list[Path]:
    from .data import split
    from .metrics import evaluate_model
    from .models import load_model
    from .seeding import derive_seed

    files = []
    targets = []
    if model_dir:
        man = json.loads((Path(model_dir) / "manifest.json").read_text())
        targets.append((cfg.regimes[0], man["kind"], Path(model_dir)))
    else:
        for regime in cfg.regimes:
            for kind in cfg.model.kinds:
                sel = _load_selected(out, regime, kind)
                targets.append((regime, kind, out / "models" / regime / kind / f"cell_{sel['cell']}"))
    for regime, kind, mdir in targets:
        ds = _load_regime(cfg, out, regime)
        _, val_ds = split(ds, cfg.data.val_fraction, derive_seed(cfg.seed, "split", regime))
        model = load_model(mdir)
        report = evaluate_model(
            model, val_ds, ds.traces(cfg.metrics.l_max), cfg.metrics,
            np.random.default_rng(derive_seed(cfg.seed, "eval", regime, kind)),
            metadata={"regime": regime, "kind": kind, "model_dir": _rel(mdir, out)},
        )
        p = out / "eval" / regime / f"{kind}_report.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(report.to_json())
        files.append(p)
    return files


def _rel(path: Path, out: Path) -> str:
    """``path`` relative to ``out`` when inside it, so reports do not embed the run location."""
    try:
        return str(Path(path).resolve().relative_to(out.resolve()))
    except ValueError:
        return str(path)


def _load_selected(out: Path, regime: str, kind: str) -> dict:
    p = out / "models" / regime / kind / "selected.json"
    if not p.exists():
        raise ConfigError(f"missing {p}; run train-model first")
    return json.loads(p.read_text())


# -- run-mopo ---------------------------------------------------------------


def _mopo_job(cfg_dict: dict, out: str, regime: str, kind: str, cell: int, agent_seed: int) -> dict:
    from .agent.mopo import evaluate_online, mopo_train
    from .models import load_model
    from .seeding import derive_seed

    cfg = parse_config(cfg_dict)
    outp = Path(out)
    ds = _load_regime(cfg, outp, regime)
    sel = _load_selected(outp, regime, kind)
    model = load_model(outp / "models" / regime / kind / f"cell_{sel['cell']}")
    mcfg = cfg.mopo_configs()[cell]
    if kind != "ensemble":
        mcfg = replace(mcfg, heuristic="sigma")
    seed = derive_seed(cfg.seed, "mopo", regime, kind, cell, agent_seed)
    res = mopo_train(ds, model, cfg.env, mcfg, seed)
    final, final_std = evaluate_online(
        res.agent, cfg.env, cfg.agent.final_eval_episodes, derive_seed(cfg.seed, "final_eval", agent_seed)
    )
    d = outp / "mopo" / regime / kind / f"cell_{cell}" / f"seed_{agent_seed}"
    res.agent.save(d / "agent")
    summary = {**res.to_dict(), "final_return": final, "final_return_std": final_std, "config": mcfg.to_dict()}
    _dump(d / "result.json", summary)
    return {"cell": cell, "seed": agent_seed, "best_return": res.best_return, "final_return": final}


def cmd_run_mopo(cfg: RunConfig, out: Path, workers: int = 1) -> list[Path]:
    from .agent.mopo import gaussian_ci, normalized_score

    refs = _refs(cfg, out)
    n_cells = len(cfg.mopo_configs())
    jobs = [
        (cfg.to_dict(), str(out), regime, kind, c, s)
        for regime in cfg.regimes
        for kind in cfg.agent.models
        for c in range(n_cells)
        for s in cfg.agent.seeds
    ]
    for regime in cfg.regimes:
        for kind in cfg.agent.models:
            _load_selected(out, regime, kind)
    results = _map(_mopo_job, jobs, workers)
    files, k = [], 0
    for regime in cfg.regimes:
        for kind in cfg.agent.models:
            block = results[k : k + n_cells * len(cfg.agent.seeds)]
            k += len(block)
            cells = []
            for c in range(n_cells):
                rows = [r for r in block if r["cell"] == c]
                rets = [r["final_return"] for r in rows]
                norm = normalized_score(rets, refs["random_ref"], refs["expert_ref"]).tolist()
                mean, half = gaussian_ci(norm)
                rmean, rhalf = gaussian_ci(rets)
                cells.append({
                    "cell": c,
                    "config": cfg.mopo_configs()[c].to_dict(),
                    "seeds": [r["seed"] for r in rows],
                    "returns": rets,
                    "normalized": norm,
                    "normalized_mean": mean,
                    "normalized_ci90": half,
                    "return_mean": rmean,
                    "return_ci90": rhalf,
                })
            best = int(np.argmax([c["normalized_mean"] for c in cells]))
            p = out / "mopo" / regime / kind / "scores.json"
            _dump(p, {"cells": cells, "best_cell": best, "refs": refs})
            files += sorted((out / "mopo" / regime / kind).rglob("*"))
    return files


# -- correlate / export-plots ------------------------------------------------


def _records(cfg: RunConfig, out: Path):
    from .analysis import ExperimentRecord
    from .metrics import MetricReport

    records = []
    for regime in cfg.regimes:
        for kind in cfg.agent.models:
            sel = _load_selected(out, regime, kind)
            rep_path = out / "models" / regime / kind / f"cell_{sel['cell']}" / "report.json"
            score_path = out / "mopo" / regime / kind / "scores.json"
            if not score_path.exists():
                raise ConfigError(f"missing {score_path}; run run-mopo first")
            scores = json.loads(score_path.read_text())
            best = scores["cells"][scores["best_cell"]]
            records.append(ExperimentRecord(kind, regime, MetricReport.from_json(rep_path.read_text()),
                                            best["normalized_mean"], best["seeds"]))
    return records


def cmd_correlate(cfg: RunConfig, out: Path, workers: int = 1) -> list[Path]:
    from .analysis import correlate_study, table_csv, table_json

    rows = correlate_study(_records(cfg, out))
    d = out / "analysis"
    d.mkdir(parents=True, exist_ok=True)
    (d / "correlation.csv").write_text(table_csv(rows))
    (d / "correlation.json").write_text(table_json(rows))
    return [d / "correlation.csv", d / "correlation.json"]


def cmd_export_plots(cfg: RunConfig, out: Path, workers: int = 1) -> list[Path]:
    from .metrics import MetricReport

    d = out / "plots"
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for regime in cfg.regimes:
        for kind in cfg.model.kinds:
            sel = _load_selected(out, regime, kind)
            rep = MetricReport.from_json(
                (out / "models" / regime / kind / f"cell_{sel['cell']}" / "report.json").read_text()
            )
            stem = f"{regime}_{kind}"
            rep.write_histograms_csv(d / f"{stem}_histograms.csv")
            files.append(d / f"{stem}_histograms.csv")
            if rep.curves:
                rep.write_curves_csv(d / f"{stem}_long_horizon.csv")
                files.append(d / f"{stem}_long_horizon.csv")
            scores = out / "mopo" / regime / kind / "scores.json"
            if scores.exists():
                best = json.loads(scores.read_text())["best_cell"]
                lines = ["seed,update,return"]
                for sdir in sorted((out / "mopo" / regime / kind / f"cell_{best}").glob("seed_*")):
                    res = json.loads((sdir / "result.json").read_text())
                    seed = sdir.name.split("_", 1)[1]
                    lines += [f"{seed},{pt['update']},{pt['return']!r}" for pt in res["curve"]]
                p = d / f"{stem}_training_curve.csv"
                p.write_text("\n".join(lines) + "\n")
                files.append(p)
    return files


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "eval-model": cmd_eval_model,
    "run-mopo": cmd_run_mopo,
    "correlate": cmd_correlate,
    "export-plots": cmd_export_plots,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="armopo", description="Offline model-based RL workbench")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="root seed; overrides the config")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--model-dir", help="eval-model: evaluate this checkpoint instead of the selected ones")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        if args.seed is not None:
            cfg = parse_config({**cfg.to_dict(), "seed": args.seed})
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        kwargs = {"model_dir": args.model_dir} if args.command == "eval-model" else {}
        files = COMMANDS[args.command](cfg, out, args.workers, **kwargs)
        _write_manifest(out, args.command, cfg, files)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
