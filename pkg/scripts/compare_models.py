"""Train each model family on one dataset across seeds and print aggregate metrics.

Example::

    python3 scripts/compare_models.py out/data/medium.armd --config configs/desk.json --seeds 3
"""

from __future__ import annotations

import argparse
import json
import time

from armopo import metrics
from armopo.config import load_config
from armopo.data import read_dataset, split
from armopo.models import train_model
from armopo.seeding import derive_seed


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("dataset", help="a .armd dataset file")
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--kinds", default="dmdn,darmdn,ensemble")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--cell", type=int, default=0, help="index of the model grid cell to use")
    args = p.parse_args(argv)

    cfg = load_config(args.config)
    ds = read_dataset(args.dataset)
    for k in range(args.seeds):
        seed = derive_seed(cfg.seed, "compare", k)
        train, val = split(ds, cfg.data.val_fraction, seed)
        for kind in args.kinds.split(","):
            t0 = time.perf_counter()
            model, _ = train_model(train, val, cfg.model.cells(kind)[args.cell], seed)
            agg = metrics.evaluate_model(model, val).aggregate
            row = {"seed": k, "kind": kind, "seconds": round(time.perf_counter() - t0, 1),
                   **{m: agg[m] for m in ("r2", "lr", "or", "ks")}}
            print(json.dumps(row), flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
