"""Blob-task ablations over seeds: clip updates vs T, and temperature.

    python3 scripts/blobs_ablation.py clip --timesteps 2 4 8 16
    python3 scripts/blobs_ablation.py temperature --temperatures 0.5 1 2 4 8
"""
import argparse
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from spikeadapt.experiments import BlobsTask, blobs_adapt_config, prepare_blobs, run_stream, static_accuracy


@dataclass
class Config:
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    timesteps: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    temperatures: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0, 8.0])


def clip_ablation(cfg: Config, preps) -> list[dict]:
    rows = []
    for T in cfg.timesteps:
        acc = {"source": [], "bn-only": [], "affine": [], "affine+clip": []}
        for prep in preps:
            acc["source"].append(static_accuracy(prep.snn, prep.corrupted, T))
            acc["bn-only"].append(run_stream(prep.snn, prep.corrupted, blobs_adapt_config(timesteps=T, mode="bn-stats-only")).accuracy)
            for subset in ("affine", "affine+clip"):
                acc[subset].append(run_stream(prep.snn, prep.corrupted, blobs_adapt_config(timesteps=T, param_subset=subset)).accuracy)
        rows.append({"T": T, **{k: float(np.mean(v)) for k, v in acc.items()}})
    return rows


def temperature_ablation(cfg: Config, preps) -> list[dict]:
    rows = []
    for tau in cfg.temperatures:
        runs = [run_stream(p.snn, p.corrupted, blobs_adapt_config(temperature=tau)) for p in preps]
        rows.append({"tau": tau, "accuracy": float(np.mean([r.accuracy for r in runs])),
                     "tail_kl": float(np.mean([r.tail_kl(3) for r in runs]))})
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("study", choices=["clip", "temperature"])
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--timesteps", type=int, nargs="+")
    ap.add_argument("--temperatures", type=float, nargs="+")
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = Config(**{k: v for k, v in vars(args).items() if k in ("seeds", "timesteps", "temperatures") and v})
    preps = [prepare_blobs(BlobsTask(seed=s)) for s in cfg.seeds]
    rows = clip_ablation(cfg, preps) if args.study == "clip" else temperature_ablation(cfg, preps)
    for r in rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": asdict(cfg), "study": args.study, "rows": rows}, fh, indent=1)
