"""Toy detection: mAP of bn-only, unweighted and confidence-weighted adaptation."""
import argparse
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from spikeadapt.detect import WeightingParams
from spikeadapt.experiments import DETECT_ADAPT, DetectionTask, detection_stream_map, prepare_detection


@dataclass
class Config:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    lrs: list[float] = field(default_factory=lambda: [0.003, 0.01, 0.03])
    corruption: str = "cloudy"


def run(cfg: Config) -> list[dict]:
    rows = []
    for s in cfg.seeds:
        task = DetectionTask(seed=s, corruption=cfg.corruption)
        prep = prepare_detection(task)
        row = {"seed": s, "bn-only": detection_stream_map(prep, task, replace(DETECT_ADAPT, mode="bn-stats-only"), None)}
        for lr in cfg.lrs:
            acfg = replace(DETECT_ADAPT, lr=lr)
            row[f"plain@{lr}"] = detection_stream_map(prep, task, acfg, None)
            row[f"weighted@{lr}"] = detection_stream_map(prep, task, acfg, WeightingParams())
        rows.append(row)
        print(json.dumps(row), flush=True)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    print("mean", json.dumps(mean))
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--corruption", default="cloudy", choices=["cloudy", "foggy"])
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = Config(seeds=args.seeds, corruption=args.corruption)
    rows = run(cfg)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": asdict(cfg), "rows": rows}, fh, indent=1)
