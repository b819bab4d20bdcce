"""Retained-buffer count and gradient agreement of online vs BPTT as T grows."""
import argparse
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from spikeadapt.adapt import InstantEntropy, MemoryProbe, bptt_grad, online_pass, sequence_loss
from spikeadapt.netcore import mlp


@dataclass
class Config:
    seed: int = 0
    sizes: list[int] = field(default_factory=lambda: [16, 32, 32, 10])
    batch: int = 8
    timesteps: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64, 128])
    temperature: float = 4.0


def run(cfg: Config) -> list[dict]:
    rng = np.random.default_rng(cfg.seed)
    net = mlp(cfg.sizes, rng, norm=True)
    x = rng.uniform(0, 1, (cfg.batch, cfg.sizes[0]))
    loss = InstantEntropy(cfg.temperature)
    rows = []
    for T in cfg.timesteps:
        online, tape = MemoryProbe(), MemoryProbe()
        got = online_pass(net, x, T, loss, probe=online).grads
        want = bptt_grad(net, x, T, sequence_loss(loss), detach_reset=True, per_step=True, probe=tape)
        err = max(float(np.abs(got[p] - want[p]).max() / (np.abs(want[p]).max() + 1e-300)) for p in want)
        rows.append({"T": T, "online_buffers": online.peak_buffers, "online_bytes": online.nbytes,
                     "bptt_buffers": tape.peak_buffers, "bptt_bytes": tape.nbytes, "max_rel_err": err})
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = Config(seed=args.seed)
    rows = run(cfg)
    print(f"{'T':>5} {'online':>8} {'bptt':>8} {'rel err':>9}")
    for r in rows:
        print(f"{r['T']:>5} {r['online_buffers']:>8} {r['bptt_buffers']:>8} {r['max_rel_err']:>9.1e}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": asdict(cfg), "rows": rows}, fh, indent=1)
