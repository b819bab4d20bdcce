"""Supervised training of the source ANN on clean data (torch, CPU)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .convert import AnnModel
from .netcore import LayerSpec

BN_EPS = 1e-5


@dataclass
class TrainConfig:
    hidden: list[str] = field(default_factory=lambda: ["d64", "d32"])  # "d<width>" or "c<ch>k<k>s<stride>"
    norm: bool = True
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0


def _parse(tok: str):
    if tok.startswith("d"):
        return ("dense", int(tok[1:]))
    ch, rest = tok[1:].split("k")
    k, s = rest.split("s")
    return ("conv2d", int(ch), int(k), int(s))


class _Net(nn.Module):
    def __init__(self, input_shape, hidden, n_out, norm):
        super().__init__()
        self.blocks = nn.ModuleList()
        shape = tuple(input_shape)
        for tok in hidden:
            spec = _parse(tok)
            if spec[0] == "dense":
                lin = nn.Linear(int(np.prod(shape)), spec[1])
                bn = nn.BatchNorm1d(spec[1]) if norm else None
                shape = (spec[1],)
            else:
                _, ch, k, s = spec
                lin = nn.Conv2d(shape[0], ch, k, stride=s, padding=k // 2)
                bn = nn.BatchNorm2d(ch) if norm else None
                h = (shape[1] + 2 * (k // 2) - k) // s + 1
                w = (shape[2] + 2 * (k // 2) - k) // s + 1
                shape = (ch, h, w)
            self.blocks.append(nn.ModuleList([lin] + ([bn] if bn is not None else [])))
        self.head = nn.Linear(int(np.prod(shape)), n_out)

    def forward(self, x):
        for block in self.blocks:
            if isinstance(block[0], nn.Linear):
                x = x.flatten(1)
            for m in block:
                x = m(x)
            x = torch.relu(x)
        return self.head(x.flatten(1))


def _f64(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64)


def export_ann(net: _Net, input_shape) -> AnnModel:
    layers = []
    for block in net.blocks:
        lin = block[0]
        if isinstance(lin, nn.Linear):
            layers.append(LayerSpec("dense", _f64(lin.weight), _f64(lin.bias)))
        else:
            layers.append(LayerSpec("conv2d", _f64(lin.weight), _f64(lin.bias), stride=lin.stride[0], padding=lin.padding[0]))
        if len(block) > 1:
            bn = block[1]
            std = torch.sqrt(bn.running_var + bn.eps)
            layers.append(LayerSpec("normalization", gamma=_f64(bn.weight), beta=_f64(bn.bias),
                                    mean=_f64(bn.running_mean), std=_f64(std)))
    layers.append(LayerSpec("dense", _f64(net.head.weight), _f64(net.head.bias)))
    return AnnModel(tuple(input_shape), layers)


def build_torch_net(input_shape, n_out: int, cfg: TrainConfig) -> _Net:
    torch.manual_seed(cfg.seed)
    return _Net(input_shape, cfg.hidden, n_out, cfg.norm)


def fit(net: _Net, images: np.ndarray, loss_fn, cfg: TrainConfig) -> None:
    """Generic minibatch Adam loop; ``loss_fn(net_output, batch_index)`` returns a scalar."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all = torch.as_tensor(images, dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    net.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        for start in range(0, len(x_all), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = loss_fn(net(x_all[idx]), idx)
            loss.backward()
            opt.step()
        sched.step()
    net.eval()


def train_classifier(images: np.ndarray, labels: np.ndarray, n_classes: int, cfg: TrainConfig = TrainConfig()) -> AnnModel:
    torch.set_num_threads(1)
    net = build_torch_net(images.shape[1:], n_classes, cfg)
    y = torch.as_tensor(labels, dtype=torch.long)
    ce = nn.CrossEntropyLoss()
    fit(net, images, lambda out, idx: ce(out, y[idx]), cfg)
    return export_ann(net, images.shape[1:])


def train_detector(
    images: np.ndarray, targets, grid: int, n_classes: int, cfg: TrainConfig = TrainConfig()
) -> AnnModel:
    """One-stage grid head; output per cell is [objectness, class logits, box(4)]."""
    torch.set_num_threads(1)
    per_cell = 1 + n_classes + 4
    net = build_torch_net(images.shape[1:], grid * grid * per_cell, cfg)
    obj, cls, box = (torch.as_tensor(t) for t in targets)
    obj, box = obj.float(), box.float()
    bce = nn.BCEWithLogitsLoss()

    def loss_fn(out, idx):
        out = out.view(len(idx), grid, grid, per_cell)
        o, c, b = obj[idx], cls[idx], box[idx]
        loss = bce(out[..., 0], o)
        mask = o > 0
        if mask.any():
            loss = loss + nn.functional.cross_entropy(out[..., 1 : 1 + n_classes][mask], c[mask])
            loss = loss + 5.0 * ((torch.sigmoid(out[..., 1 + n_classes :][mask]) - b[mask]) ** 2).mean()
        return loss

    fit(net, images, loss_fn, cfg)
    return export_ann(net, images.shape[1:])
