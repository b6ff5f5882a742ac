from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .datasets import DatasetHandle
from .networks import ModelHandle

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Optimisation diverged (non-finite loss)."""


@dataclass
class BaselineHyper:
    epochs: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0


def predict(model, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    """Arg-max labels; ``model`` is any callable returning logits."""
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(images[start:start + batch_size]).argmax(1))
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def top1(model, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 500) -> float:
    if len(labels) == 0:
        raise ValueError("cannot compute accuracy on an empty set")
    # count / n, the same arithmetic as every other accuracy in the package
    return int((predict(model, images, batch_size) == labels).sum()) / len(labels)


def train_baseline(model: ModelHandle, dataset: DatasetHandle, hyper: BaselineHyper | None = None,
                   eval_set: DatasetHandle | None = None) -> ModelHandle:
    """Train a copy of ``model`` with SGD + one-cycle schedule.

    The returned handle records the clean top-1 on ``eval_set`` (or the
    training split when none is given) in ``metadata["clean_top1"]``.
    """
    hyper = hyper or BaselineHyper()
    if len(dataset) == 0:
        raise ValueError("training split is empty")
    model = model.copy()
    net = model.net
    torch.manual_seed(hyper.seed)
    gen = torch.Generator().manual_seed(hyper.seed)
    steps = len(dataset) // hyper.batch_size
    history = []
    if hyper.epochs > 0 and steps > 0:
        opt = torch.optim.SGD(net.parameters(), lr=hyper.lr, momentum=hyper.momentum,
                              weight_decay=hyper.weight_decay)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, hyper.lr, total_steps=hyper.epochs * steps)
        for epoch in range(hyper.epochs):
            net.train()
            perm = torch.randperm(len(dataset), generator=gen)
            total = 0.0
            for b in range(steps):
                idx = perm[b * hyper.batch_size:(b + 1) * hyper.batch_size]
                loss = nn.functional.cross_entropy(net(dataset.images[idx]), dataset.labels[idx])
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {b}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item()
            history.append(total / steps)
            log.info("baseline epoch %d loss %.4f", epoch, history[-1])
    net.eval()
    ref = eval_set if eval_set is not None else dataset
    model.metadata.update({
        "clean_top1": top1(net, ref.images, ref.labels),
        "clean_top1_split": ref.split,
        "train_hyper": asdict(hyper),
        "train_loss": history,
        "dataset": dataset.describe(),
    })
    model.refresh_hash()
    return model
