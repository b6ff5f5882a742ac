"""Defended model: a frozen baseline with regeneration units spliced in."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable

import torch
from torch import nn

from ..model_zoo.checkpoint import CorruptionError, read_container, write_container
from ..model_zoo.networks import ModelHandle, parameter_hash
from ..model_zoo.training import TrainingError
from ..synth_perturb import synthesize_pool
from ..uap_attacks import PerturbationSet, ThreatSpec, UniversalPerturbation, derived_seeds, generate_universal
from .plan import RegenerationPlan
from .units import RegenerationUnit

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


class ContractViolationError(RuntimeError):
    """Baseline parameters changed while they were supposed to be frozen."""


class DefendedModel(nn.Module):
    """Baseline forward pass with ``s_reg`` channels replaced by unit outputs.

    The baseline is held as a :class:`ModelHandle`, not a submodule, so
    ``parameters()`` and ``state_dict()`` cover the units only.
    """

    def __init__(self, baseline: ModelHandle, plan: RegenerationPlan, units: dict[str, RegenerationUnit]):
        super().__init__()
        self.baseline = baseline
        self.plan = plan
        self.units = nn.ModuleDict(units)
        self.baseline_hash_at_attach = baseline.compute_hash()
        self._sites = {baseline.activation_index(e.layer_id, post=True): e for e in plan.entries}
        self._index = {e.layer_id: torch.tensor(e.s_reg, dtype=torch.long) for e in plan.entries}
        self.history: list[dict] = []
        self.pool: list[UniversalPerturbation] = []

    # nn.Module.train would flip dropout in the frozen baseline; keep it in eval.
    def train(self, mode: bool = True):
        super().train(mode)
        self.units.train(mode)
        self.baseline.net.eval()
        return self

    def regenerate(self, layer_id: str, act: torch.Tensor) -> torch.Tensor:
        idx = self._index[layer_id]
        out = act.clone()
        out[:, idx] = self.units[layer_id](act.index_select(1, idx))
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.baseline.net):
            x = layer(x)
            entry = self._sites.get(i)
            if entry is not None:
                x = self.regenerate(entry.layer_id, x)
        return x

    def activation(self, x: torch.Tensor, layer_id: str, post: bool = True) -> torch.Tensor:
        """Activation at ``layer_id`` after any unit placed there."""
        stop = self.baseline.activation_index(layer_id, post)
        for i, layer in enumerate(self.baseline.net):
            x = layer(x)
            entry = self._sites.get(i)
            if entry is not None:
                x = self.regenerate(entry.layer_id, x)
            if i == stop:
                return x
        raise LookupError(layer_id)

    def unit_parameter_count(self) -> int:
        return sum(p.numel() for p in self.units.parameters())

    def unit_parameters(self) -> Iterable[nn.Parameter]:
        return self.units.parameters()

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.baseline_hash_at_attach.encode())
        h.update(parameter_hash(self.units).encode())
        h.update(json.dumps(self.plan.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def baseline_intact(self) -> bool:
        return self.baseline.compute_hash() == self.baseline_hash_at_attach

    def assert_baseline_intact(self) -> None:
        if not self.baseline_intact():
            raise ContractViolationError("baseline parameters changed since attach")


def attach_units(model: ModelHandle, plan: RegenerationPlan, init: str = "identity", seed: int = 0,
                 affine: bool = False) -> DefendedModel:
    """Wrap ``model`` with one unit per planned layer; baseline parameters are frozen."""
    if not model.sequential:
        raise GeometryError("regeneration units need a sequential baseline")
    gen = torch.Generator().manual_seed(seed)
    units = {}
    for e in plan.entries:
        out_ch = model.kernel(e.layer_id).out_channels
        if e.channels != out_ch:
            raise GeometryError(f"{e.layer_id}: plan covers {e.channels} channels, layer has {out_ch}")
        units[e.layer_id] = RegenerationUnit(len(e.s_reg), init=init, affine=affine, generator=gen)
    for p in model.net.parameters():
        p.requires_grad_(False)
    model.net.eval()
    return DefendedModel(model, plan, units)


@dataclass
class DefenseHyper:
    """SGD settings for unit training.

    The learning rate is divided by ``lr_drop`` at every epoch listed in
    ``milestones`` (default: after every epoch).
    """

    epochs: int = 4
    lr: float = 0.1
    lr_drop: float = 10.0
    milestones: tuple[int, ...] | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    clean_fraction: float = 0.5
    clip_grad_norm: float | None = 1.0
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        marks = range(1, self.epochs) if self.milestones is None else self.milestones
        return self.lr / self.lr_drop ** sum(1 for m in marks if epoch >= m)


def _pool_tensor(source) -> torch.Tensor:
    if isinstance(source, torch.Tensor):
        return source.float()
    if isinstance(source, PerturbationSet):
        source = source.members
    vs = [getattr(p, "v", p) for p in source]
    if not vs:
        raise ValueError("perturbation source is empty")
    return torch.stack([torch.as_tensor(v, dtype=torch.float32) for v in vs])


def train_defense(defended: DefendedModel, dataset, perturbation_source, hyper: DefenseHyper | None = None,
                  eval_fn=None, before_epoch=None) -> DefendedModel:
    """Train the units on mini-batches mixing clean and perturbed images.

    Each mini-batch holds ``clean_fraction`` clean images; every other image
    gets a perturbation drawn uniformly from ``perturbation_source`` and is
    clipped to the dataset's value range. Only unit parameters are updated;
    the baseline hash is checked after training. ``eval_fn(defended)`` may
    return a dict logged per epoch. ``before_epoch(epoch)`` runs with the
    model in eval mode before each epoch; when it returns a perturbation
    source, that source replaces the pool from then on.
    """
    hyper = hyper or DefenseHyper()
    pool = _pool_tensor(perturbation_source)
    x_all, y_all = dataset.images, dataset.labels
    if len(y_all) == 0:
        raise ValueError("training split is empty")
    lo, hi = getattr(dataset, "value_range", (0.0, 1.0))
    before = defended.baseline.compute_hash()
    if before != defended.baseline_hash_at_attach:
        raise ContractViolationError("baseline changed before training")
    gen = torch.Generator().manual_seed(hyper.seed)
    params = list(defended.unit_parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.SGD(params, lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    steps = max(1, len(y_all) // hyper.batch_size)
    n_clean = int(round(hyper.clean_fraction * hyper.batch_size))
    for epoch in range(hyper.epochs):
        if before_epoch is not None:
            defended.eval()
            fresh = before_epoch(epoch)
            if fresh is not None:
                pool = _pool_tensor(fresh)
        lr = hyper.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        defended.train()
        perm = torch.randperm(len(y_all), generator=gen)
        total = 0.0
        for b in range(steps):
            idx = perm[b * hyper.batch_size:(b + 1) * hyper.batch_size]
            x = x_all[idx].clone()
            k = min(n_clean, len(idx))
            if k < len(idx):
                pick = torch.randint(len(pool), (len(idx) - k,), generator=gen)
                x[k:] = (x[k:] + pool[pick]).clamp(lo, hi)
            loss = nn.functional.cross_entropy(defended(x), y_all[idx])
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {b}")
            opt.zero_grad()
            loss.backward()
            if hyper.clip_grad_norm:
                nn.utils.clip_grad_norm_(params, hyper.clip_grad_norm)
            opt.step()
            total += loss.item()
        defended.eval()
        record = {"epoch": len(defended.history), "lr": lr, "loss": total / steps}
        if eval_fn is not None:
            record.update(eval_fn(defended))
        defended.history.append(record)
        log.info("defense epoch %s", record)
    for p in params:
        p.requires_grad_(False)
    defended.eval()
    defended.assert_baseline_intact()
    if defended.baseline.compute_hash() != before:
        raise ContractViolationError("baseline parameters changed during defense training")
    return defended


def adversarial_retrain(defended: DefendedModel, dataset, heldout_split, spec: ThreatSpec, rounds: int = 1,
                        hyper: DefenseHyper | None = None, pool=None, per_round: int = 5,
                        synthetic_per_round: int = 0, seed: int = 0, eval_fn=None, refresh: str = "round",
                        fresh_weight: int = 1) -> DefendedModel:
    """Rounds of white-box universal attacks on the defense followed by more unit training.

    With ``refresh="round"`` each round computes ``per_round`` perturbations
    against the current defended model (gradients flow through the units),
    appends them and ``synthetic_per_round`` syntheses from them to the pool,
    then trains on the whole pool for ``hyper.epochs``.

    With ``refresh="epoch"`` the round is one training run in which a fresh
    batch of ``per_round`` white-box perturbations (plus syntheses) is
    computed against the current units before every epoch, so the attack
    keeps up with the defense it is training. ``fresh_weight`` repeats the
    white-box members in the pool to raise their sampling rate. The pool,
    repeats included, is kept in ``defended.pool``.
    """
    if refresh not in ("round", "epoch"):
        raise ValueError(f"refresh must be 'round' or 'epoch', got {refresh!r}")
    if fresh_weight < 1:
        raise ValueError("fresh_weight must be >= 1")
    if pool is not None:
        defended.pool = list(pool.members if isinstance(pool, PerturbationSet) else pool)
    if not defended.pool:
        raise ValueError("adversarial retraining needs the pool the defense was trained on")
    hyper = hyper or DefenseHyper()

    def grow(wave_seed: int, tag: str) -> list:
        fresh = [generate_universal(defended, heldout_split, spec, seed=s)
                 for s in derived_seeds(wave_seed, per_round)]
        added = list(fresh) * fresh_weight
        # a single member cannot be pushed past its own norm, so synthesis needs two
        if synthetic_per_round and len(fresh) > 1:
            added += synthesize_pool(fresh, synthetic_per_round, seed=wave_seed)
        defended.pool.extend(added)
        log.info("retrain %s: %d white-box perturbations (mean fooling %.3f)", tag, len(fresh),
                 sum(p.achieved_fooling_ratio for p in fresh) / len(fresh))
        return defended.pool

    for r, rseed in enumerate(derived_seeds(seed, rounds)):
        if refresh == "round":
            grow(rseed, f"round {r}")
            train_defense(defended, dataset, defended.pool, hyper, eval_fn)
        else:
            wave_seeds = derived_seeds(rseed, hyper.epochs)
            train_defense(defended, dataset, defended.pool, hyper, eval_fn,
                          before_epoch=lambda e: grow(wave_seeds[e], f"round {r} epoch {e}"))
    return defended


# -- checkpoint ----------------------------------------------------------------

def save_defense(defended: DefendedModel, path, metadata: dict | None = None) -> str:
    """Unit payloads plus plan JSON and a reference to the baseline hash."""
    units = defended.units
    manifest = {
        "kind": "defense",
        "baseline_hash": defended.baseline_hash_at_attach,
        "plan": defended.plan.to_dict(),
        "affine": any(u.affine for u in units.values()),
        "content_hash": defended.content_hash,
        "metadata": metadata or {},
    }
    write_container(path, manifest, OrderedDict(units.state_dict()))
    return manifest["content_hash"]


def load_defense(path, baseline: ModelHandle) -> DefendedModel:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "defense":
        raise CorruptionError(f"{path}: not a defense checkpoint")
    if baseline.compute_hash() != manifest["baseline_hash"]:
        raise CorruptionError(f"{path}: baseline hash does not match the one the defense was trained on")
    plan = RegenerationPlan.from_dict(manifest["plan"])
    defended = attach_units(baseline, plan, init="identity", affine=manifest.get("affine", False))
    defended.units.load_state_dict(tensors)
    if defended.content_hash != manifest["content_hash"]:
        raise CorruptionError(f"{path}: content hash mismatch")
    return defended


def defense_hyper_dict(h: DefenseHyper) -> dict:
    return asdict(h)
