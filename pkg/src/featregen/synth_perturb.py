"""Synthetic universal perturbations by iterated random convex combination.

Starting from zero, repeatedly pick a member ``v_new`` of a precomputed set
``V`` and a weight ``alpha`` in (0, 1), and replace the running perturbation
by ``alpha * v_new + (1 - alpha) * v_syn`` until its l2-norm exceeds ``eta``.
Every iterate is a convex combination of ``V`` and the zero vector, so any
coordinate-wise (and hence l-inf) bound shared by the members is inherited.

Iterates are rounded to float32 after each update. Random draws come from
``numpy.random.default_rng(seed)``; each iteration draws
``alpha = rng.random()`` (redrawn while exactly 0) and then
``index = rng.integers(len(V))``, members being drawn with replacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .uap_attacks import PerturbationSet, UniversalPerturbation, derived_seeds

DEFAULT_MAX_ITERS = 10_000


class NonTerminationError(RuntimeError):
    """The running perturbation never exceeded the threshold."""


@dataclass
class SynthConfig:
    eta: float
    max_iters: int = DEFAULT_MAX_ITERS
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


def _members(V) -> list[UniversalPerturbation]:
    members = list(V.members if isinstance(V, PerturbationSet) else V)
    if not members:
        raise ValueError("perturbation set is empty")
    return members


def default_threshold(V) -> float:
    """Smallest l2-norm among the members of ``V``."""
    return min(float(np.linalg.norm(np.asarray(m.v, np.float64).ravel())) for m in _members(V))


def _set_digest(members) -> str:
    import hashlib
    h = hashlib.sha256()
    for m in members:
        h.update(np.asarray(m.v, "<f4").tobytes())
    return h.hexdigest()[:16]


def synthesize(V, config: SynthConfig) -> UniversalPerturbation:
    members = _members(V)
    stack = np.stack([np.asarray(m.v, np.float64) for m in members])
    if len({m.shape for m in members}) != 1:
        raise ValueError("all members must have the same shape")
    rng = np.random.default_rng(config.seed)
    v_syn = np.zeros_like(stack[0])
    iters = 0
    while np.linalg.norm(v_syn.ravel()) <= config.eta:
        if iters >= config.max_iters:
            raise NonTerminationError(
                f"l2-norm {np.linalg.norm(v_syn.ravel()):.6g} still <= eta={config.eta:.6g} "
                f"after {config.max_iters} iterations")
        alpha = rng.random()
        while alpha == 0.0:
            alpha = rng.random()
        v_new = stack[rng.integers(len(stack))]
        # float32 iterates: the exit test sees exactly the returned tensor
        v_syn = (alpha * v_new + (1 - alpha) * v_syn).astype(np.float32).astype(np.float64)
        iters += 1
    first = members[0]
    return UniversalPerturbation(
        v=torch.from_numpy(v_syn.astype(np.float32)),
        norm_type=first.norm_type,
        xi=max(m.xi for m in members),
        source_model_hash=first.source_model_hash,
        achieved_fooling_ratio=float("nan"),
        attack_id="synthetic",
        seed=config.seed,
        meta={"source_set_digest": _set_digest(members), "eta": config.eta, "iterations": iters},
    )


def synthesize_pool(V, count: int, seed: int = 0, eta: float | None = None,
                    max_iters: int = DEFAULT_MAX_ITERS) -> list[UniversalPerturbation]:
    """``count`` syntheses from ``V`` with seeds derived from ``seed``."""
    eta = default_threshold(V) if eta is None else eta
    return [synthesize(V, SynthConfig(eta, max_iters, s)) for s in derived_seeds(seed, count)]
