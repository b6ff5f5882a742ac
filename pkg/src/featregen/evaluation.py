"""Restoration accuracy and the scenario harness.

Restoration accuracy compares a model's top-1 on a set mixing clean and
perturbed images in equal numbers against its top-1 on the clean images
alone. Perturbed copies cycle through the perturbation set in index order.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import torch

from .model_zoo.training import predict
from .uap_attacks import PerturbationSet, ThreatSpec, UniversalPerturbation, fooling_ratio, generate_universal

SCENARIOS = ("same_norm", "cross_norm", "stronger_xi", "cross_model", "heldout_attack", "whitebox_secondary")
XI_MULTIPLIERS = (1.0, 1.5, 2.0, 2.5)


class UndefinedMetricError(ZeroDivisionError):
    pass


class AssetError(LookupError):
    pass


def _members(perturbations) -> list:
    if isinstance(perturbations, PerturbationSet):
        return perturbations.members
    if isinstance(perturbations, UniversalPerturbation) or isinstance(perturbations, torch.Tensor):
        return [perturbations]
    return list(perturbations)


def _perturbed_correct(model, clean_split, members, assign, batch_size) -> int:
    x, y = clean_split.images, clean_split.labels
    lo, hi = getattr(clean_split, "value_range", (0.0, 1.0))
    stack = torch.stack([torch.as_tensor(getattr(v, "v", v), dtype=x.dtype) for v in members])
    if tuple(stack.shape[1:]) != tuple(x.shape[1:]):
        raise ValueError("perturbation shape does not match the images")
    correct = 0
    with torch.no_grad():
        for start in range(0, len(y), batch_size):
            xb = (x[start:start + batch_size] + stack[assign[start:start + batch_size]]).clamp(lo, hi)
            correct += int((model(xb).argmax(1) == y[start:start + batch_size]).sum())
    return correct


def _check(clean_split, members):
    if len(clean_split.labels) == 0:
        raise ValueError("clean split is empty")
    if not members:
        raise ValueError("perturbation set is empty")


def accuracy_pair(model, clean_split, perturbations, batch_size: int = 500) -> tuple[float, float]:
    """(clean top-1, perturbed top-1); image ``i`` gets member ``i mod K``."""
    members = _members(perturbations)
    _check(clean_split, members)
    x, y = clean_split.images, clean_split.labels
    assign = torch.arange(len(y)) % len(members)
    pert_ok = _perturbed_correct(model, clean_split, members, assign, batch_size)
    clean_ok = (predict(model, x, batch_size) == y).sum().item()
    return clean_ok / len(y), pert_ok / len(y)


def pooled_perturbed_top1(model, clean_split, perturbations, batch_size: int = 500) -> float:
    """Top-1 with every member applied to every image, counts pooled over members.

    This is the convention of the masking sweep, unlike the ``i mod K``
    assignment of :func:`accuracy_pair`.
    """
    members = _members(perturbations)
    _check(clean_split, members)
    n = len(clean_split.labels)
    correct = sum(_perturbed_correct(model, clean_split, [m], torch.zeros(n, dtype=torch.long), batch_size)
                  for m in members)
    return correct / (n * len(members))


def restoration_from_accuracies(clean_top1: float, perturbed_top1: float) -> float:
    if clean_top1 == 0:
        raise UndefinedMetricError("restoration accuracy is undefined when clean accuracy is 0")
    return ((clean_top1 + perturbed_top1) / 2) / clean_top1


def restoration_accuracy(model, clean_split, perturbation_set) -> float:
    return restoration_from_accuracies(*accuracy_pair(model, clean_split, perturbation_set))


@dataclass
class EvalReport:
    scenario_id: str
    model_hash: str
    perturbation_ids: list[str]
    clean_top1: float
    perturbed_top1: float
    restoration_accuracy: float
    fooling_ratio: float
    config_snapshot: dict[str, Any] = field(default_factory=dict)
    timestamp: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def numbers(self) -> tuple[float, float, float, float]:
        return self.clean_top1, self.perturbed_top1, self.restoration_accuracy, self.fooling_ratio


def _hash(model) -> str:
    return str(getattr(model, "content_hash", ""))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def evaluate(scenario_id: str, model, clean_split, perturbations, config: dict | None = None,
             extra: dict | None = None) -> EvalReport:
    members = _members(perturbations)
    clean, pert = accuracy_pair(model, clean_split, members)
    fool = sum(fooling_ratio(model, clean_split, p) for p in members) / len(members)
    ids = [getattr(p, "ident", f"tensor-{i}") for i, p in enumerate(members)]
    return EvalReport(scenario_id, _hash(model), ids, clean, pert, restoration_from_accuracies(clean, pert),
                      fool, dict(config or {}), _now(), dict(extra or {}))


@dataclass
class ScenarioAssets:
    """Inputs for :func:`run_scenario`.

    ``val`` is the clean evaluation split and ``heldout`` the attack split.
    Perturbation sets are keyed by the role they play.
    """

    val: Any = None
    heldout: Any = None
    same_norm: Any = None
    cross_norm: Any = None
    stronger_xi: dict[float, Any] | None = None
    cross_model: Any = None
    cross_model_same: Any = None
    heldout_attack: Any = None
    whitebox_spec: ThreatSpec | None = None
    whitebox_seed: int = 0
    config: dict = field(default_factory=dict)


def _need(assets: ScenarioAssets, *names):
    missing = [n for n in names if getattr(assets, n) is None]
    if missing:
        raise AssetError(f"missing assets: {', '.join(missing)}")


def whitebox_curve(model, heldout, spec: ThreatSpec, seed: int) -> tuple[UniversalPerturbation, list[float]]:
    """Run a universal attack with gradient access to ``model``; returns the per-epoch fooling ratios."""
    curve: list[float] = []
    p = generate_universal(model, heldout, spec, seed=seed, callback=lambda e, r: curve.append(r))
    return p, curve


def run_scenario(scenario: str, defended, baseline, assets: ScenarioAssets) -> list[EvalReport]:
    """One report per (condition, model) pair; models are tagged ``defended`` / ``baseline``."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    _need(assets, "val")
    models = (("defended", defended), ("baseline", baseline))
    cfg = dict(assets.config, scenario=scenario)
    reports = []

    def both(condition, perturbations, extra=None):
        for tag, m in models:
            reports.append(evaluate(f"{scenario}/{condition}/{tag}", m, assets.val, perturbations,
                                    cfg, dict(extra or {}, model=tag)))

    if scenario == "same_norm":
        _need(assets, "same_norm")
        both("linf", assets.same_norm)
    elif scenario == "cross_norm":
        _need(assets, "cross_norm")
        both("l2", assets.cross_norm)
    elif scenario == "stronger_xi":
        _need(assets, "stronger_xi")
        for mult in sorted(assets.stronger_xi):
            both(f"xi_x{mult:g}", assets.stronger_xi[mult], {"xi_multiplier": mult})
    elif scenario == "cross_model":
        _need(assets, "cross_model")
        both("foreign_model", assets.cross_model)
        if assets.cross_model_same is not None:
            both("same_model", assets.cross_model_same)
    elif scenario == "heldout_attack":
        _need(assets, "heldout_attack")
        both("unseen_family", assets.heldout_attack)
    elif scenario == "whitebox_secondary":
        _need(assets, "heldout", "whitebox_spec")
        for tag, m in models:
            p, curve = whitebox_curve(m, assets.heldout, assets.whitebox_spec, assets.whitebox_seed)
            rep = evaluate(f"{scenario}/whitebox/{tag}", m, assets.val, [p], cfg,
                           {"model": tag, "attacker_curve": curve,
                            "attacker_plateau": p.achieved_fooling_ratio})
            reports.append(rep)
    return reports


def write_reports_json(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, default=str)


CSV_FIELDS = ("scenario_id", "model_hash", "clean_top1", "perturbed_top1", "restoration_accuracy",
              "fooling_ratio", "perturbation_count", "timestamp")


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow({"scenario_id": r.scenario_id, "model_hash": r.model_hash[:16],
                        "clean_top1": f"{r.clean_top1:.4f}", "perturbed_top1": f"{r.perturbed_top1:.4f}",
                        "restoration_accuracy": f"{r.restoration_accuracy:.4f}",
                        "fooling_ratio": f"{r.fooling_ratio:.4f}",
                        "perturbation_count": len(r.perturbation_ids), "timestamp": r.timestamp})
