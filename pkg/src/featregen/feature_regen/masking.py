from __future__ import annotations

import math

import torch

from ..conv_analysis import FilterRanking


class UnsupportedTopologyError(TypeError):
    pass


def mask_indices(ranking: FilterRanking, fraction: float, which: str = "top") -> torch.Tensor:
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    n = len(ranking.order)
    k = math.ceil(fraction * n - 1e-9)
    order = torch.as_tensor(ranking.order, dtype=torch.long)
    if which == "top":
        return order[:k]
    if which == "bottom":
        return order[n - k:]
    raise ValueError(f"which must be 'top' or 'bottom', got {which!r}")


def mask_oracle(model, layer_id: str, top_fraction: float, ranking: FilterRanking, clean_split, v,
                which: str = "top", batch_size: int = 500) -> float:
    """Top-1 accuracy on ``x + v`` with the noise of the ranked filters removed.

    Runs the clean and perturbed images side by side up to the output of
    ``layer_id`` (after its nonlinearity), copies the clean activations of the
    selected filters into the perturbed activations and finishes the forward
    pass. ``which="bottom"`` masks the lowest-ranked filters instead.
    """
    return _masked_correct(model, layer_id, top_fraction, ranking, clean_split, v, which,
                           batch_size) / len(clean_split.labels)


def _masked_correct(model, layer_id, top_fraction, ranking, clean_split, v, which, batch_size) -> int:
    if not getattr(model, "sequential", False):
        raise UnsupportedTopologyError("masking oracle needs a sequential model")
    x_all, y_all = clean_split.images, clean_split.labels
    if len(y_all) == 0:
        raise ValueError("clean split is empty")
    lo, hi = getattr(clean_split, "value_range", (0.0, 1.0))
    v = torch.as_tensor(getattr(v, "v", v), dtype=x_all.dtype)
    idx = mask_indices(ranking, top_fraction, which)
    correct = 0
    with torch.no_grad():
        for start in range(0, len(y_all), batch_size):
            x = x_all[start:start + batch_size]
            clean = model.activation(x, layer_id, post=True)
            noisy = model.activation((x + v).clamp(lo, hi), layer_id, post=True)
            if len(idx):
                noisy[:, idx] = clean[:, idx]
            pred = model.forward_from(noisy, layer_id, post=True).argmax(1)
            correct += int((pred == y_all[start:start + batch_size]).sum())
    return correct


def mask_sweep(model, layer_id: str, fractions, ranking: FilterRanking, clean_split, perturbations,
               which: str = "top") -> list[float]:
    """Mean masked accuracy over ``perturbations`` for each fraction."""
    perturbations = list(perturbations)
    if not perturbations:
        raise ValueError("need at least one perturbation")
    # pooled counts over one division, so equal per-perturbation accuracies average to themselves
    total = len(clean_split.labels) * len(perturbations)
    return [sum(_masked_correct(model, layer_id, f, ranking, clean_split, p, which, 500) for p in perturbations)
            / total for f in fractions]
