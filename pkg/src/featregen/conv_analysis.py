"""Perturbation propagation through convolution layers.

Everything here works on plain arrays: a convolution kernel, the matrix that
realises it as a linear map, the ``||W_m||_1 * ||r||_p`` noise bound and the
ranking of filters by that bound. :func:`observed_activation_noise` is the
only function that touches a trained network.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "ConvKernel",
    "FilterRanking",
    "NoiseProfile",
    "GeometryError",
    "CapacityError",
    "conv2d",
    "output_shape",
    "l1_rank_filters",
    "perturbation_bound",
    "circulant_matrix",
    "max_row_l1",
    "max_perturbation_bruteforce",
    "observed_activation_noise",
    "ranking_document",
    "save_ranking_json",
]

BRUTEFORCE_MAX_DIM = 64


class GeometryError(ValueError):
    """Kernel and input shapes are incompatible."""


class CapacityError(ValueError):
    """Problem too large for exhaustive evaluation."""


def _pair(value: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


@dataclass(frozen=True)
class ConvKernel:
    """Weights of a convolution layer, ``[out_ch, in_ch, k_h, k_w]``."""

    weights: np.ndarray
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[None, None]
        if w.ndim != 4:
            raise ValueError(f"kernel weights must be 4-D, got shape {w.shape}")
        if min(w.shape) < 1:
            raise ValueError(f"empty kernel dimension in shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        stride, padding = _pair(self.stride), _pair(self.padding)
        if min(stride) < 1:
            raise ValueError(f"stride must be positive, got {stride}")
        if min(padding) < 0:
            raise ValueError(f"padding must be non-negative, got {padding}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    @classmethod
    def from_module(cls, conv: torch.nn.Conv2d) -> "ConvKernel":
        if conv.groups != 1 or _pair(conv.dilation) != (1, 1):
            raise GeometryError("only dense, undilated convolutions are supported")
        if isinstance(conv.padding, str):
            raise GeometryError("string padding modes are not supported")
        return cls(conv.weight.detach().cpu().double().numpy(), conv.stride, conv.padding)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def l1_norms(self) -> np.ndarray:
        return np.abs(self.weights).sum(axis=(1, 2, 3))


@dataclass
class FilterRanking:
    layer_id: str
    scores: np.ndarray
    order: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.order = np.asarray(self.order, dtype=np.int64)
        if sorted(self.order.tolist()) != list(range(len(self.scores))):
            raise ValueError("order must be a permutation of the filter indices")

    def top(self, fraction: float) -> np.ndarray:
        """Indices of the ``ceil(fraction * F)`` highest-ranked filters."""
        k = math.ceil(fraction * len(self.order) - 1e-9)
        return self.order[:k]

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "scores": self.scores.tolist(),
            "order": self.order.tolist(),
        }


@dataclass
class NoiseProfile:
    layer_id: str
    per_filter_linf: np.ndarray
    perturbation_id: str
    sample_count: int
    metadata: dict = field(default_factory=dict)


def output_shape(kernel: ConvKernel, input_shape: Sequence[int]) -> tuple[int, int, int]:
    c, h, w = input_shape
    if c != kernel.in_channels:
        raise GeometryError(f"input has {c} channels, kernel expects {kernel.in_channels}")
    (kh, kw), (sh, sw), (ph, pw) = kernel.kernel_size, kernel.stride, kernel.padding
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise GeometryError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    return kernel.out_channels, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Cross-correlate ``x`` (``[C,H,W]`` or ``[N,C,H,W]``) with the kernel, no bias."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    output_shape(kernel, x.shape[1:])
    out = F.conv2d(torch.from_numpy(x), torch.from_numpy(kernel.weights),
                   stride=kernel.stride, padding=kernel.padding).numpy()
    return out[0] if single else out


def l1_rank_filters(kernel: ConvKernel, layer_id: str = "") -> FilterRanking:
    """Order filters from most to least vulnerable by weight l1-norm.

    Ties keep ascending filter index so that the same weights always yield
    the same plan.
    """
    scores = kernel.l1_norms()
    order = np.lexsort((np.arange(len(scores)), -scores))
    return FilterRanking(layer_id, scores, order)


def perturbation_bound(kernel: ConvKernel, filter_index: int, input_norm_type: float,
                       input_norm_value: float) -> float:
    """Upper bound on ``||phi_m(u + r) - phi_m(u)||_inf`` given ``||r||_p``.

    Valid for p in {1, 2, inf}: each output entry is a dot product of the
    filter with a patch of ``r`` whose absolute values are bounded by
    ``||r||_inf <= ||r||_p``.
    """
    if input_norm_type not in (1, 2, math.inf, "inf"):
        raise ValueError(f"unsupported norm type {input_norm_type!r}")
    if input_norm_value < 0:
        raise ValueError("input norm must be non-negative")
    if not 0 <= filter_index < kernel.out_channels:
        raise IndexError(f"filter {filter_index} out of range [0, {kernel.out_channels})")
    return float(kernel.l1_norms()[filter_index] * input_norm_value)


def circulant_matrix(kernel: ConvKernel, input_shape: Sequence[int]) -> np.ndarray:
    """Matrix ``M`` with ``vec(conv(A, W)) = M @ vec(A)``.

    Rows follow the row-major flattening of the ``[out_ch, H_out, W_out]``
    output and columns the row-major flattening of ``A`` (``[C, H, W]``).
    Zero padding simply drops the taps that fall outside the input.
    """
    c, h, w = input_shape
    oc, oh, ow = output_shape(kernel, input_shape)
    (kh, kw), (sh, sw), (ph, pw) = kernel.kernel_size, kernel.stride, kernel.padding
    m = np.zeros((oc * oh * ow, c * h * w))
    for f, i, j in itertools.product(range(oc), range(oh), range(ow)):
        row = (f * oh + i) * ow + j
        for ch, a, b in itertools.product(range(c), range(kh), range(kw)):
            y, x = i * sh - ph + a, j * sw - pw + b
            if 0 <= y < h and 0 <= x < w:
                m[row, (ch * h + y) * w + x] += kernel.weights[f, ch, a, b]
    return m


def max_row_l1(kernel: ConvKernel, input_shape: Sequence[int]) -> np.ndarray:
    """Per-filter maximum row l1-norm of the convolution matrix.

    Equals ``||W_m||_1`` whenever some output position sees the whole kernel,
    and can be smaller for padded geometries where every window is clipped.
    """
    m = circulant_matrix(kernel, input_shape)
    oc = kernel.out_channels
    return np.abs(m).sum(axis=1).reshape(oc, -1).max(axis=1)


def max_perturbation_bruteforce(kernel: ConvKernel, input_shape: Sequence[int], xi: float,
                                filter_index: int | None = None) -> float:
    """Largest ``||conv(r)||_inf`` over ``||r||_inf <= xi``, by evaluation.

    For the l-inf ball the maximiser of ``|M_i . r|`` is ``xi * sign(M_i)``,
    so it is enough to try the sign pattern of every row and run the actual
    convolution on each candidate.
    """
    if xi < 0:
        raise ValueError("xi must be non-negative")
    dim = int(np.prod(input_shape))
    if dim > BRUTEFORCE_MAX_DIM:
        raise CapacityError(f"input dimension {dim} exceeds {BRUTEFORCE_MAX_DIM}")
    if filter_index is not None:
        if not 0 <= filter_index < kernel.out_channels:
            raise IndexError(f"filter {filter_index} out of range")
        kernel = ConvKernel(kernel.weights[filter_index:filter_index + 1],
                            kernel.stride, kernel.padding)
    m = circulant_matrix(kernel, input_shape)
    candidates = np.unique(xi * np.sign(m), axis=0).reshape(-1, *input_shape)
    if xi == 0 or len(candidates) == 0:
        return 0.0
    out = conv2d(candidates, kernel)
    return float(np.abs(out).max())


def _norm(v: torch.Tensor, p: float) -> float:
    return float(torch.linalg.vector_norm(v.double().flatten(), ord=p))


def observed_activation_noise(model, layer_id: str, clean_batch: torch.Tensor, perturbation,
                              value_range: tuple[float, float] = (0.0, 1.0),
                              batch_size: int = 256) -> NoiseProfile:
    """Per-filter l-inf noise at the pre-nonlinearity output of ``layer_id``.

    ``model`` is a :class:`featregen.model_zoo.ModelHandle` (or anything with
    ``activation(x, layer_id)``); ``perturbation`` is a UniversalPerturbation
    or a bare tensor. ``x + v`` is clipped to ``value_range`` exactly as in
    fooling-ratio evaluation, which can only shrink the effective input
    perturbation.
    """
    v = getattr(perturbation, "v", perturbation)
    v = torch.as_tensor(v, dtype=clean_batch.dtype)
    if clean_batch.ndim != 4 or len(clean_batch) == 0:
        raise ValueError("clean batch must be a non-empty [N,C,H,W] tensor")
    if tuple(v.shape) != tuple(clean_batch.shape[1:]):
        raise ValueError(f"perturbation shape {tuple(v.shape)} does not match input {tuple(clean_batch.shape[1:])}")
    lo, hi = value_range
    worst = None
    with torch.no_grad():
        for start in range(0, len(clean_batch), batch_size):
            x = clean_batch[start:start + batch_size]
            a = model.activation(x, layer_id, post=False)
            b = model.activation((x + v).clamp(lo, hi), layer_id, post=False)
            batch_max = (b.double() - a.double()).abs().amax(dim=(0, 2, 3))
            worst = batch_max if worst is None else torch.maximum(worst, batch_max)
    pid = getattr(perturbation, "attack_id", "tensor")
    return NoiseProfile(
        layer_id=layer_id,
        per_filter_linf=worst.numpy(),
        perturbation_id=str(pid),
        sample_count=len(clean_batch),
        metadata={"v_linf": _norm(v, math.inf), "v_l2": _norm(v, 2)},
    )


def ranking_document(ranking: FilterRanking, noise: NoiseProfile | None = None,
                     metadata: dict[str, Any] | None = None) -> dict:
    doc = ranking.to_dict()
    doc["per_filter_linf"] = [] if noise is None else np.asarray(noise.per_filter_linf).tolist()
    meta = dict(metadata or {})
    if noise is not None:
        meta.setdefault("perturbation_id", noise.perturbation_id)
        meta.setdefault("sample_count", noise.sample_count)
        meta.update({f"noise_{k}": val for k, val in noise.metadata.items()})
    doc["metadata"] = meta
    return doc


def save_ranking_json(path, ranking: FilterRanking, noise: NoiseProfile | None = None,
                      metadata: dict[str, Any] | None = None) -> dict:
    doc = ranking_document(ranking, noise, metadata)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
    return doc
