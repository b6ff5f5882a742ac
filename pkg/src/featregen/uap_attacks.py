"""Universal (image-agnostic) perturbations.

A universal perturbation ``v`` is one tensor added to every image. The
generator here is stochastic projected gradient ascent on the cross-entropy
between the model's clean predictions and its predictions on ``x + v``,
averaged over mini-batches of the held-out attack images, with a projection
back onto the ``xi``-ball after every step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model_zoo.training import predict

log = logging.getLogger(__name__)

PAPER_LINF_XI = 10.0
PAPER_L2_XI = 2000.0
PAPER_INPUT_SHAPE = (3, 224, 224)
PAPER_PIXEL_RANGE = 255.0


class AttackError(RuntimeError):
    """The attack produced non-finite gradients."""


class DiversityExhaustedError(RuntimeError):
    """No diverse enough candidate was found within the attempt budget."""


def parse_norm(norm_type) -> float:
    if norm_type in ("inf", "linf", math.inf):
        return math.inf
    if norm_type in (2, 2.0, "2", "l2"):
        return 2.0
    raise ValueError(f"unsupported norm type {norm_type!r}; use 'inf' or 2")


def norm_label(norm_type) -> str | int:
    return "inf" if parse_norm(norm_type) == math.inf else 2


def linf_budget(paper_xi: float = PAPER_LINF_XI, pixel_range: float = PAPER_PIXEL_RANGE) -> float:
    """Map an l-inf budget on [0, 255] pixels to [0, 1] pixels."""
    return paper_xi / pixel_range


def scaled_l2_budget(input_shape: Sequence[int], paper_xi: float = PAPER_L2_XI,
                     paper_shape: Sequence[int] = PAPER_INPUT_SHAPE,
                     pixel_range: float = PAPER_PIXEL_RANGE) -> float:
    """Rescale an l2 budget so the per-pixel RMS of the perturbation is kept."""
    ratio = float(np.prod(input_shape)) / float(np.prod(paper_shape))
    return paper_xi * math.sqrt(ratio) / pixel_range


def project(v: torch.Tensor, norm_type, xi: float) -> torch.Tensor:
    if parse_norm(norm_type) == math.inf:
        return v.clamp(-xi, xi)
    n = torch.linalg.vector_norm(v)
    return v * (xi / n) if n > xi else v


def tensor_norm(v: torch.Tensor, norm_type) -> float:
    return float(torch.linalg.vector_norm(v.detach().double().flatten(), ord=parse_norm(norm_type)))


@dataclass
class ThreatSpec:
    """Attack budget and schedule.

    ``update`` selects the ascent direction: ``"sign"`` (signed gradient) or
    ``"normalized"`` (l2-normalised gradient). ``None`` picks sign steps for
    l-inf and normalised steps for l2.
    """

    norm_type: Any = "inf"
    xi: float = 10 / 255
    target_fooling_ratio: float = 0.8
    max_epochs: int = 50
    batch_size: int = 100
    step_fraction: float = 0.1
    plateau_patience: int = 5
    update: str | None = None
    init_scale: float = 1.0
    attack_id: str = "spgd"

    def __post_init__(self):
        self.norm_type = norm_label(self.norm_type)
        if not 0 < self.target_fooling_ratio < 1:
            raise ValueError("target fooling ratio must be in (0, 1)")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if self.update not in (None, "sign", "normalized"):
            raise ValueError(f"unknown update rule {self.update!r}")

    @property
    def update_rule(self) -> str:
        if self.update:
            return self.update
        return "sign" if self.norm_type == "inf" else "normalized"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class UniversalPerturbation:
    v: torch.Tensor
    norm_type: Any
    xi: float
    source_model_hash: str = ""
    achieved_fooling_ratio: float = 0.0
    attack_id: str = "spgd"
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.v = torch.as_tensor(self.v, dtype=torch.float32).detach()
        self.norm_type = norm_label(self.norm_type)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.v.shape)

    def norm(self, norm_type=None) -> float:
        return tensor_norm(self.v, self.norm_type if norm_type is None else norm_type)

    @property
    def below_target(self) -> bool:
        return bool(self.meta.get("below_target", False))

    def digest(self) -> str:
        return hashlib.sha256(self.v.numpy().astype("<f4").tobytes()).hexdigest()[:16]

    @property
    def ident(self) -> str:
        return f"{self.attack_id}-{self.seed}-{self.digest()[:8]}"


def _images(split) -> torch.Tensor:
    return split.images if hasattr(split, "images") else torch.as_tensor(split)


def _value_range(split, value_range):
    if value_range is not None:
        return value_range
    return tuple(getattr(split, "value_range", (0.0, 1.0)))


def fooling_ratio(model, split, v, value_range=None, batch_size: int = 500,
                  clean_predictions: torch.Tensor | None = None) -> float:
    """Fraction of images whose predicted label changes when ``v`` is added.

    ``x + v`` is clipped to the dataset's value range before prediction.
    """
    x = _images(split)
    if len(x) == 0:
        raise ValueError("fooling ratio needs a non-empty split")
    v = torch.as_tensor(getattr(v, "v", v), dtype=x.dtype)
    if tuple(v.shape) != tuple(x.shape[1:]):
        raise ValueError(f"perturbation shape {tuple(v.shape)} does not match images {tuple(x.shape[1:])}")
    lo, hi = _value_range(split, value_range)
    p0 = predict(model, x, batch_size) if clean_predictions is None else clean_predictions
    changed = 0
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = (x[start:start + batch_size] + v).clamp(lo, hi)
            changed += int((model(xb).argmax(1) != p0[start:start + batch_size]).sum())
    return changed / len(x)


def _model_hash(model) -> str:
    return str(getattr(model, "content_hash", ""))


def _set_eval(model):
    for attr in ("eval",):
        fn = getattr(model, attr, None)
        if callable(fn):
            fn()


def _initial(shape, spec: ThreatSpec, gen: torch.Generator) -> torch.Tensor:
    if spec.init_scale == 0:
        return torch.zeros(shape)
    if spec.norm_type == "inf":
        v = (torch.rand(shape, generator=gen) * 2 - 1) * spec.xi
    else:
        v = torch.randn(shape, generator=gen)
        v = v / torch.linalg.vector_norm(v) * spec.xi
    return project(v * spec.init_scale, spec.norm_type, spec.xi)


def generate_universal(model, heldout_split, spec: ThreatSpec, seed: int = 0,
                       value_range=None, callback=None) -> UniversalPerturbation:
    """Universal perturbation against ``model`` on the held-out attack images.

    Runs until the fooling ratio on ``heldout_split`` reaches
    ``spec.target_fooling_ratio`` or ``spec.max_epochs`` passes are done and
    returns the best perturbation seen. An unreached target is reported via
    ``meta["below_target"]``, not raised. ``callback(epoch, ratio)`` is called
    after every epoch.
    """
    x = _images(heldout_split)
    if len(x) == 0:
        raise ValueError("held-out split is empty")
    lo, hi = _value_range(heldout_split, value_range)
    _set_eval(model)
    gen = torch.Generator().manual_seed(int(seed))
    shape = tuple(x.shape[1:])
    v = _initial(shape, spec, gen)
    p0 = predict(model, x)
    rule = spec.update_rule
    radius = spec.xi if spec.norm_type == 2 else spec.xi * math.sqrt(float(np.prod(shape)))
    step = spec.step_fraction * (spec.xi if rule == "sign" else radius)

    best_v, best_ratio = v.clone(), fooling_ratio(model, x, v, (lo, hi), clean_predictions=p0)
    history = []
    since_improved = 0
    epoch = 0
    while epoch < spec.max_epochs and best_ratio < spec.target_fooling_ratio:
        perm = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            vv = v.clone().requires_grad_(True)
            logits = model((x[idx] + vv).clamp(lo, hi))
            loss = F.cross_entropy(logits, p0[idx])
            (grad,) = torch.autograd.grad(loss, vv)
            if not torch.all(torch.isfinite(grad)):
                raise AttackError(f"non-finite gradient at epoch {epoch}")
            if rule == "sign":
                direction = grad.sign()
            else:
                direction = grad / torch.linalg.vector_norm(grad).clamp_min(1e-12)
            v = project(v + step * direction, spec.norm_type, spec.xi)
        epoch += 1
        ratio = fooling_ratio(model, x, v, (lo, hi), clean_predictions=p0)
        history.append(ratio)
        if callback is not None:
            callback(epoch, ratio)
        if ratio > best_ratio:
            best_v, best_ratio = v.clone(), ratio
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= spec.plateau_patience:
                step /= 2
                since_improved = 0
        log.debug("uap epoch %d fooling %.4f step %.3g", epoch, ratio, step)
    return UniversalPerturbation(
        v=best_v, norm_type=spec.norm_type, xi=spec.xi, source_model_hash=_model_hash(model),
        achieved_fooling_ratio=best_ratio, attack_id=spec.attack_id, seed=int(seed),
        meta={"epochs": epoch, "history": history, "below_target": best_ratio < spec.target_fooling_ratio,
              "update": rule, "threat": spec.to_dict()},
    )


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.double().flatten(), b.double().flatten()
    den = float(torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b))
    return float(a @ b) / den if den > 0 else 0.0


@dataclass
class PerturbationSet:
    members: list[UniversalPerturbation]
    max_pairwise_cosine: float = 0.15
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def pairwise_cosines(self) -> np.ndarray:
        n = len(self.members)
        c = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                c[i, j] = c[j, i] = cosine(self.members[i].v, self.members[j].v)
        return c

    def stacked(self) -> torch.Tensor:
        return torch.stack([m.v for m in self.members])

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in self.members:
            h.update(m.v.numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


def derived_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def build_perturbation_set(model, heldout_split, spec: ThreatSpec, count: int, max_cosine: float = 0.15,
                           seed: int = 0, max_attempts: int | None = None,
                           require_target: bool = True) -> PerturbationSet:
    """``count`` universal perturbations with pairwise |cosine| <= ``max_cosine``.

    Candidates are generated with distinct derived seeds; a candidate too
    aligned with an accepted member (or, with ``require_target``, below the
    target fooling ratio) is discarded and another seed is tried.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if not 0 < max_cosine <= 1:
        raise ValueError("max_cosine must be in (0, 1]")
    max_attempts = max_attempts or 4 * count
    accepted: list[UniversalPerturbation] = []
    rejected = 0
    for s in derived_seeds(seed, max_attempts):
        cand = generate_universal(model, heldout_split, spec, seed=s)
        ok = not (require_target and cand.below_target)
        ok = ok and all(abs(cosine(cand.v, m.v)) <= max_cosine for m in accepted)
        if ok:
            accepted.append(cand)
            if len(accepted) == count:
                return PerturbationSet(accepted, max_cosine, {"rejected": rejected, "seed": seed})
        else:
            rejected += 1
            log.info("rejected candidate seed %d (fooling %.3f)", s, cand.achieved_fooling_ratio)
    raise DiversityExhaustedError(
        f"only {len(accepted)} of {count} perturbations after {max_attempts} attempts")


# -- perturbation files ------------------------------------------------------

def perturbation_header(p: UniversalPerturbation) -> dict:
    meta = {k: val for k, val in p.meta.items() if k != "history"}
    return {
        "norm_type": norm_label(p.norm_type),
        "xi": p.xi,
        "shape": list(p.shape),
        "seed": p.seed,
        "attack_id": p.attack_id,
        "source_model_hash": p.source_model_hash,
        "achieved_fooling_ratio": p.achieved_fooling_ratio,
        "meta": meta,
    }


def save_perturbation(p: UniversalPerturbation, path, extra: dict | None = None) -> None:
    """uint32 LE length, UTF-8 JSON metadata, float32 LE row-major tensor."""
    head = perturbation_header(p)
    if extra:
        head["extra"] = extra
    raw = json.dumps(head, sort_keys=True, default=str).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(p.v.contiguous().numpy().astype("<f4").tobytes())


def load_perturbation(path) -> UniversalPerturbation:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated perturbation file")
    (n,) = struct.unpack_from("<I", data, 0)
    head = json.loads(data[4:4 + n].decode("utf-8"))
    count = int(np.prod(head["shape"]))
    body = data[4 + n:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} tensor bytes, found {len(body)}")
    v = np.frombuffer(body, dtype="<f4").reshape(head["shape"]).astype(np.float32)
    meta = dict(head.get("meta", {}))
    if "extra" in head:
        meta["extra"] = head["extra"]
    return UniversalPerturbation(torch.from_numpy(v), head["norm_type"], head["xi"],
                                 head["source_model_hash"], head["achieved_fooling_ratio"],
                                 head["attack_id"], head["seed"], meta)
