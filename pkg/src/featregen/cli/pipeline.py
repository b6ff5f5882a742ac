"""Experiment workspace: builds every asset of a run once and caches it on disk.

Each asset is stored under ``output_dir`` and indexed in ``manifest.json``
together with a cache key derived from the configuration fields and
upstream content hashes it depends on. A later call with the same key
loads the stored file instead of recomputing it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

from ..conv_analysis import l1_rank_filters, observed_activation_noise, save_ranking_json
from ..evaluation import ScenarioAssets, accuracy_pair, restoration_from_accuracies
from ..feature_regen import (
    DefendedModel,
    DefenseHyper,
    adversarial_retrain,
    attach_units,
    load_defense,
    plan_regeneration,
    save_defense,
    train_defense,
)
from ..model_zoo import BaselineHyper, build_model, load_dataset, load_model, save_model, train_baseline
from ..synth_perturb import synthesize_pool
from ..uap_attacks import (
    PerturbationSet,
    ThreatSpec,
    build_perturbation_set,
    linf_budget,
    load_perturbation,
    save_perturbation,
    scaled_l2_budget,
)
from .config import RunConfig

log = logging.getLogger(__name__)

SUBDIRS = ("models", "perturbations", "rankings", "reports", "plots")


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Workspace:
    def __init__(self, config: RunConfig):
        self.config = config
        self.root = config.output_dir
        for d in SUBDIRS:
            (self.root / d).mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"artifacts": {}}
        self.manifest["config"] = config.snapshot()
        self._splits = None
        self._models: dict[str, object] = {}
        self._sets: dict[str, PerturbationSet] = {}

    # -- bookkeeping -----------------------------------------------------------

    def seed_for(self, role: str) -> int:
        h = hashlib.sha256(f"{self.config.seed}:{role}".encode()).digest()
        return int.from_bytes(h[:4], "little")

    def path(self, sub: str, name: str) -> Path:
        return self.root / sub / name

    def record(self, name: str, path: Path, key: str, **info) -> None:
        entry = {"path": str(Path(path).relative_to(self.root)), "key": key,
                 "config_digest": self.config.digest(), "written": time.strftime("%Y-%m-%dT%H:%M:%S")}
        entry.update(info)
        self.manifest["artifacts"][name] = entry
        self.save_manifest()

    def save_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, default=str))
        tmp.replace(self.manifest_path)

    def cached(self, name: str, key: str) -> Path | None:
        entry = self.manifest["artifacts"].get(name)
        if entry and entry.get("key") == key:
            p = self.root / entry["path"]
            if p.exists():
                return p
        return None

    # -- data ------------------------------------------------------------------

    def splits(self) -> dict:
        if self._splits is None:
            d = self.config["dataset"]
            out = {}
            for split in ("train", "heldout_attack", "val"):
                h = load_dataset(d["name"], split, seed=d["seed"], heldout_size=d["heldout_size"], root=d["root"])
                limit = d["train_limit"] if split == "train" else d["val_limit"] if split == "val" else None
                out[split] = h.subset(limit) if limit else h
            self._splits = out
        return self._splits

    # -- models ----------------------------------------------------------------

    def baseline(self, arch: str | None = None):
        arch = arch or self.config["model"]["architecture_id"]
        if arch in self._models:
            return self._models[arch]
        m = self.config["model"]
        d = self.config["dataset"]
        seed = self.seed_for(f"baseline:{arch}")
        key = _key("baseline", arch, d, m["epochs"], m["lr"], m["batch_size"], seed)
        name = f"baseline-{arch}"
        path = self.path("models", f"{name}.ckpt")
        if self.cached(name, key):
            model = load_model(path)
        else:
            s = self.splits()
            init = build_model(arch, s["train"].class_count, s["train"].image_shape, seed=seed)
            hyper = BaselineHyper(epochs=m["epochs"], lr=m["lr"], batch_size=m["batch_size"], seed=seed)
            model = train_baseline(init, s["train"], hyper, eval_set=s["val"])
            model.metadata["config"] = self.config.snapshot()
            save_model(model, path)
            self.record(name, path, key, content_hash=model.content_hash,
                        clean_top1=model.metadata["clean_top1"])
        self._models[arch] = model
        return model

    # -- perturbations ---------------------------------------------------------

    def threat(self, norm_type=None, xi_multiplier: float = 1.0, **overrides) -> ThreatSpec:
        t = self.config["threat"]
        norm = t["norm_type"] if norm_type is None else norm_type
        shape = self.splits()["train"].image_shape
        if t["xi"] is not None and norm == t["norm_type"]:
            xi = t["xi"]
        else:
            xi = linf_budget() if str(norm) == "inf" else scaled_l2_budget(shape)
        fields = dict(norm_type=norm, xi=xi * xi_multiplier, target_fooling_ratio=t["target_fooling_ratio"],
                      max_epochs=t["max_epochs"], batch_size=t["batch_size"], step_fraction=t["step_fraction"],
                      plateau_patience=t["plateau_patience"], update=t["update"])
        fields.update(overrides)
        return ThreatSpec(**fields)

    def perturbation_set(self, role: str, model, spec: ThreatSpec, count: int,
                         require_target: bool = True, seed_role: str | None = None) -> PerturbationSet:
        """Cached diverse set; sets sharing ``seed_role`` try the same candidate seeds."""
        if role in self._sets:
            return self._sets[role]
        seed = self.seed_for(f"set:{seed_role or role}")
        max_cos = self.config["threat"]["max_cosine"]
        attempts = self.config["threat"]["max_attempts"]
        heldout = self.splits()["heldout_attack"]
        key = _key("set", role, model.content_hash, spec.to_dict(), count, max_cos, seed, require_target,
                   heldout.describe())
        folder = self.root / "perturbations" / role
        index = folder / "set.json"
        if self.cached(f"set-{role}", key):
            doc = json.loads(index.read_text())
            members = [load_perturbation(folder / f) for f in doc["files"]]
            pset = PerturbationSet(members, doc["max_pairwise_cosine"], doc["meta"])
        else:
            pset = build_perturbation_set(model, heldout, spec, count, max_cosine=max_cos, seed=seed,
                                          require_target=require_target, max_attempts=attempts)
            folder.mkdir(parents=True, exist_ok=True)
            files = []
            for i, p in enumerate(pset.members):
                f = f"{i:03d}.uap"
                save_perturbation(p, folder / f, {"role": role, "config": self.config.snapshot()})
                files.append(f)
            pset.meta.update(role=role, digest=pset.digest())
            index.write_text(json.dumps({"files": files, "max_pairwise_cosine": max_cos, "meta": pset.meta,
                                         "threat": spec.to_dict(), "source_model_hash": model.content_hash,
                                         "fooling_ratios": [p.achieved_fooling_ratio for p in pset.members]},
                                        indent=2, default=str))
            self.record(f"set-{role}", index, key, digest=pset.digest(), source_model_hash=model.content_hash,
                        fooling_ratios=[p.achieved_fooling_ratio for p in pset.members])
        self._sets[role] = pset
        return pset

    def training_set(self) -> PerturbationSet:
        t = self.config["threat"]
        return self.perturbation_set("train", self.baseline(), self.threat(), t["set_size"])

    def test_set(self) -> PerturbationSet:
        t = self.config["threat"]
        return self.perturbation_set("test", self.baseline(), self.threat(), t["test_set_size"])

    def training_pool(self) -> list:
        V = self.training_set()
        s = self.config["synthesis"]
        synth = synthesize_pool(V, s["count"], seed=self.seed_for("synth"), eta=s["eta"],
                                max_iters=s["max_iters"]) if s["count"] else []
        return list(V.members) + synth

    # -- ranking ---------------------------------------------------------------

    def rankings(self, model=None) -> dict:
        model = model or self.baseline()
        return {lid: l1_rank_filters(model.kernel(lid), lid) for lid in model.conv_layer_ids}

    def noise_profile(self, layer_id: str | None = None, model=None, perturbation=None, samples: int = 500):
        model = model or self.baseline()
        layer_id = layer_id or model.conv_layer_ids[0]
        v = perturbation if perturbation is not None else self.test_set().members[0]
        val = self.splits()["val"]
        return observed_activation_noise(model, layer_id, val.images[:samples], v, val.value_range)

    def write_rankings(self, model=None, with_noise: bool = True) -> list[Path]:
        model = model or self.baseline()
        out = []
        for lid, r in self.rankings(model).items():
            noise = self.noise_profile(lid, model) if with_noise else None
            p = self.path("rankings", f"{lid}.json")
            save_ranking_json(p, r, noise, {"model_hash": model.content_hash, "config": self.config.snapshot()})
            self.record(f"ranking-{lid}", p, _key("rank", model.content_hash, lid), model_hash=model.content_hash)
            out.append(p)
        return out

    # -- defense ---------------------------------------------------------------

    def defense_hyper(self, retrain: bool = False) -> DefenseHyper:
        t = self.config["training"]
        epochs = t["retrain_epochs"] if retrain else t["epochs"]
        ms = t["retrain_milestones"] if retrain else t["milestones"]
        return DefenseHyper(epochs=epochs, lr=t["lr"], lr_drop=t["lr_drop"],
                            milestones=None if ms is None else tuple(ms), momentum=t["momentum"],
                            weight_decay=t["weight_decay"], batch_size=t["batch_size"],
                            clean_fraction=t["clean_fraction"], clip_grad_norm=t["clip_grad_norm"],
                            seed=self.seed_for("defense-retrain" if retrain else "defense"))

    def _monitor(self):
        val = self.splits()["val"]
        test = self.test_set()

        def fn(model):
            c, p = accuracy_pair(model, val, test)
            return {"clean_top1": c, "perturbed_top1": p, "restoration": restoration_from_accuracies(c, p)}
        return fn

    def defended(self, monitor: bool = True) -> DefendedModel:
        if "defense" in self._models:
            return self._models["defense"]
        base = self.baseline()
        plan_cfg = self.config["plan"]
        hyper = self.defense_hyper()
        pool = self.training_pool()
        key = _key("defense", base.content_hash, plan_cfg, hyper, self.training_set().digest(),
                   self.config["synthesis"])
        path = self.path("models", "defense.ckpt")
        if self.cached("defense", key):
            dm = load_defense(path, base)
        else:
            plan = plan_regeneration(base, ratio=plan_cfg["ratio"], max_units=plan_cfg["max_units"])
            dm = attach_units(base, plan, init="identity", seed=self.seed_for("units"))
            train_defense(dm, self.splits()["train"], pool, hyper, self._monitor() if monitor else None)
            save_defense(dm, path, {"config": self.config.snapshot(), "history": dm.history})
            self.record("defense", path, key, content_hash=dm.content_hash, baseline_hash=base.content_hash,
                        history=dm.history)
        dm.pool = pool
        self._models["defense"] = dm
        return dm

    def retrain_threat(self) -> ThreatSpec:
        t = self.config["training"]
        return self.threat(max_epochs=t["retrain_max_epochs"], target_fooling_ratio=t["retrain_target"])

    def retrained(self, monitor: bool = True) -> DefendedModel:
        if "retrained" in self._models:
            return self._models["retrained"]
        first = self.defended(monitor)
        t = self.config["training"]
        hyper = self.defense_hyper(retrain=True)
        spec = self.retrain_threat()
        key = _key("retrained", first.content_hash, hyper, spec.to_dict(), t["retrain_rounds"],
                   t["retrain_per_round"], t["retrain_synthetic"], t["retrain_refresh"], t["retrain_fresh_weight"])
        path = self.path("models", "defense-retrained.ckpt")
        if self.cached("retrained", key):
            dm = load_defense(path, self.baseline())
        else:
            dm = load_defense(self.path("models", "defense.ckpt"), self.baseline())
            dm.pool = list(first.pool)
            adversarial_retrain(dm, self.splits()["train"], self.splits()["heldout_attack"], spec,
                                rounds=t["retrain_rounds"], hyper=hyper, per_round=t["retrain_per_round"],
                                synthetic_per_round=t["retrain_synthetic"], seed=self.seed_for("retrain"),
                                eval_fn=self._monitor() if monitor else None, refresh=t["retrain_refresh"],
                                fresh_weight=t["retrain_fresh_weight"])
            save_defense(dm, path, {"config": self.config.snapshot(), "history": dm.history})
            self.record("retrained", path, key, content_hash=dm.content_hash, history=dm.history)
        self._models["retrained"] = dm
        return dm

    # -- evaluation assets -----------------------------------------------------

    def scenario_assets(self, scenarios) -> ScenarioAssets:
        e = self.config["evaluation"]
        t = self.config["threat"]
        s = self.splits()
        base = self.baseline()
        n = t["test_set_size"]
        assets = ScenarioAssets(val=s["val"], heldout=s["heldout_attack"], config=self.config.snapshot())
        if "same_norm" in scenarios:
            assets.same_norm = self.test_set()
        if "cross_norm" in scenarios:
            assets.cross_norm = self.perturbation_set("l2", base, self.threat(norm_type=2), n, require_target=False)
        if "stronger_xi" in scenarios:
            # one protocol for every budget: same candidate seeds, attacks run to their plateau,
            # so only xi differs between the sets
            assets.stronger_xi = {}
            for mult in e["xi_multipliers"]:
                spec = self.threat(xi_multiplier=mult, target_fooling_ratio=e["stronger_xi_target"])
                assets.stronger_xi[mult] = self.perturbation_set(f"xi_x{mult:g}", base, spec, n,
                                                                 require_target=False, seed_role="stronger_xi")
        if "cross_model" in scenarios:
            other = self.baseline(e["cross_model_arch"])
            assets.cross_model = self.perturbation_set("cross_model", other, self.threat(), n, require_target=False)
            assets.cross_model_same = self.test_set()
        if "heldout_attack" in scenarios:
            spec_b = self.threat(update="normalized", step_fraction=e["family_b_step_fraction"],
                                 plateau_patience=e["family_b_patience"], attack_id="spgd-normalized")
            assets.heldout_attack = self.perturbation_set("family_b", base, spec_b, n, require_target=False)
        if "whitebox_secondary" in scenarios:
            assets.whitebox_spec = self.threat(max_epochs=e["whitebox_epochs"],
                                               target_fooling_ratio=e["whitebox_target"], attack_id="whitebox")
            assets.whitebox_seed = self.seed_for("whitebox")
        return assets

    def defense_for_stage(self, stage: str) -> DefendedModel:
        if stage == "defense":
            return self.defended()
        if stage == "retrained":
            return self.retrained()
        raise ValueError(f"unknown defense stage {stage!r}")
