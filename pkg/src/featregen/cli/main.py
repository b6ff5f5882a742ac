"""``featregen`` command line.

Every subcommand accepts ``--config FILE`` (YAML or JSON), ``--seed N`` and
``--set section.key=value`` overrides. Failures print one JSON error record
on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import spearmanr

from ..conv_analysis import l1_rank_filters
from ..evaluation import SCENARIOS, EvalReport, pooled_perturbed_top1, run_scenario, write_reports_csv, write_reports_json
from ..feature_regen import mask_sweep
from ..model_zoo import top1
from ..uap_attacks import save_perturbation
from . import plots
from .config import ConfigError, RunConfig
from .pipeline import Workspace

log = logging.getLogger("featregen")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fractions(text: str) -> list[float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) >= 3 and parts[-2].strip() == "...":
        # "0,0.1,...,1.0": arithmetic progression
        a, b, end = float(parts[0]), float(parts[1]), float(parts[-1])
        step = b - a
        n = int(round((end - a) / step))
        return [round(a + i * step, 10) for i in range(n + 1)]
    return [float(p) for p in parts]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (YAML or JSON)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--output-dir", help="artifact root (overrides config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. training.epochs=2")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="featregen", description="Selective feature regeneration against universal perturbations")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("train-baseline", parents=[common], help="train a baseline classifier")
    c.add_argument("--arch", help="architecture id (default: config model)")

    c = sub.add_parser("attack", parents=[common], help="generate a universal perturbation set")
    c.add_argument("--role", default="train", help="set name (train, test or any label)")
    c.add_argument("--norm", choices=["inf", "2"], help="threat norm (default: config)")
    c.add_argument("--count", type=int, help="number of perturbations")
    c.add_argument("--xi-multiplier", type=float, default=1.0)

    c = sub.add_parser("synth", parents=[common], help="synthesize perturbations from the training set")
    c.add_argument("--count", type=int, help="pool size (default: config synthesis.count)")

    sub.add_parser("rank", parents=[common], help="l1 filter ranking and bound curves")

    c = sub.add_parser("mask-oracle", parents=[common], help="accuracy vs fraction of masked filters")
    c.add_argument("--fractions", default="0,0.1,...,1.0")
    c.add_argument("--layer", help="conv layer id (default: first conv)")

    c = sub.add_parser("noise-profile", parents=[common], help="observed per-filter noise vs ranking")
    c.add_argument("--layer", help="conv layer id (default: first conv)")

    sub.add_parser("defend", parents=[common], help="plan, attach and train regeneration units")
    sub.add_parser("retrain-adv", parents=[common], help="white-box adversarial retraining rounds")

    c = sub.add_parser("eval", parents=[common], help="run evaluation scenarios")
    c.add_argument("--scenarios", help=f"comma separated subset of {','.join(SCENARIOS)}")
    c.add_argument("--stage", choices=["defense", "retrained"], default="defense")

    sub.add_parser("report", parents=[common], help="aggregate stored reports into CSV and plots")
    return p


def _parse_value(text: str):
    return yaml.safe_load(text)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.override("global_seed", args.seed)
    if args.output_dir:
        cfg = cfg.override("output_dir", args.output_dir)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfg.override(k.strip(), _parse_value(v))
    return cfg


def _footer(ws: Workspace, *hashes: str) -> str:
    short = ", ".join(h[:12] for h in hashes if h)
    return f"config {ws.config.digest()}  seed {ws.config.seed}" + (f"  models {short}" if short else "")


def _write_json(ws: Workspace, sub: str, name: str, doc: dict, kind: str) -> Path:
    path = ws.path(sub, name)
    doc = dict(doc, config=ws.config.snapshot())
    path.write_text(json.dumps(doc, indent=2, default=str))
    ws.record(name, path, key=ws.config.digest(), kind=kind)
    return path


# -- commands --------------------------------------------------------------------

def cmd_train_baseline(ws: Workspace, args) -> dict:
    m = ws.baseline(args.arch)
    return {"model": m.architecture_id, "content_hash": m.content_hash,
            "clean_top1": m.metadata.get("clean_top1"), "parameters": m.parameter_count()}


def cmd_attack(ws: Workspace, args) -> dict:
    base = ws.baseline()
    norm = None if args.norm is None else ("inf" if args.norm == "inf" else 2)
    spec = ws.threat(norm_type=norm, xi_multiplier=args.xi_multiplier)
    default_count = ws.config["threat"]["set_size" if args.role == "train" else "test_set_size"]
    pset = ws.perturbation_set(args.role, base, spec, args.count or default_count,
                               require_target=args.role in ("train", "test"))
    return {"role": args.role, "digest": pset.digest(), "count": len(pset),
            "fooling_ratios": [p.achieved_fooling_ratio for p in pset.members],
            "max_abs_cosine": float(abs(pset.pairwise_cosines() - np.eye(len(pset))).max())}


def cmd_synth(ws: Workspace, args) -> dict:
    if args.count is not None:
        ws.config = ws.config.override("synthesis.count", args.count)
    pool = ws.training_pool()
    synth = [p for p in pool if p.attack_id == "synthetic"]
    folder = ws.root / "perturbations" / "synthetic"
    folder.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(synth):
        save_perturbation(p, folder / f"{i:04d}.uap", {"config": ws.config.snapshot()})
    ws.record("synthetic", folder, key=ws.config.digest(), count=len(synth))
    norms = [p.norm(2) for p in synth]
    return {"count": len(synth), "min_l2": min(norms, default=None), "max_l2": max(norms, default=None)}


def cmd_rank(ws: Workspace, args) -> dict:
    base = ws.baseline()
    paths = ws.write_rankings(base, with_noise=False)
    spec = ws.threat()
    for lid, r in ws.rankings(base).items():
        plots.bound_curve(ws.path("plots", f"bound-{lid}.png"), r, spec.xi, footer=_footer(ws, base.content_hash))
    return {"rankings": [str(p) for p in paths]}


def cmd_noise_profile(ws: Workspace, args) -> dict:
    base = ws.baseline()
    lid = args.layer or base.conv_layer_ids[0]
    ranking = l1_rank_filters(base.kernel(lid), lid)
    v = ws.test_set().members[0]
    noise = ws.noise_profile(lid, base, v)
    plots.bound_curve(ws.path("plots", f"noise-{lid}.png"), ranking, v.norm("inf"), noise,
                      footer=_footer(ws, base.content_hash))
    rho = float(spearmanr(ranking.scores, noise.per_filter_linf).statistic)
    _write_json(ws, "rankings", f"noise-{lid}.json",
                {"layer_id": lid, "scores": ranking.scores.tolist(), "order": ranking.order.tolist(),
                 "per_filter_linf": noise.per_filter_linf.tolist(), "spearman": rho,
                 "perturbation_id": v.ident, "model_hash": base.content_hash}, "noise-profile")
    return {"layer_id": lid, "spearman": rho}


def cmd_mask_oracle(ws: Workspace, args) -> dict:
    base = ws.baseline()
    lid = args.layer or ws.config["evaluation"]["mask_layer"] or base.conv_layer_ids[0]
    fractions = _fractions(args.fractions)
    ranking = l1_rank_filters(base.kernel(lid), lid)
    val = ws.splits()["val"]
    test = ws.test_set().members
    curves = {which: mask_sweep(base, lid, fractions, ranking, val, test, which) for which in ("top", "bottom")}
    clean = top1(base, val.images, val.labels)
    # same convention as the sweep: each perturbation applied to the whole split
    perturbed = pooled_perturbed_top1(base, val, test)
    plots.mask_curve(ws.path("plots", f"mask-{lid}.png"), fractions,
                     {"highest l1 first": curves["top"], "lowest l1 first": curves["bottom"]},
                     clean, perturbed, lid, footer=_footer(ws, base.content_hash))
    _write_json(ws, "reports", f"mask-{lid}.json",
                {"layer_id": lid, "fractions": fractions, "top": curves["top"], "bottom": curves["bottom"],
                 "clean_top1": clean, "perturbed_top1": perturbed, "model_hash": base.content_hash},
                "mask-oracle")
    return {"layer_id": lid, "fractions": fractions, "top": curves["top"], "bottom": curves["bottom"],
            "clean_top1": clean, "perturbed_top1": perturbed}


def cmd_defend(ws: Workspace, args) -> dict:
    dm = ws.defended()
    base = ws.baseline()
    return {"content_hash": dm.content_hash, "units": dm.plan.layer_ids,
            "unit_parameters": dm.unit_parameter_count(), "baseline_parameters": base.parameter_count(),
            "history": dm.history}


def cmd_retrain(ws: Workspace, args) -> dict:
    dm = ws.retrained()
    return {"content_hash": dm.content_hash, "pool_size": len(dm.pool), "history": dm.history}


def cmd_eval(ws: Workspace, args) -> dict:
    scenarios = args.scenarios.split(",") if args.scenarios else ws.config["evaluation"]["scenarios"]
    unknown = [s for s in scenarios if s not in SCENARIOS]
    if unknown:
        raise ConfigError(f"unknown scenarios: {unknown}")
    dm = ws.defense_for_stage(args.stage)
    base = ws.baseline()
    assets = ws.scenario_assets(scenarios)
    assets.config = dict(assets.config, stage=args.stage)
    reports: list[EvalReport] = []
    for s in scenarios:
        reps = run_scenario(s, dm, base, assets)
        write_reports_json(reps, ws.path("reports", f"{args.stage}-{s}.json"))
        ws.record(f"report-{args.stage}-{s}", ws.path("reports", f"{args.stage}-{s}.json"),
                  key=ws.config.digest(), defended_hash=dm.content_hash, baseline_hash=base.content_hash)
        reports += reps
        if s == "whitebox_secondary":
            plots.fooling_curves(ws.path("plots", f"whitebox-{args.stage}.png"),
                                 {r.extra["model"]: r.extra["attacker_curve"] for r in reps},
                                 footer=_footer(ws, dm.content_hash, base.content_hash))
    return {"stage": args.stage, "reports": [{"scenario_id": r.scenario_id, "restoration": r.restoration_accuracy,
                                              "clean_top1": r.clean_top1, "fooling_ratio": r.fooling_ratio}
                                             for r in reports]}


def cmd_report(ws: Workspace, args) -> dict:
    reports = []
    for path in sorted(ws.root.joinpath("reports").glob("*.json")):
        doc = json.loads(path.read_text())
        if isinstance(doc, list):
            reports += [EvalReport(**{k: d[k] for k in EvalReport.__dataclass_fields__ if k in d}) for d in doc]
    if not reports:
        raise FileNotFoundError(f"no evaluation reports under {ws.root / 'reports'}")
    csv_path = ws.path("reports", "summary.csv")
    write_reports_csv(reports, csv_path)
    ws.record("summary", csv_path, key=ws.config.digest(), rows=len(reports))
    pairs: dict[str, dict[str, float]] = {}
    for r in reports:
        cond, _, tag = r.scenario_id.rpartition("/")
        if r.scenario_id.startswith("whitebox_secondary"):
            continue
        pairs.setdefault(cond, {})[tag] = r.restoration_accuracy
    rows = [(c, v.get("baseline", math.nan), v.get("defended", math.nan)) for c, v in pairs.items()]
    if rows:
        plots.restoration_bars(ws.path("plots", "restoration.png"), rows, footer=_footer(ws))
    return {"rows": len(reports), "csv": str(csv_path)}


COMMANDS = {
    "train-baseline": cmd_train_baseline,
    "attack": cmd_attack,
    "synth": cmd_synth,
    "rank": cmd_rank,
    "mask-oracle": cmd_mask_oracle,
    "noise-profile": cmd_noise_profile,
    "defend": cmd_defend,
    "retrain-adv": cmd_retrain,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _error(kind: str, message: str, command=None, code: int = EXIT_FAILURE) -> int:
    record = {"status": "error", "error": kind, "message": message, "command": command}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _error("usage", str(exc), code=EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
        ws = Workspace(cfg)
        result = COMMANDS[args.command](ws, args)
    except ConfigError as exc:
        return _error("config", str(exc), args.command, EXIT_USAGE)
    except FileNotFoundError as exc:
        return _error("missing_asset", str(exc), args.command)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        log.debug("%s", traceback.format_exc())
        return _error(type(exc).__name__, str(exc), args.command)
    print(json.dumps({"status": "ok", "command": args.command, "output_dir": str(ws.root), "result": result},
                     default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
