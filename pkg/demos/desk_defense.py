"""
A small defense run end to end
==============================

Train a baseline on the procedural texture set, attack it with universal
perturbations, attach regeneration units and train them, then compare the
restoration accuracy of the defended and undefended models. Everything is
shrunk so the script finishes in a few minutes on a CPU; the acceptance
suite runs the same steps at a larger scale (configs/desk.yaml).
"""

import sys
import tempfile

from featregen.cli import RunConfig, Workspace
from featregen.evaluation import run_scenario

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="featregen-demo-")
cfg = RunConfig({
    "dataset": {"train_limit": 4000, "val_limit": 1000, "heldout_size": 500},
    "model": {"epochs": 12},
    "threat": {"target_fooling_ratio": 0.7, "max_epochs": 10, "set_size": 3, "test_set_size": 3, "max_cosine": 0.5, "max_attempts": 24},
    "synthesis": {"count": 50},
    "training": {"epochs": 4, "milestones": [3]},
    "output_dir": out,
})
ws = Workspace(cfg)

base = ws.baseline()
print("baseline clean top-1:", round(base.metadata["clean_top1"], 4))

# universal perturbations computed against the baseline; the test set uses other seeds
train_set, test_set = ws.training_set(), ws.test_set()
print("training fooling ratios:", [round(p.achieved_fooling_ratio, 3) for p in train_set.members])

# units go on the top-ranked half of the filters; the baseline stays frozen
dm = ws.defended()
print("units at:", dm.plan.layer_ids, " unit parameters:", dm.unit_parameter_count(),
      " baseline parameters:", base.parameter_count())

assets = ws.scenario_assets(["same_norm"])
for r in run_scenario("same_norm", dm, base, assets):
    print(f"{r.scenario_id:28s} clean {r.clean_top1:.4f}  perturbed {r.perturbed_top1:.4f}  "
          f"restoration {r.restoration_accuracy:.4f}")
print("artifacts in", out)
