from .defense import (
    ContractViolationError,
    DefendedModel,
    DefenseHyper,
    GeometryError,
    adversarial_retrain,
    attach_units,
    load_defense,
    save_defense,
    train_defense,
)
from .masking import UnsupportedTopologyError, mask_indices, mask_oracle, mask_sweep
from .plan import MAX_UNITS, PlanEntry, RegenerationPlan, plan_regeneration, unit_sites
from .units import RegenerationUnit

__all__ = [
    "ContractViolationError", "DefendedModel", "DefenseHyper", "GeometryError", "MAX_UNITS", "PlanEntry",
    "RegenerationPlan", "RegenerationUnit", "UnsupportedTopologyError", "adversarial_retrain",
    "attach_units", "load_defense", "mask_indices", "mask_oracle", "mask_sweep", "plan_regeneration",
    "save_defense", "train_defense", "unit_sites",
]
