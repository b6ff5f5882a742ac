"""Selective feature regeneration against universal adversarial perturbations."""

__version__ = "0.1.0"
