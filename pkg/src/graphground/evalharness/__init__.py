"""Synthetic data, a brute-force reference matcher and accuracy metrics."""

from .metrics import evaluate
from .oracle import brute_force_ground
from .synthetic import SynthSpec, gen_synthetic

__all__ = ["SynthSpec", "brute_force_ground", "evaluate", "gen_synthetic"]
