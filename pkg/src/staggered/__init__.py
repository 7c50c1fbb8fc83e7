"""Staggered-adoption treatment effect estimators and a ground-truth panel simulator."""

from .panel import NEVER, PanelDataset, load_panel, save_panel
from .simgen import SimSpec, generate

__version__ = "0.1.0"

__all__ = ["NEVER", "PanelDataset", "load_panel", "save_panel", "SimSpec", "generate", "__version__"]
