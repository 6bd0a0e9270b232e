"""Linear probes on intermediate layers of a frozen network under distribution shift."""

from . import analysis, backbone, evaluation, feature_store, metrics, probe_engine, synth_data
from .errors import ILCError

__all__ = ["analysis", "backbone", "evaluation", "feature_store", "metrics", "probe_engine", "synth_data", "ILCError"]
__version__ = "0.1.0"
