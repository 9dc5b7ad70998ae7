"""Compact geometric railway track-maps estimated from GNSS fixes.

A track is an anchor pose followed by straights, transitional arcs
(clothoids) and circular arcs. Element parameters are refined by
Levenberg-Marquardt against GNSS measurements assigned to the elements.
"""

from .estimation import AssignmentSet, LMConfig, Measurement, optimize_map
from .evaluation import evaluate
from .geometry import Pose, Shape, TrackElement
from .trackmap import CompactTrackMap, InitialElementSet, InitialEntry, load_map, save_map

__version__ = "0.1.0"

__all__ = [
    "AssignmentSet",
    "CompactTrackMap",
    "InitialElementSet",
    "InitialEntry",
    "LMConfig",
    "Measurement",
    "Pose",
    "Shape",
    "TrackElement",
    "evaluate",
    "load_map",
    "optimize_map",
    "save_map",
]
