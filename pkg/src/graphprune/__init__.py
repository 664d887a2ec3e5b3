"""Automatic removal-structure search spaces, hierarchical half-space
projected training and compact sub-network construction for small
convolutional networks described as operator graphs."""

__version__ = "0.1.0"

from .engine import ParamStore, init_params, make_store, predict
from .h2spg import H2SPGConfig, InfeasibleSparsityError, TrainedSolution, hierarchical_search
from .ir import GraphError, TraceGraph
from .modelio import parse_model_spec, serialize_model
from .search_space import build_segment_graph, discover_removal_structures, removal_validity
from .surgeon import apply_surgery, equivalence_check, plan_surgery, report_compression

__all__ = [
    "GraphError", "H2SPGConfig", "InfeasibleSparsityError", "ParamStore", "TraceGraph",
    "TrainedSolution", "apply_surgery", "build_segment_graph", "discover_removal_structures",
    "equivalence_check", "hierarchical_search", "init_params", "make_store", "parse_model_spec",
    "plan_surgery", "predict", "removal_validity", "report_compression", "serialize_model",
]
