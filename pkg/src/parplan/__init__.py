"""Plan compiler for parallel DNN training: partition, place and order operators,
materialize communication, and check plans by simulation and exact execution."""

from .commplan import pattern_match_collectives
from .compiler import CompileResult, compile_plan, load_plan
from .errors import PlanError
from .graph import ClusterSpec, Mask, PlanGraph, load_graph
from .materialize import insert_frees, materialize
from .refexec import compare, random_inputs, run_plan, run_reference
from .schedule import complete_order, op_assign, op_order, validate
from .simulate import lower, simulate
from .strategies import StrategyConfig, apply_strategy
from .transform import adapt_backward, mark_recompute, op_trans

__all__ = [
    "ClusterSpec", "CompileResult", "Mask", "PlanError", "PlanGraph", "StrategyConfig",
    "adapt_backward", "apply_strategy", "compare", "compile_plan", "complete_order",
    "insert_frees", "load_graph", "load_plan", "lower", "mark_recompute", "materialize",
    "op_assign", "op_order", "op_trans", "pattern_match_collectives", "random_inputs",
    "run_plan", "run_reference", "simulate", "validate",
]
