"""
Closed-loop simulation, safety tables and value-structure exports.
"""

from .export import ValueSlice, basis_ranking, export_value_grid
from .safety import MethodSpec, SafetyReport, Variant, safety_table
from .simulate import PolicyKind, SimCase, closed_loop_sim, detect_collision

__all__ = [
    "PolicyKind",
    "SimCase",
    "closed_loop_sim",
    "detect_collision",
    "MethodSpec",
    "SafetyReport",
    "Variant",
    "safety_table",
    "ValueSlice",
    "basis_ranking",
    "export_value_grid",
]
