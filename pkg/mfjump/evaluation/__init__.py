"""
Runtime monitors for solved particle systems
"""

from .monitors import (
    StabilityMetrics,
    energy_constant,
    moment_constant,
    s_norm,
    solution_s_norm,
    stability_metrics,
    time_continuity_constant,
    value_growth_constant,
)

__all__ = [
    "StabilityMetrics",
    "energy_constant",
    "moment_constant",
    "s_norm",
    "solution_s_norm",
    "stability_metrics",
    "time_continuity_constant",
    "value_growth_constant",
]
