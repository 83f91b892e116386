"""Disentangled rank-one knowledge editing on a toy transformer."""

from ._core import (
    DikeError,
    dike_update,
    evaluate_objective,
    gelu,
    harmonic_mean,
    info_nce,
    memit_update,
    softmax_cross_entropy,
    solve_spd,
    world_summary,
    __version__,
)

__all__ = [
    "DikeError",
    "dike_update",
    "evaluate_objective",
    "gelu",
    "harmonic_mean",
    "info_nce",
    "memit_update",
    "softmax_cross_entropy",
    "solve_spd",
    "world_summary",
    "__version__",
]
