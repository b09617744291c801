"""Region tokens from point prompts over frozen patch features."""

from ._core import (
    Model,
    RenError,
    aggregate,
    ari,
    grid_prompts,
    read_rft,
    read_rtok,
    slic,
    token_count_curve,
    write_rft,
    write_initial_checkpoint,
    write_rtok,
)

__all__ = [
    "Model",
    "RenError",
    "aggregate",
    "ari",
    "grid_prompts",
    "read_rft",
    "read_rtok",
    "slic",
    "token_count_curve",
    "write_rft",
    "write_initial_checkpoint",
    "write_rtok",
]
