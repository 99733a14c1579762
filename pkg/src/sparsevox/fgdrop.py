"""Foreground dropout with prompt synchronisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tgif import PromptSet
from .voxcore import LabelGrid, RngStream


@dataclass(frozen=True)
class DropoutConfig:
    p: float = 0.2
    granularity: str = "class"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1], got {self.p}")
        if self.granularity != "class":
            raise ValueError("only per-class dropout is supported")


def drop_foreground(labels: LabelGrid, cfg: DropoutConfig, rng: RngStream, token_dim: int = 1):
    """Drop each present foreground class with probability ``cfg.p``.

    Voxels of a dropped class become 0. The prompt lists every retained
    non-empty class present in the grid in ascending index order. Returns
    ``(labels, prompt, dropped)``; the input grid is left untouched.
    """
    table = labels.class_table
    present = labels.present()
    fg = [k for k in present if table.is_foreground(k)]
    # one draw per present foreground class, in ascending class order
    draws = rng.random(len(fg)) if fg else np.empty(0)
    dropped = tuple(k for k, u in zip(fg, draws) if u < cfg.p)
    out = labels.copy()
    if dropped:
        out.labels[np.isin(out.labels, dropped)] = 0
    retained = tuple(k for k in present if k != 0 and k not in dropped)
    return out, PromptSet(retained, token_dim), dropped


def full_prompt(labels: LabelGrid, token_dim: int = 1) -> PromptSet:
    return PromptSet(tuple(k for k in labels.present() if k != 0), token_dim)
