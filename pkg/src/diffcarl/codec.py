"""Discrete action set shared by the learners and the schedulers."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ActionCodec:
    """Joint index over (ESS level, CDG level, shedding level).

    ``index = (ess_i * n_cdg + cdg_i) * n_ls + ls_i``. ESS levels are
    fractions of the rated power (negative = charge), CDG levels fractions
    of ``p_max`` and shedding levels fractions of the current load.
    """

    ess_levels: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)
    cdg_levels: tuple = (0.0, 0.5, 1.0)
    ls_levels: tuple = (0.0, 0.25, 0.5)

    @property
    def n_actions(self) -> int:
        return len(self.ess_levels) * len(self.cdg_levels) * len(self.ls_levels)

    def encode(self, ess_i: int, cdg_i: int, ls_i: int) -> int:
        n_c, n_l = len(self.cdg_levels), len(self.ls_levels)
        if not (0 <= ess_i < len(self.ess_levels) and 0 <= cdg_i < n_c and 0 <= ls_i < n_l):
            raise ValueError("level index out of range")
        return (ess_i * n_c + cdg_i) * n_l + ls_i

    def levels(self, index):
        """Split joint index (scalar or array) into (ess_i, cdg_i, ls_i)."""
        index = np.asarray(index)
        if np.any((index < 0) | (index >= self.n_actions)):
            raise ValueError(f"action index out of range [0, {self.n_actions})")
        n_c, n_l = len(self.cdg_levels), len(self.ls_levels)
        return index // (n_c * n_l), (index // n_l) % n_c, index % n_l

    def fractions(self, index):
        ei, ci, li = self.levels(index)
        return (
            np.asarray(self.ess_levels, dtype=float)[ei],
            np.asarray(self.cdg_levels, dtype=float)[ci],
            np.asarray(self.ls_levels, dtype=float)[li],
        )

    def decode(self, index, load_kw, p_ch_max, p_dis_max, p_cdg_max):
        """Setpoints ``(p_ess, p_cdg, p_ls)`` in kW; broadcasts over arrays."""
        fe, fc, fl = self.fractions(index)
        p_ess = np.where(fe > 0, fe * p_dis_max, fe * p_ch_max)
        return p_ess, fc * p_cdg_max, fl * np.asarray(load_kw, dtype=float)

    def table(self) -> np.ndarray:
        """All (ess, cdg, ls) fractions as an ``(n_actions, 3)`` array."""
        return np.stack(self.fractions(np.arange(self.n_actions)), axis=1)

    def digest(self) -> str:
        return hashlib.sha256(self.table().tobytes()).hexdigest()[:16]
