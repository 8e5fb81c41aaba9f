"""Reproducible Gaussian increments addressed by (seed, replica, step, mode, lane).

The generator is Philox-4x64 (``numpy.random.Philox``) keyed by
``(master_seed, replica_id)``.  Every time step owns a fixed block of Philox
counters, so the normal attached to a given ``(step, slot)`` does not depend on
how many steps were drawn before it or in what chunking.  Each 64-bit word is
mapped to a uniform on (0, 1) with 53 bits and then to a standard normal by the
inverse CDF (``scipy.special.ndtri``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = ["NoisePlan"]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoisePlan:
    master_seed: int
    replica_id: int = 0

    def _bitgen(self, counter: int) -> np.random.Philox:
        key = (int(self.master_seed) & _MASK64) | ((int(self.replica_id) & _MASK64) << 64)
        return np.random.Philox(key=key, counter=counter)

    def normals(self, step_start: int, n_steps: int, n_slots: int) -> np.ndarray:
        """Standard normals of shape ``(n_steps, n_slots)`` for steps ``step_start, ...``.

        Slot ``s`` of step ``n`` always maps to Philox word ``4 * n * ceil(n_slots / 4) + s``,
        so ``n_slots`` is part of the address (callers keep it fixed per experiment).
        """
        if n_steps <= 0:
            return np.empty((0, n_slots))
        per_step = -(-n_slots // 4)
        bg = self._bitgen(step_start * per_step)
        raw = bg.random_raw(n_steps * per_step * 4).reshape(n_steps, per_step * 4)[:, :n_slots]
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
        return ndtri(u)

    def for_replica(self, replica_id: int) -> "NoisePlan":
        return NoisePlan(self.master_seed, replica_id)
