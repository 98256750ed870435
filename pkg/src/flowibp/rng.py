"""Counter-based random streams keyed by (master seed, purpose, path index).

Every path in a Monte Carlo experiment derives its randomness solely from
the master seed and its own index, so results do not depend on how paths
are distributed over workers or chunks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PURPOSES = {
    "brownian": 1,
    "base_points": 2,
    "test": 3,
}

_MASK64 = (1 << 64) - 1


def _key(master_seed: int, purpose: str, index: int) -> np.ndarray:
    code = _PURPOSES[purpose]
    hi = master_seed & _MASK64
    lo = ((code << 56) ^ (index & ((1 << 56) - 1))) & _MASK64
    return np.array([hi, lo], dtype=np.uint64)


@dataclass(frozen=True)
class RngPolicy:
    """Derives independent, reproducible Philox streams per (purpose, index)."""

    master_seed: int

    def generator(self, purpose: str, index: int = 0) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=_key(self.master_seed, purpose, index)))

    def fill_normals(self, purpose: str, start: int, out: np.ndarray) -> np.ndarray:
        """Fill out[i] with standard normals from stream (purpose, start + i).

        Reuses one Philox bit generator and reassigns its key per row; this
        is bit-identical to constructing a fresh generator per stream.
        """
        bg = np.random.Philox(key=0)
        gen = np.random.Generator(bg)
        state = bg.state
        zero_counter = np.zeros(4, dtype=np.uint64)
        shape = out.shape[1:]
        for i in range(out.shape[0]):
            state["state"] = {"counter": zero_counter,
                              "key": _key(self.master_seed, purpose, start + i)}
            state["buffer_pos"] = 4
            state["has_uint32"] = 0
            state["uinteger"] = 0
            bg.state = state
            out[i] = gen.standard_normal(shape)
        return out
