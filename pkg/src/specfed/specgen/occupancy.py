"""Per-subchannel two-state Markov occupancy."""
from __future__ import annotations

import numpy as np


def default_transition_matrices(M: int = 16) -> np.ndarray:
    """A deterministic spread of sticky chains, one per subchannel.

    Per-BS busy probabilities range over roughly 0.1-0.35 so that the union over
    three base stations is close to balanced.
    """
    idx = np.arange(M)
    p10 = 0.10 + 0.20 * ((idx * 7) % M) / max(M - 1, 1)
    pi1 = 0.10 + 0.25 * ((idx * 5 + 3) % M) / max(M - 1, 1)
    p01 = pi1 * p10 / (1.0 - pi1)
    return transition_matrices(p01, p10)


def transition_matrices(p01, p10) -> np.ndarray:
    """Stack ``[[1-p01, p01], [p10, 1-p10]]`` for each subchannel."""
    p01 = np.asarray(p01, dtype=float)
    p10 = np.asarray(p10, dtype=float)
    P = np.empty(p01.shape + (2, 2))
    P[..., 0, 0] = 1.0 - p01
    P[..., 0, 1] = p01
    P[..., 1, 0] = p10
    P[..., 1, 1] = 1.0 - p10
    return P


def stationary_busy(P: np.ndarray) -> np.ndarray:
    """Long-run fraction of time each chain spends busy, ``p01 / (p01 + p10)``."""
    p01 = P[..., 0, 1]
    p10 = P[..., 1, 0]
    denom = p01 + p10
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, p01 / np.where(denom > 0, denom, 1.0), np.nan)


class OccupancyProcess:
    """``B`` base stations, each running ``M`` independent binary chains.

    All base stations share the per-subchannel matrix ``P[m]``; their chains are
    otherwise independent.
    """

    def __init__(self, matrices, B: int = 1, initial=None, rng: np.random.Generator | None = None):
        P = np.array(matrices, dtype=float)
        if P.ndim != 3 or P.shape[1:] != (2, 2):
            raise ValueError(f"transition matrices must have shape (M, 2, 2), got {P.shape}")
        if np.any(P < 0) or np.any(P > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("every row of every transition matrix must sum to 1")
        self.matrices = P
        self.B = int(B)
        M = P.shape[0]
        if initial is None:
            if rng is None:
                state = np.zeros((self.B, M), dtype=np.uint8)
            else:
                pi = np.nan_to_num(stationary_busy(P), nan=0.0)
                state = (rng.random((self.B, M)) < pi).astype(np.uint8)
        else:
            state = np.array(initial, dtype=np.uint8).reshape(self.B, M)
            if np.any(state > 1):
                raise ValueError("occupancy state must be binary")
        self.state = state

    @property
    def M(self) -> int:
        return self.matrices.shape[0]

    def step(self, rng: np.random.Generator) -> np.ndarray:
        """Advance every chain by one slot and return the new ``B x M`` state."""
        # probability of being busy next, given the current bit
        p_busy = np.where(self.state == 1, self.matrices[:, 1, 1], self.matrices[:, 0, 1])
        u = rng.random(self.state.shape)
        self.state = (u < p_busy).astype(np.uint8)
        return self.state.copy()


def step_occupancy(proc: OccupancyProcess, rng: np.random.Generator) -> np.ndarray:
    return proc.step(rng)
