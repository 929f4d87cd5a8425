"""n-out-of-K fusion, collision accounting and the energy-efficiency objective."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class ConstraintViolation(ValueError):
    """An allocation breaks one of the scheduling constraints."""


def fuse(preds, n: int) -> np.ndarray:
    """Declare a subchannel vacant (0) when at least ``n`` UAVs report it vacant.

    ``preds`` is a ``K x M`` bit matrix (or ``T x K x M`` for a batch of slots).
    ``n = 1`` is the OR rule on vacancy votes, ``n = K`` the AND rule.
    """
    preds = np.asarray(preds)
    if preds.ndim < 2:
        raise ValueError("predictions must be a K x M matrix")
    K = preds.shape[-2]
    if not 1 <= n <= K:
        raise ValueError(f"fusion threshold n must lie in [1, {K}], got {n}")
    votes_vacant = (preds == 0).sum(axis=-2)
    return np.where(votes_vacant >= n, 0, 1).astype(np.uint8)


def collision_indicator(z_true_t, z_prev) -> np.ndarray:
    """+1 where a channel fused vacant last slot is really vacant now, -1 where it
    turned busy, 0 for channels that were not offered."""
    z_true_t = np.asarray(z_true_t)
    z_prev = np.asarray(z_prev)
    if z_true_t.shape != z_prev.shape:
        raise ValueError("z_true and z_prev must have equal length")
    offered = z_prev == 0
    return np.where(offered & (z_true_t == 0), 1, np.where(offered & (z_true_t != 0), -1, 0)).astype(np.int8)


def utility(t_a: float, W_m: float, snr_linear) -> np.ndarray | float:
    """Bits delivered in ``t_a`` seconds over ``W_m`` Hz at the given linear SNR."""
    snr = np.asarray(snr_linear, dtype=float)
    if np.any(snr < 0):
        raise ValueError("SNR must be non-negative")
    out = t_a * W_m * np.log2(1.0 + snr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CostModel:
    """Sub-slot durations (s), receiver voltage, transmit power (W) and subchannel bandwidth (Hz).

    ``t_b`` and ``t_req`` only enter slot accounting.
    """

    t_s: float = 1e-3
    t_b: float = 1e-3
    t_a: float = 1e-3
    t_req: float = 1e-3
    V_CC: float = 1.0
    P_tx: float = 0.2
    W_m: float = 10e6 / 16

    def __post_init__(self):
        for name in ("t_b", "t_a", "t_req", "V_CC", "P_tx", "W_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.t_s < 0:
            raise ValueError("t_s must be non-negative")

    @property
    def slot_duration(self) -> float:
        return self.t_req + self.t_s + self.t_b + self.t_a


def costs(model: CostModel) -> tuple[float, float]:
    """``(sensing cost, access cost)``: ``t_s V_CC^2 W_m`` and ``t_a P_tx``."""
    return model.t_s * model.V_CC ** 2 * model.W_m, model.t_a * model.P_tx


def check_allocation(y, z) -> None:
    """Raise :class:`ConstraintViolation` naming every broken constraint."""
    y = np.asarray(y)
    z = np.asarray(z)
    problems = []
    if not np.all((y == 0) | (y == 1)):
        problems.append("allocation entries must be 0 or 1")
    if y.ndim != 2 or y.shape[1] != z.shape[-1]:
        raise ConstraintViolation(f"allocation must be K x {z.shape[-1]}, got shape {y.shape}")
    per_uav = y.sum(axis=1)
    if np.any(per_uav > 1):
        problems.append(f"UAV(s) {np.flatnonzero(per_uav > 1).tolist()} hold more than one subchannel")
    per_ch = y.sum(axis=0)
    if np.any(per_ch > 1):
        problems.append(f"subchannel(s) {np.flatnonzero(per_ch > 1).tolist()} shared by several UAVs")
    budget = z.shape[-1] - int(np.sum(z))
    if y.sum() > budget:
        problems.append(f"{int(y.sum())} UAVs scheduled but only {budget} spectrum hole(s) detected")
    if problems:
        raise ConstraintViolation("; ".join(problems))


@dataclass
class SlotTerm:
    """One slot of the EE sum: allocation ``y`` (K x M), collisions ``c`` (M or K x M),
    utilities ``U`` (K x M), sensing cost ``SC`` and access cost ``AC`` (scalars or K x M),
    and the fused vector ``z`` the allocation was drawn from."""

    y: np.ndarray
    c: np.ndarray
    U: np.ndarray
    SC: object
    AC: object
    z: np.ndarray


def ee_objective(history) -> float:
    """Sum over slots, UAVs and subchannels of ``y c U / (y AC + SC)``."""
    total = 0.0
    for term in history:
        y = np.asarray(term.y, dtype=float)
        check_allocation(term.y, term.z)
        c = np.broadcast_to(np.asarray(term.c, dtype=float), y.shape)
        U = np.broadcast_to(np.asarray(term.U, dtype=float), y.shape)
        AC = np.broadcast_to(np.asarray(term.AC, dtype=float), y.shape)
        SC = np.broadcast_to(np.asarray(term.SC, dtype=float), y.shape)
        den = y * AC + SC
        num = y * c * U
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(num == 0, 0.0, num / np.where(den == 0, 1.0, den))
        total += float(frac.sum())
    return total


@dataclass
class FusionFrame:
    t: int
    preds: np.ndarray
    z: np.ndarray
    z_true: np.ndarray
    c: np.ndarray
    n: int


def fusion_trace(preds_by_slot, z_true_by_slot, n: int) -> list[FusionFrame]:
    """Fuse every slot and attach the collision vector against the previous fused slot.

    ``preds_by_slot`` is ``T x K x M``, ``z_true_by_slot`` is ``T x M``. The first
    slot has no previous allocation, so its collisions are all 0.
    """
    preds_by_slot = np.asarray(preds_by_slot)
    z_true_by_slot = np.asarray(z_true_by_slot)
    frames = []
    prev = None
    for t in range(len(preds_by_slot)):
        z = fuse(preds_by_slot[t], n)
        c = (np.zeros(z.shape, dtype=np.int8) if prev is None
             else collision_indicator(z_true_by_slot[t], prev))
        frames.append(FusionFrame(t, preds_by_slot[t], z, z_true_by_slot[t], c, n))
        prev = z
    return frames


def write_fusion_trace(path, frames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "channel", "votes_vacant", "z", "z_true", "c"])
        for f in frames:
            votes = (np.asarray(f.preds) == 0).sum(axis=0)
            for m in range(len(f.z)):
                w.writerow([f.t, m, int(votes[m]), int(f.z[m]), int(f.z_true[m]), int(f.c[m])])
