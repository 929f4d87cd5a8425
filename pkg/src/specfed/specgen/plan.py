from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SubchannelPlan:
    """Band layout shared by the generator, the sensing model and the scheduler.

    The cell bandwidth ``W`` is cut into ``M`` equal subchannels, each carrying
    ``n_sc`` OFDM subcarriers, so one OFDM symbol spans ``fft_size = M * n_sc``
    samples. ``B`` base stations transmit and ``K`` UAVs listen.
    """

    M: int = 16
    W: float = 10e6
    n_sc: int = 4
    B: int = 3
    K: int = 3

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.n_sc < 1:
            raise ValueError(f"n_sc must be >= 1, got {self.n_sc}")
        if self.B < 1 or self.K < 1:
            raise ValueError("B and K must be >= 1")
        if not self.W > 0:
            raise ValueError("W must be positive")

    @property
    def fft_size(self) -> int:
        return self.M * self.n_sc

    @property
    def W_m(self) -> float:
        return self.W / self.M

    def subcarriers(self, m: int) -> range:
        """DFT bin indices owned by subchannel ``m``."""
        return range(m * self.n_sc, (m + 1) * self.n_sc)
