"""Waveform synthesis, multipath propagation, noise and labels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .plan import SubchannelPlan

_QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2.0)


def synth_waveform(plan: SubchannelPlan, occupancy_row, rng: np.random.Generator,
                   n_symbols: int = 1, cp_len: int = 0) -> np.ndarray:
    """OFDM stream from one base station.

    Each occupied subchannel gets unit-power QPSK symbols on its ``n_sc``
    subcarriers; unoccupied ones get exactly zero. The returned stream is
    ``n_symbols`` symbols of ``cp_len + fft_size`` samples, scaled so that one
    active subcarrier contributes ``1 / fft_size`` to the mean sample power.
    """
    row = np.asarray(occupancy_row)
    if row.shape != (plan.M,):
        raise ValueError(f"occupancy row must have length {plan.M}, got shape {row.shape}")
    N = plan.fft_size
    # draw symbols for every subcarrier so the stream is a fixed function of rng
    sym = _QPSK[rng.integers(0, 4, size=(n_symbols, N))]
    mask = np.repeat(row.astype(bool), plan.n_sc)
    X = np.where(mask, sym, 0.0)
    x = np.fft.ifft(X, axis=1) * np.sqrt(N)
    if cp_len:
        x = np.concatenate([x[:, N - cp_len:], x], axis=1)
    return x.reshape(-1)


@dataclass
class MultipathChannel:
    """Tapped-delay paths between every base station ``b`` and UAV ``k``.

    ``delays[k][b]`` are integer sample delays (strictly increasing) and
    ``gains[k][b]`` the matching complex gains.
    """

    delays: list
    gains: list
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.delays) != len(self.gains):
            raise ValueError("delays and gains must cover the same UAVs")
        for k, (dk, gk) in enumerate(zip(self.delays, self.gains)):
            if len(dk) != len(gk):
                raise ValueError(f"UAV {k}: delays and gains cover different base stations")
            for b, (d, g) in enumerate(zip(dk, gk)):
                d = np.asarray(d)
                if d.size < 1 or d.size != np.asarray(g).size:
                    raise ValueError(f"pair (b={b}, k={k}) needs at least one tap with matching gain")
                if np.any(d < 0) or np.any(np.diff(d) <= 0):
                    raise ValueError(f"pair (b={b}, k={k}): delays must be non-negative and strictly increasing")

    @property
    def K(self) -> int:
        return len(self.delays)

    @property
    def B(self) -> int:
        return len(self.delays[0])

    @property
    def max_delay(self) -> int:
        return max(int(np.max(d)) for dk in self.delays for d in dk)

    def path_power(self, k: int) -> np.ndarray:
        """Total power gain sum |g|^2 from each base station to UAV ``k``."""
        return np.array([np.sum(np.abs(np.asarray(g)) ** 2) for g in self.gains[k]])

    def scaled(self, factor: float) -> "MultipathChannel":
        return MultipathChannel(self.delays, [[np.asarray(g) * factor for g in gk] for gk in self.gains],
                                seed=self.seed, meta=dict(self.meta))

    @classmethod
    def random(cls, K: int, B: int, rng: np.random.Generator, n_taps: int = 3, max_delay: int = 8,
               decay: float = 0.5, path_gain_db=None) -> "MultipathChannel":
        """Exponentially decaying taps with random phases and random delays.

        ``path_gain_db`` is an optional ``K x B`` matrix of large-scale gains.
        """
        if n_taps > max_delay + 1:
            raise ValueError("cannot place n_taps distinct delays within max_delay")
        pg = np.zeros((K, B)) if path_gain_db is None else np.asarray(path_gain_db, dtype=float)
        if pg.shape != (K, B):
            raise ValueError(f"path_gain_db must have shape {(K, B)}, got {pg.shape}")
        delays, gains = [], []
        for k in range(K):
            dk, gk = [], []
            for b in range(B):
                d = np.sort(rng.choice(np.arange(1, max_delay + 1), size=n_taps - 1, replace=False))
                d = np.concatenate([[0], d]).astype(int)
                amp = np.exp(-decay * np.arange(n_taps))
                amp = amp / np.sqrt(np.sum(amp ** 2))
                phase = np.exp(2j * np.pi * rng.random(n_taps))
                dk.append(d)
                gk.append(amp * phase * 10 ** (pg[k, b] / 20.0))
            delays.append(dk)
            gains.append(gk)
        return cls(delays, gains)


def _tapped_delay(x: np.ndarray, delays, gains) -> np.ndarray:
    y = np.zeros(len(x), dtype=complex)
    n = len(x)
    for d, g in zip(delays, gains):
        d = int(d)
        if d < n:
            y[d:] += g * x[:n - d]
    return y


def propagate(channel: MultipathChannel, per_bs_signals, k: int) -> np.ndarray:
    """Noise-free stream at UAV ``k``: tapped-delay filtering summed over base stations.

    Output has the input length (the convolution tail is dropped).
    """
    signals = [np.asarray(s) for s in per_bs_signals]
    if len(signals) != channel.B:
        raise ValueError(f"expected {channel.B} base-station streams, got {len(signals)}")
    lengths = {len(s) for s in signals}
    if len(lengths) != 1:
        raise ValueError(f"all base-station streams must have equal length, got {sorted(lengths)}")
    out = np.zeros(lengths.pop(), dtype=complex)
    for b, s in enumerate(signals):
        out += _tapped_delay(s, channel.delays[k][b], channel.gains[k][b])
    return out


def add_noise_at_snr(signal, snr_db: float, rng: np.random.Generator, power: float | None = None):
    """Add circular complex Gaussian noise so that the stream sits at ``snr_db``.

    ``power`` overrides the measured signal power used for calibration. Returns
    ``(noisy, sigma2)``.
    """
    x = np.asarray(signal, dtype=complex)
    p = float(np.mean(np.abs(x) ** 2)) if power is None else float(power)
    if not np.isfinite(snr_db):
        return x.copy(), 0.0
    if p <= 0.0:
        raise ValueError("cannot calibrate noise to a finite SNR on a zero-power signal")
    sigma2 = p / 10 ** (snr_db / 10.0)
    noise = np.sqrt(sigma2 / 2.0) * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
    return x + noise, sigma2


def make_label(I) -> np.ndarray:
    """Subchannel is busy if any base station occupies it."""
    I = np.atleast_2d(np.asarray(I))
    return (I.sum(axis=0) >= 1).astype(np.uint8)
