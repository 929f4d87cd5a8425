"""Spectrum-access MDP over binary-Markov subchannels."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..fusion import CostModel, collision_indicator, costs, fuse, utility
from ..specgen.occupancy import OccupancyProcess, default_transition_matrices
from ..specgen.signal import make_label

IDLE = 0


def state_index(obs) -> int:
    """Integer code of an M-bit observation (bit m is subchannel m)."""
    obs = np.asarray(obs, dtype=np.int64)
    return int(np.sum(obs << np.arange(len(obs), dtype=np.int64)))


def admissible_mask(obs) -> np.ndarray:
    """Idle plus every subchannel the observation reports vacant; length ``M + 1``."""
    obs = np.asarray(obs)
    return np.concatenate([[True], obs == 0])


# ---------------------------------------------------------------------------
# observation sources
# ---------------------------------------------------------------------------
class TruthObserver:
    """Reports the true occupancy."""

    def __call__(self, env: "MdpEnv", rng) -> np.ndarray:
        return env.z_true.copy()


class NoisyObserver:
    """True occupancy seen through per-UAV detectors with fixed error rates, then fused.

    This is the default observation: the fused vector the sensing stage hands on.

    ``p_miss`` is P(report vacant | busy) and ``p_fa`` P(report busy | vacant).
    """

    def __init__(self, K: int = 3, n: int = 2, p_miss: float = 0.05, p_fa: float = 0.05):
        self.K, self.n, self.p_miss, self.p_fa = K, n, p_miss, p_fa

    def __call__(self, env: "MdpEnv", rng) -> np.ndarray:
        z = env.z_true
        u = rng.random((self.K, len(z)))
        flip = np.where(z == 1, u < self.p_miss, u < self.p_fa)
        preds = np.where(flip, 1 - z, z)
        return fuse(preds, self.n)


class SensingObserver:
    """Full sensing chain: synthesize captures per UAV, run each UAV's model, fuse.

    Requires an occupancy process whose ``B`` matches the channel's base stations.
    """

    def __init__(self, models, plan, channel, snr_db: float = 10.0, n: int = 2, J: int = 32, cp_len: int = 8,
                 normalize: str = "record"):
        self.models, self.plan, self.channel = models, plan, channel
        self.snr_db, self.n, self.J, self.cp_len, self.normalize = snr_db, n, J, cp_len, normalize

    def __call__(self, env: "MdpEnv", rng) -> np.ndarray:
        from ..sensing import predict_hard
        from ..specgen.signal import add_noise_at_snr, propagate, synth_waveform

        I = env.process.state
        per_bs = [synth_waveform(self.plan, I[b], rng, 1, self.cp_len) for b in range(I.shape[0])]
        preds = []
        for k, model in enumerate(self.models):
            clean = propagate(self.channel, per_bs, k)[self.cp_len:self.cp_len + self.J]
            p = float(np.mean(np.abs(clean) ** 2))
            ref = self.channel.path_power(k).sum() / self.plan.M
            noisy, _ = add_noise_at_snr(clean, self.snr_db, rng, power=p if p > 0 else ref)
            preds.append(predict_hard(model, noisy[None, :], self.normalize)[0])
        return fuse(np.array(preds), self.n)


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------
def default_snr_table_db(num_uavs: int, M: int, seed: int = 0) -> np.ndarray:
    """Frequency-selective per-(UAV, subchannel) SNR around 10 dB."""
    rng = np.random.default_rng(seed)
    base = 10.0 + 6.0 * np.sin(np.linspace(0, 2 * np.pi, M, endpoint=False) + 0.7)
    return base[None, :] + rng.normal(0.0, 3.0, size=(num_uavs, M))


def snr_table_from_channel(channel, plan, noise_var: float, tx_power: float = 1.0) -> np.ndarray:
    """Linear SNR per (UAV, subchannel) from each UAV's strongest link's frequency response."""
    table = np.empty((channel.K, plan.M))
    freqs = np.arange(plan.fft_size)
    for k in range(channel.K):
        b = int(np.argmax(channel.path_power(k)))
        d = np.asarray(channel.delays[k][b])
        g = np.asarray(channel.gains[k][b])
        H = np.exp(-2j * np.pi * np.outer(freqs, d) / plan.fft_size) @ g
        band = (np.abs(H) ** 2).reshape(plan.M, plan.n_sc).mean(axis=1)
        table[k] = tx_power * band / noise_var
    return table


@dataclass
class StepInfo:
    utility: float  # delivered bits (successful transmissions only)
    reward: float  # signed utility
    collisions: int
    genie_utility: float
    per_uav: np.ndarray


class MdpEnv:
    """Secondary-user scheduling environment.

    At each step the agent allocates channels based on the current observation
    ``z(t)``; the chains then advance, each transmission earns ``c * U`` against
    the new true state, and ``z(t+1)`` is observed. Right after :meth:`reset` no
    sensing has happened yet and only the idle action is admissible.
    """

    def __init__(self, process: OccupancyProcess | None = None, snr_db=None, num_uavs: int = 1,
                 cost_model: CostModel | None = None, observer=None, rng: np.random.Generator | None = None,
                 initial_state=None):
        self.process = process or OccupancyProcess(default_transition_matrices(16), B=1)
        self.M = self.process.M
        self.num_uavs = int(num_uavs)
        snr_db = default_snr_table_db(self.num_uavs, self.M) if snr_db is None else np.asarray(snr_db, dtype=float)
        snr_db = np.atleast_2d(snr_db)
        if snr_db.shape != (self.num_uavs, self.M):
            raise ValueError(f"SNR table must be {self.num_uavs} x {self.M}, got {snr_db.shape}")
        self.snr_db = snr_db
        self.cost_model = cost_model or CostModel()
        self.U = utility(self.cost_model.t_a, self.cost_model.W_m, 10 ** (snr_db / 10.0))
        self.observer = observer or NoisyObserver()
        self.rng = rng or np.random.default_rng(0)
        self._initial_state = initial_state
        self.obs = None
        self.reset()

    @property
    def reward_scale(self) -> float:
        """Bits per unit of spectral efficiency, ``t_a * W_m``."""
        return self.cost_model.t_a * self.cost_model.W_m

    @property
    def z_true(self) -> np.ndarray:
        return make_label(self.process.state)

    def reset(self, sample_state: bool = True):
        """Start an episode; returns ``None`` (the initial, pre-sensing state)."""
        if self._initial_state is not None:
            self.process.state = np.array(self._initial_state, dtype=np.uint8).reshape(self.process.B, self.M)
        elif sample_state:
            from ..specgen.occupancy import stationary_busy
            pi = np.nan_to_num(stationary_busy(self.process.matrices), nan=0.0)
            self.process.state = (self.rng.random((self.process.B, self.M)) < pi).astype(np.uint8)
        self.obs = None
        return None

    def mask(self) -> np.ndarray:
        if self.obs is None:
            m = np.zeros(self.M + 1, dtype=bool)
            m[IDLE] = True
            return m
        return admissible_mask(self.obs)

    def check_actions(self, actions) -> np.ndarray:
        actions = np.atleast_1d(np.asarray(actions, dtype=int))
        if len(actions) != self.num_uavs:
            raise ValueError(f"expected {self.num_uavs} action(s), got {len(actions)}")
        if np.any((actions < 0) | (actions > self.M)):
            raise ValueError(f"actions must lie in [0, {self.M}]")
        busy = actions[actions != IDLE]
        if len(np.unique(busy)) != len(busy):
            raise ValueError("two UAVs were allocated the same subchannel")
        return actions

    def genie(self, z_true) -> tuple[np.ndarray, float]:
        """Best feasible allocation against a known true state (exhaustive search)."""
        return oracle_allocation(z_true, self.U)

    def step(self, actions):
        """Apply per-UAV actions (0 = idle, m + 1 = subchannel m)."""
        actions = self.check_actions(actions)
        z_prev = self.obs
        self.process.step(self.rng)
        z_true = self.z_true
        per_uav = np.zeros(self.num_uavs)
        delivered = 0.0
        collisions = 0
        if z_prev is not None:
            c = collision_indicator(z_true, z_prev)
            for k, a in enumerate(actions):
                if a == IDLE:
                    continue
                m = a - 1
                per_uav[k] = c[m] * self.U[k, m]
                if c[m] == 1:
                    delivered += self.U[k, m]
                elif c[m] == -1:
                    collisions += 1
        # the genie competes only in slots where an allocation is possible
        genie_u = self.genie(z_true)[1] if z_prev is not None else 0.0
        self.obs = np.asarray(self.observer(self, self.rng), dtype=np.uint8)
        info = StepInfo(utility=delivered, reward=float(per_uav.sum()), collisions=collisions,
                        genie_utility=genie_u, per_uav=per_uav)
        return self.obs.copy(), float(per_uav.sum()), info

    def sensing_and_access_costs(self) -> tuple[float, float]:
        return costs(self.cost_model)


def feasible_allocations(M: int, num_uavs: int, vacant=None):
    """Every assignment of distinct subchannels (or idle) to each UAV.

    With ``vacant`` given, only those subchannels may be used and the number of
    transmitting UAVs is capped by the vacancy count.
    """
    channels = range(M) if vacant is None else [m for m in range(M) if vacant[m]]
    channels = list(channels)
    for n_active in range(0, min(num_uavs, len(channels)) + 1):
        for who in itertools.combinations(range(num_uavs), n_active):
            for chans in itertools.permutations(channels, n_active):
                a = np.zeros(num_uavs, dtype=int)
                for k, m in zip(who, chans):
                    a[k] = m + 1
                yield a


def oracle_allocation(z_true, U) -> tuple[np.ndarray, float]:
    """Utility-maximizing feasible allocation when the true state is revealed.

    ``U`` is ``num_uavs x M``. Exhaustive over assignments restricted to truly
    vacant channels; ties go to the first assignment enumerated.
    """
    z_true = np.asarray(z_true)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    K, M = U.shape
    vacant = z_true == 0
    if K == 1:
        if not vacant.any():
            return np.zeros(1, dtype=int), 0.0
        m = int(np.argmax(np.where(vacant, U[0], -np.inf)))
        return np.array([m + 1]), float(U[0, m])
    best, best_u = np.zeros(K, dtype=int), 0.0
    for a in feasible_allocations(M, K, vacant):
        u = sum(U[k, x - 1] for k, x in enumerate(a) if x != IDLE)
        if u > best_u:
            best, best_u = a, float(u)
    return best, best_u
