"""Tabular Q-learning, DQN variants, replay and episode loops."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..nn import Dense, Network
from .env import IDLE, MdpEnv, TruthObserver, state_index


@dataclass
class Experience:
    state: np.ndarray  # encoded observation, see encode_state
    action: int
    reward: float
    next_state: np.ndarray
    next_mask: np.ndarray


class ReplayBuffer:
    """FIFO experience store with uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def push(self, exp: Experience) -> None:
        self._items.append(exp)

    def sample(self, n: int, rng: np.random.Generator) -> list[Experience]:
        if n > len(self._items):
            raise ValueError(f"cannot sample {n} from a buffer of {len(self._items)}")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


def select_action(q_values, mask, epsilon: float, rng: np.random.Generator) -> int:
    """Masked epsilon-greedy; greedy ties go to the lowest index."""
    q = np.asarray(q_values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no admissible action")
    allowed = np.flatnonzero(mask)
    if rng.random() < epsilon:
        return int(rng.choice(allowed))
    return int(allowed[np.argmax(q[allowed])])


def epsilon_schedule(episode: int, n_episodes: int, start: float = 1.0, end: float = 0.05,
                     fraction: float = 0.8) -> float:
    """Linear decay from ``start`` to ``end`` over the first ``fraction`` of episodes."""
    horizon = max(1, int(fraction * n_episodes))
    return float(end + (start - end) * max(0.0, 1.0 - episode / horizon))


# ---------------------------------------------------------------------------
# tabular
# ---------------------------------------------------------------------------
class QTable:
    """``(2^M + 1) x (M + 1)`` table; the last row is the initial (pre-sensing) state."""

    def __init__(self, M: int):
        if M > 20:
            raise ValueError("tabular Q is limited to M <= 20")
        self.M = M
        self.q = np.zeros((2 ** M + 1, M + 1))

    @property
    def initial_row(self) -> int:
        return 2 ** self.M

    def row(self, obs) -> int:
        return self.initial_row if obs is None else state_index(obs)


def tabular_q_update(q: np.ndarray, s: int, a: int, r: float, s_next: int, alpha: float, gamma: float,
                     next_mask=None) -> float:
    """One Q-learning backup in place; returns the TD error."""
    nxt = q[s_next] if next_mask is None else q[s_next][np.asarray(next_mask, dtype=bool)]
    td = r + gamma * float(np.max(nxt)) - q[s, a]
    q[s, a] += alpha * td
    return float(td)


def value_iteration(P_next, R, gamma: float, masks=None, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Q* for a finite MDP given ``P_next[s, a, s']`` and expected rewards ``R[s, a]``.

    ``masks[s]`` restricts both the action set in ``s`` and the max in the backup.
    """
    P_next = np.asarray(P_next, dtype=float)
    R = np.asarray(R, dtype=float)
    S, A = R.shape
    masks = np.ones((S, A), dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    Q = np.zeros((S, A))
    for _ in range(max_iter):
        V = np.where(masks, Q, -np.inf).max(axis=1)
        Q_new = np.where(masks, R + gamma * P_next @ V, 0.0)
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
    return Q


def toy_mdp(env: MdpEnv):
    """Exact transition/reward model of a single-UAV, B=1, truth-observed environment.

    States are the 2^M occupancy patterns plus the initial state (index 2^M).
    """
    if env.num_uavs != 1 or env.process.B != 1:
        raise ValueError("the exact model covers one UAV and one base station")
    if not isinstance(env.observer, TruthObserver):
        raise ValueError("the exact model assumes the true occupancy is observed")
    M = env.M
    S = 2 ** M + 1
    P = env.process.matrices
    p_busy = np.empty((2, M))
    p_busy[0] = P[:, 0, 1]
    p_busy[1] = P[:, 1, 1]
    bits = ((np.arange(2 ** M)[:, None] >> np.arange(M)) & 1)
    trans = np.zeros((S, S))
    for s in range(2 ** M):
        pb = p_busy[bits[s], np.arange(M)]
        trans[s, :2 ** M] = np.prod(np.where(bits == 1, pb, 1.0 - pb), axis=1)
    from ..specgen.occupancy import stationary_busy
    pi = np.nan_to_num(stationary_busy(P), nan=0.0)
    init = np.prod(np.where(bits == 1, pi, 1.0 - pi), axis=1)
    # from the initial state the chain makes one transition before the first observation
    trans[S - 1, :2 ** M] = init @ trans[:2 ** M, :2 ** M]
    P_next = np.repeat(trans[:, None, :], M + 1, axis=1)
    R = np.zeros((S, M + 1))
    masks = np.zeros((S, M + 1), dtype=bool)
    masks[:, IDLE] = True
    U = env.U[0]
    for s in range(2 ** M):
        vac = bits[s] == 0
        masks[s, 1:] = vac
        for m in np.flatnonzero(vac):
            p_free = 1.0 - p_busy[0, m]
            R[s, m + 1] = U[m] * (2 * p_free - 1) / env.reward_scale
    return P_next, R, masks


def train_tabular(env: MdpEnv, episodes: int, steps: int, alpha: float = 0.1, gamma: float = 0.9,
                  rng: np.random.Generator | None = None, eps_start: float = 1.0, eps_end: float = 0.05,
                  eps_fraction: float = 0.8, callback=None) -> tuple[QTable, list]:
    """Q-learning for a single UAV; rewards are divided by ``env.reward_scale``."""
    if env.num_uavs != 1:
        raise ValueError("tabular Q handles a single UAV")
    rng = rng or np.random.default_rng(0)
    table = QTable(env.M)
    log = []
    for ep in range(episodes):
        eps = epsilon_schedule(ep, episodes, eps_start, eps_end, eps_fraction)
        env.reset()
        s = table.initial_row
        for t in range(steps):
            mask = env.mask()
            a = select_action(table.q[s], mask, eps, rng)
            obs, r, info = env.step([a])
            s2 = state_index(obs)
            td = tabular_q_update(table.q, s, a, r / env.reward_scale, s2, alpha, gamma, env.mask())
            log.append(EpisodeStep(ep, t, r, info.utility, info.collisions, eps, td * td, info.genie_utility))
            s = s2
        if callback:
            callback(ep, table)
    return table, log


# ---------------------------------------------------------------------------
# deep agents
# ---------------------------------------------------------------------------
def encode_state(obs, M: int) -> np.ndarray:
    """M occupancy bits plus an "initial" flag."""
    if obs is None:
        out = np.zeros(M + 1)
        out[M] = 1.0
        return out
    return np.concatenate([np.asarray(obs, dtype=float), [0.0]])


class QNetwork:
    """Dense(64, relu) -> Dense(64, relu) -> Dense(M + 1) on the encoded state."""

    def __init__(self, M: int, hidden: int = 64, rng: np.random.Generator | None = None):
        self.M = M
        self.net = Network([Dense(hidden, "relu"), Dense(hidden, "relu"), Dense(M + 1)], (M + 1,))
        self.w = self.net.init(rng or np.random.default_rng(0))

    def q(self, states, w=None) -> np.ndarray:
        return self.net.forward(self.w if w is None else w, np.atleast_2d(states))

    def copy_weights(self) -> np.ndarray:
        return self.w.copy()


def soft_update(target: np.ndarray, online: np.ndarray, rho: float) -> np.ndarray:
    """``target <- rho * online + (1 - rho) * target`` (in place, also returned)."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    target *= 1.0 - rho
    target += rho * online
    return target


DQN_VARIANTS = ("dqn", "ddqn", "ddqn-soft")


def dqn_targets(batch, qnet: QNetwork, target_w, variant: str, gamma: float, M: int) -> np.ndarray:
    """Bootstrapped targets for a batch of experiences.

    ``dqn`` maximizes the target network, ``ddqn`` and ``ddqn-soft`` pick the
    action with the online network and evaluate it with the target network.
    """
    if variant not in DQN_VARIANTS:
        raise ValueError(f"variant must be one of {DQN_VARIANTS}")
    S2 = np.array([e.next_state for e in batch])
    masks = np.array([e.next_mask for e in batch], dtype=bool)
    r = np.array([e.reward for e in batch])
    q_tgt = qnet.q(S2, target_w)
    if variant == "dqn":
        nxt = np.where(masks, q_tgt, -np.inf).max(axis=1)
    else:
        q_on = np.where(masks, qnet.q(S2), -np.inf)
        a_star = np.argmax(q_on, axis=1)
        nxt = q_tgt[np.arange(len(batch)), a_star]
    return r + gamma * nxt


def dqn_train_step(batch, qnet: QNetwork, target_w, variant: str, gamma: float, lr: float) -> float:
    """One SGD step on the mean squared TD error; returns the loss."""
    S = np.array([e.state for e in batch])
    A = np.array([e.action for e in batch])
    y = dqn_targets(batch, qnet, target_w, variant, gamma, qnet.M)
    out, cache = qnet.net.forward(qnet.w, S, return_cache=True)
    diff = out[np.arange(len(batch)), A] - y
    grad_out = np.zeros_like(out)
    grad_out[np.arange(len(batch)), A] = diff / len(batch)
    g = qnet.net.backward(qnet.w, cache, grad_out)
    qnet.w -= lr * g
    return float(0.5 * np.mean(diff ** 2))


@dataclass
class DqnConfig:
    variant: str = "ddqn-soft"
    episodes: int = 1000
    steps: int = 20
    gamma: float = 0.9
    lr: float = 0.01
    batch_size: int = 64
    replay: int = 10_000
    warmup: int = 256
    rho: float = 0.01
    target_period: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.8
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in DQN_VARIANTS:
            raise ValueError(f"variant must be one of {DQN_VARIANTS}")


@dataclass
class EpisodeStep:
    episode: int
    step: int
    reward: float
    utility: float
    collisions: int
    epsilon: float
    loss: float
    genie: float = 0.0


@dataclass
class DqnAgent:
    """A primary/target Q-network pair; several UAVs share it through top-k extraction."""

    config: DqnConfig
    M: int
    num_uavs: int = 1
    qnet: QNetwork | None = None
    target: np.ndarray | None = None

    def __post_init__(self):
        if self.qnet is None:
            self.qnet = QNetwork(self.M, self.config.hidden, np.random.default_rng(self.config.seed))
            self.target = self.qnet.copy_weights()

    def q_values(self, obs) -> np.ndarray:
        return self.qnet.q(encode_state(obs, self.M)[None, :])[0]

    def act(self, obs, mask, epsilon: float, rng) -> np.ndarray:
        return allocate_multi(self.q_values(obs), self.num_uavs, mask, epsilon, rng)


def allocate_multi(q_values, num_uavs: int, mask, epsilon: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Give UAVs the top admissible non-idle actions by Q-value, one channel each.

    Ties go to the lower index and surplus UAVs idle. With probability
    ``epsilon`` the admissible channels are taken in random order instead.
    """
    q = np.asarray(q_values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    cand = np.flatnonzero(mask[1:]) + 1
    if epsilon > 0 and rng is not None and rng.random() < epsilon:
        ranked = rng.permutation(cand)
    else:
        ranked = cand[np.lexsort((cand, -q[cand]))]
    actions = np.zeros(num_uavs, dtype=int)
    take = ranked[:num_uavs]
    actions[:len(take)] = take
    return actions


def train_dqn(env: MdpEnv, config: DqnConfig, callback=None) -> tuple[DqnAgent, list]:
    """Train the agent on per-UAV experiences; rewards are divided by ``env.reward_scale``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    agent = DqnAgent(cfg, env.M, env.num_uavs)
    buffer = ReplayBuffer(cfg.replay)
    log = []
    updates = 0
    for ep in range(cfg.episodes):
        eps = epsilon_schedule(ep, cfg.episodes, cfg.eps_start, cfg.eps_end, cfg.eps_fraction)
        obs = env.reset()
        for t in range(cfg.steps):
            s = encode_state(obs, env.M)
            actions = agent.act(obs, env.mask(), eps, rng)
            obs, r, info = env.step(actions)
            s2 = encode_state(obs, env.M)
            nmask = env.mask()
            for k in range(env.num_uavs):
                buffer.push(Experience(s, int(actions[k]), info.per_uav[k] / env.reward_scale, s2, nmask))
            loss = 0.0
            if len(buffer) >= max(cfg.warmup, cfg.batch_size):
                batch = buffer.sample(cfg.batch_size, rng)
                loss = dqn_train_step(batch, agent.qnet, agent.target, cfg.variant, cfg.gamma, cfg.lr)
                updates += 1
                if cfg.variant == "ddqn-soft":
                    soft_update(agent.target, agent.qnet.w, cfg.rho)
                elif updates % cfg.target_period == 0:
                    agent.target = agent.qnet.copy_weights()
            log.append(EpisodeStep(ep, t, r, info.utility, info.collisions, eps, loss, info.genie_utility))
        if callback:
            callback(ep, agent)
    return agent, log


def episode_means(log, field_name: str = "utility") -> np.ndarray:
    """Per-episode mean of a logged column."""
    eps = np.array([s.episode for s in log])
    vals = np.array([getattr(s, field_name) for s in log], dtype=float)
    n = eps.max() + 1 if len(eps) else 0
    return np.bincount(eps, weights=vals, minlength=n) / np.maximum(np.bincount(eps, minlength=n), 1)


def write_episode_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "reward", "utility", "collisions", "epsilon", "loss"])
        for s in log:
            w.writerow([s.episode, s.step, s.reward, s.utility, s.collisions, s.epsilon, s.loss])
