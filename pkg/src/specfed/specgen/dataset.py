"""Multi-cell I/Q dataset generation."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..rng import substream
from .occupancy import OccupancyProcess, default_transition_matrices, transition_matrices
from .plan import SubchannelPlan
from .signal import MultipathChannel, add_noise_at_snr, make_label, propagate, synth_waveform

log = logging.getLogger(__name__)

DEFAULT_SNR_DB = (-10.0, 0.0, 10.0, 20.0)

# Large-scale gain (dB) from each base station (columns) to each UAV (rows).
# UAVs 1 and 2 hear all three cells within a few dB; UAV 3 sits deep in one
# cell with the neighbours far below it.
DEFAULT_PATH_GAIN_DB = (
    (0.0, -3.0, -5.0),
    (-2.0, 0.0, -4.0),
    (-10.0, -24.0, -27.0),
)


@dataclass
class GenerationConfig:
    seed: int = 0
    slots: int = 4200
    M: int = 16
    W: float = 10e6
    n_sc: int = 4
    B: int = 3
    K: int = 3
    J: int = 32
    cp_len: int = 8
    snr_db: list = field(default_factory=lambda: list(DEFAULT_SNR_DB))
    p01: list | None = None
    p10: list | None = None
    n_taps: int = 3
    max_delay: int = 8
    tap_decay: float = 1.0
    path_gain_db: list | None = None
    train_fraction: float = 0.7
    debug: bool = False

    def __post_init__(self):
        if self.slots < 0:
            raise ValueError("slots must be >= 0")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.M > 32:
            raise ValueError("labels are stored in a 32-bit mask, so M must be <= 32")
        if not self.snr_db:
            raise ValueError("snr_db must list at least one level")
        if self.max_delay > self.cp_len:
            raise ValueError("max_delay must not exceed cp_len")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if (self.p01 is None) != (self.p10 is None):
            raise ValueError("give both p01 and p10 or neither")
        if self.p01 is not None and (len(self.p01) != self.M or len(self.p10) != self.M):
            raise ValueError("p01 and p10 need one entry per subchannel")
        if self.path_gain_db is not None and np.shape(self.path_gain_db) != (self.K, self.B):
            raise ValueError(f"path_gain_db must be a {self.K}x{self.B} matrix")
        self.plan  # validates M, n_sc, B, K

    @property
    def plan(self) -> SubchannelPlan:
        return SubchannelPlan(M=self.M, W=self.W, n_sc=self.n_sc, B=self.B, K=self.K)

    def matrices(self) -> np.ndarray:
        if self.p01 is None:
            return default_transition_matrices(self.M)
        return transition_matrices(self.p01, self.p10)

    def gains_db(self) -> np.ndarray:
        if self.path_gain_db is not None:
            return np.asarray(self.path_gain_db, dtype=float)
        if (self.K, self.B) == (3, 3):
            return np.asarray(DEFAULT_PATH_GAIN_DB)
        return np.zeros((self.K, self.B))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generation key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class IqRecord:
    iq: np.ndarray
    label: np.ndarray
    snr_db: float
    avg_power: float
    uav_id: int
    slot_index: int


class Dataset:
    """All records captured by one UAV, held column-wise.

    ``split`` is a ``(train_idx, eval_idx)`` pair. Records of the same slot
    always land on the same side, so every side covers every SNR level equally.
    """

    def __init__(self, iq, labels, snr_db, avg_power, slots, plan: SubchannelPlan, uav_id: int = 0,
                 snr_levels=None, split=None):
        self.iq = np.asarray(iq, dtype=complex)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.snr_db = np.asarray(snr_db, dtype=float)
        self.avg_power = np.asarray(avg_power, dtype=float)
        self.slots = np.asarray(slots, dtype=np.int64)
        self.plan = plan
        self.uav_id = int(uav_id)
        n = len(self.iq)
        if self.iq.ndim != 2 and n:
            raise ValueError("iq must be a (records, J) array")
        for name in ("labels", "snr_db", "avg_power", "slots"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match iq")
        if n and self.labels.shape[1] != plan.M:
            raise ValueError("label width does not match the plan")
        if np.any(self.avg_power < 0):
            raise ValueError("avg_power must be non-negative")
        self.snr_levels = (sorted(set(self.snr_db.tolist())) if snr_levels is None
                           else [float(s) for s in snr_levels])
        if split is None:
            split = (np.arange(n), np.arange(0))
        self.split = (np.asarray(split[0], dtype=np.int64), np.asarray(split[1], dtype=np.int64))
        both = np.concatenate(self.split)
        if len(both) != n or len(np.unique(both)) != n:
            raise ValueError("split must be a disjoint, exhaustive partition of the records")

    def __len__(self) -> int:
        return len(self.iq)

    @property
    def J(self) -> int:
        return self.iq.shape[1] if self.iq.ndim == 2 else 0

    def record(self, i: int) -> IqRecord:
        return IqRecord(self.iq[i], self.labels[i], float(self.snr_db[i]), float(self.avg_power[i]),
                        self.uav_id, int(self.slots[i]))

    @property
    def records(self) -> list[IqRecord]:
        return [self.record(i) for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.iq[idx], self.labels[idx], self.snr_db[idx], self.avg_power[idx], self.slots[idx],
                       self.plan, self.uav_id, self.snr_levels)

    @property
    def train(self) -> "Dataset":
        return self.subset(self.split[0])

    @property
    def eval(self) -> "Dataset":
        return self.subset(self.split[1])

    def with_slot_split(self, train_fraction: float, rng: np.random.Generator) -> "Dataset":
        """Reassign the split by shuffling distinct slots."""
        uniq = np.unique(self.slots)
        perm = rng.permutation(uniq)
        n_train = int(round(train_fraction * len(uniq)))
        train_slots = np.zeros(0, dtype=np.int64) if n_train == 0 else perm[:n_train]
        is_train = np.isin(self.slots, train_slots)
        out = Dataset(self.iq, self.labels, self.snr_db, self.avg_power, self.slots, self.plan, self.uav_id,
                      self.snr_levels, (np.flatnonzero(is_train), np.flatnonzero(~is_train)))
        return out

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        """Pool datasets, keeping each part's split."""
        if not parts:
            raise ValueError("nothing to concatenate")
        offs = np.cumsum([0] + [len(p) for p in parts])
        split = (np.concatenate([p.split[0] + o for p, o in zip(parts, offs)]),
                 np.concatenate([p.split[1] + o for p, o in zip(parts, offs)]))
        nonempty = [p for p in parts if len(p)] or parts[:1]
        return Dataset(np.concatenate([p.iq.reshape(len(p), -1) for p in nonempty]),
                       np.concatenate([p.labels.reshape(len(p), -1) for p in nonempty]),
                       np.concatenate([p.snr_db for p in nonempty]),
                       np.concatenate([p.avg_power for p in nonempty]),
                       np.concatenate([p.slots for p in nonempty]),
                       parts[0].plan, parts[0].uav_id, parts[0].snr_levels, split)


def build_channel(cfg: GenerationConfig) -> MultipathChannel:
    ch = MultipathChannel.random(cfg.K, cfg.B, substream(cfg.seed, "channel"), n_taps=cfg.n_taps,
                                 max_delay=cfg.max_delay, decay=cfg.tap_decay, path_gain_db=cfg.gains_db())
    ch.seed = cfg.seed
    return ch


def _simulate_slot(cfg: GenerationConfig, plan: SubchannelPlan, channel: MultipathChannel, slot: int,
                   I: np.ndarray, ref_power: np.ndarray):
    """Everything captured in one slot: ``(iq[K, S, J], avg_power[K])``."""
    rng = substream(cfg.seed, "slot", slot)
    per_bs = [synth_waveform(plan, I[b], rng, n_symbols=1, cp_len=cfg.cp_len) for b in range(cfg.B)]
    start = cfg.cp_len
    iq = np.empty((cfg.K, len(cfg.snr_db), cfg.J), dtype=complex)
    avg_power = np.empty(cfg.K)
    for k in range(cfg.K):
        clean = propagate(channel, per_bs, k)
        window = clean[start:start + cfg.J]
        if len(window) < cfg.J:
            raise ValueError("J exceeds the captured symbol length")
        p = float(np.mean(np.abs(window) ** 2))
        avg_power[k] = p
        calib = p if p > 0 else ref_power[k]
        for s, snr in enumerate(cfg.snr_db):
            iq[k, s], _ = add_noise_at_snr(window, snr, rng, power=calib)
    return iq, avg_power


def generate(cfg: GenerationConfig, threads: int | None = None):
    """Simulate the whole sweep in memory.

    Returns ``(datasets, per_bs_occupancy, channel)`` with one :class:`Dataset`
    per UAV; records are ordered by slot, then SNR level.
    """
    plan = cfg.plan
    channel = build_channel(cfg)
    occ_rng = substream(cfg.seed, "occupancy")
    proc = OccupancyProcess(cfg.matrices(), B=cfg.B, rng=occ_rng)
    occupancy = np.empty((cfg.slots, cfg.B, cfg.M), dtype=np.uint8)
    for t in range(cfg.slots):
        occupancy[t] = proc.step(occ_rng)
    # one subchannel's worth from every base station: noise floor for silent slots
    ref_power = np.array([channel.path_power(k).sum() / cfg.M for k in range(cfg.K)])

    threads = threads or int(os.environ.get("SPECFED_THREADS", "1"))
    S = len(cfg.snr_db)
    iq = np.empty((cfg.slots, cfg.K, S, cfg.J), dtype=complex)
    power = np.empty((cfg.slots, cfg.K))

    def work(t):
        iq[t], power[t] = _simulate_slot(cfg, plan, channel, t, occupancy[t], ref_power)

    if threads > 1 and cfg.slots > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(cfg.slots)))
    else:
        for t in range(cfg.slots):
            work(t)

    labels = np.array([make_label(occupancy[t]) for t in range(cfg.slots)], dtype=np.uint8).reshape(cfg.slots, cfg.M)
    datasets = []
    for k in range(cfg.K):
        ds = Dataset(iq[:, k].reshape(-1, cfg.J),
                     np.repeat(labels, S, axis=0),
                     np.tile(np.asarray(cfg.snr_db, dtype=float), cfg.slots),
                     np.repeat(power[:, k], S),
                     np.repeat(np.arange(cfg.slots), S),
                     plan, uav_id=k, snr_levels=cfg.snr_db)
        datasets.append(ds.with_slot_split(cfg.train_fraction, substream(cfg.seed, "split", 0)))
    return datasets, occupancy, channel


def generate_dataset(cfg: GenerationConfig, out_dir, threads: int | None = None) -> list[Path]:
    """Generate and persist one ``uav<k>.spcf`` file per UAV (plus a split index)."""
    from .io import write_dataset

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets, occupancy, _ = generate(cfg, threads=threads)
    paths = []
    for ds in datasets:
        p = out / f"uav{ds.uav_id}.spcf"
        write_dataset(p, ds, snr_levels=cfg.snr_db)
        paths.append(p)
    np.save(out / "split_train_slots.npy", np.unique(datasets[0].slots[datasets[0].split[0]]) if datasets
            else np.zeros(0, dtype=np.int64))
    if cfg.debug:
        np.save(out / "per_bs_occupancy.npy", occupancy)
    log.info("wrote %d dataset files to %s", len(paths), out)
    return paths
