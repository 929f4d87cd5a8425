"""JSON experiment configuration with strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .nn import LayerSpec, default_sensing_layers
from .specgen.dataset import GenerationConfig


class ConfigError(ValueError):
    """A configuration document is malformed; the message names the offending key."""


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class TrainingSection:
    regime: str = "fl"  # cl | ll | fl
    agg: str = "pwfedavg"  # fedavg | pwfedavg
    rounds: int = 15000
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.5
    lr_schedule: str = "constant"
    beta: float = 1.0
    L: float = 1.0
    lr_local: float = 1.0
    power_source: str = "batch"
    epochs: int = 20  # CL / LL
    normalize: str = "record"

    def __post_init__(self):
        if self.regime not in ("cl", "ll", "fl"):
            raise ValueError(f"regime must be cl, ll or fl, got {self.regime!r}")
        if self.agg not in ("fedavg", "pwfedavg"):
            raise ValueError(f"agg must be fedavg or pwfedavg, got {self.agg!r}")
        for name in ("rounds", "local_epochs", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_schedule not in ("constant", "decay"):
            raise ValueError(f"lr_schedule must be constant or decay, got {self.lr_schedule!r}")


@dataclass
class FusionSection:
    n: int = 2

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class RlSection:
    agent: str = "ddqn-soft"  # tabular | dqn | ddqn | ddqn-soft
    uavs: int = 1
    episodes: int = 2000
    steps: int = 20
    gamma: float = 0.9
    lr: float = 0.01
    alpha: float = 0.1  # tabular step size
    batch_size: int = 64
    replay: int = 10_000
    warmup: int = 256
    rho: float = 0.01
    target_period: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.8
    observation: str = "fused"  # fused | truth | sensing
    sensing_snr_db: float = 10.0  # SNR of the captures when observation is "sensing"
    M: int = 16

    def __post_init__(self):
        if self.agent not in ("tabular", "dqn", "ddqn", "ddqn-soft"):
            raise ValueError(f"agent must be tabular, dqn, ddqn or ddqn-soft, got {self.agent!r}")
        if self.uavs not in (1, 2):
            raise ValueError("uavs must be 1 or 2")
        if self.observation not in ("fused", "truth", "sensing"):
            raise ValueError(f"observation must be fused, truth or sensing, got {self.observation!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    specgen: GenerationConfig = field(default_factory=GenerationConfig)
    network: list = None  # layer dicts; None means the default sensing network
    training: TrainingSection = field(default_factory=TrainingSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    rl: RlSection = field(default_factory=RlSection)
    output_dir: str = "runs/default"

    def layers(self) -> list[LayerSpec]:
        if self.network is None:
            return default_sensing_layers(self.specgen.M, self.specgen.J)
        return [LayerSpec.from_dict(d) for d in self.network]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["specgen"] = self.specgen.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(repr(k) for k in unknown)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        sg = dict(data.get("specgen") or {})
        sg.setdefault("seed", seed)
        try:
            specgen = GenerationConfig.from_dict(sg)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"specgen: {exc}") from exc
        network = data.get("network")
        if network is not None:
            if not isinstance(network, list):
                raise ConfigError("network: expected a list of layer objects")
            for i, layer in enumerate(network):
                try:
                    LayerSpec.from_dict(layer)
                except (TypeError, ValueError, KeyError) as exc:
                    raise ConfigError(f"network[{i}]: {exc}") from exc
        out = data.get("output_dir", "runs/default")
        if not isinstance(out, str):
            raise ConfigError("output_dir: must be a string")
        return cls(seed=seed, specgen=specgen, network=network,
                   training=_build(TrainingSection, data.get("training"), "training"),
                   fusion=_build(FusionSection, data.get("fusion"), "fusion"),
                   rl=_build(RlSection, data.get("rl"), "rl"), output_dir=out)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)
