from .dataset import Dataset, GenerationConfig, IqRecord, generate, generate_dataset
from .io import read_dataset, read_dataset_dir, write_dataset
from .occupancy import OccupancyProcess, default_transition_matrices, stationary_busy, step_occupancy, transition_matrices
from .plan import SubchannelPlan
from .signal import MultipathChannel, add_noise_at_snr, make_label, propagate, synth_waveform

__all__ = [
    "Dataset", "GenerationConfig", "IqRecord", "generate", "generate_dataset",
    "read_dataset", "read_dataset_dir", "write_dataset",
    "OccupancyProcess", "default_transition_matrices", "stationary_busy", "step_occupancy",
    "transition_matrices", "SubchannelPlan", "MultipathChannel", "add_noise_at_snr", "make_label",
    "propagate", "synth_waveform",
]
