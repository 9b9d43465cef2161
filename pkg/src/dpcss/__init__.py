"""Dual-path continuous speech separation on a small numpy autodiff core."""

from dpcss.config import ARCHS, ConfigError, RunConfig, SeparatorConfig, TrainConfig, load_run_config
from dpcss.dsp import Spectrogram, Waveform, istft, read_wav, stft, write_wav
from dpcss.metrics import count_macs, count_params, pit_loss, snr
from dpcss.pipeline import Separator, separate_recording, stitch
from dpcss.sim import random_meeting, simulate_meeting
from dpcss.tensor import Tensor, grad_check
from dpcss.train import train

__version__ = "0.1.0"

__all__ = [
    "ARCHS",
    "ConfigError",
    "RunConfig",
    "SeparatorConfig",
    "Separator",
    "Spectrogram",
    "Tensor",
    "TrainConfig",
    "Waveform",
    "count_macs",
    "count_params",
    "grad_check",
    "istft",
    "load_run_config",
    "pit_loss",
    "random_meeting",
    "read_wav",
    "separate_recording",
    "simulate_meeting",
    "snr",
    "stft",
    "stitch",
    "train",
    "write_wav",
]
