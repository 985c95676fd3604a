import numpy as np
import pytest

from src.database import models
from src.services.room_sim import SPEED_OF_SOUND, ArrayGeometry
from src.utils.config import PipelineConfig


@pytest.fixture(autouse=True)
def registry(tmp_path):
    """Every test gets its own throwaway run registry."""
    return models.init_db(f"sqlite:///{tmp_path / 'registry.db'}")


@pytest.fixture
def geometry():
    return ArrayGeometry.circular_seven()


def plane_wave(signal, geometry, azimuth_deg, sample_rate=8000, c=SPEED_OF_SOUND):
    """M x L far-field capture of `signal` from `azimuth_deg`, delayed in the FFT domain."""
    signal = np.asarray(signal, dtype=np.float64)
    theta = np.deg2rad(azimuth_deg)
    u = np.array([np.cos(theta), np.sin(theta), 0.0])
    tau = -(geometry.mic_positions @ u) / c
    freqs = np.fft.rfftfreq(signal.size, 1.0 / sample_rate)
    spectrum = np.fft.rfft(signal)
    shifted = spectrum[None, :] * np.exp(-2j * np.pi * freqs[None, :] * tau[:, None])
    return np.fft.irfft(shifted, n=signal.size, axis=1)


@pytest.fixture
def plane_wave_sim():
    return plane_wave


@pytest.fixture
def tiny_config(tmp_path):
    """A pipeline config small enough to run every stage in a few seconds."""
    return PipelineConfig.from_dict({
        "stft": {"frame_len": 64, "hop": 16},
        "bank": {"num_beams": 4, "num_freqs": 8, "angle_step_deg": 10.0},
        "model": {"embedding_dim": 4, "num_anchors": 3, "hidden": 6, "layers": 1, "salient": 2},
        "training": {"steps": 3, "step_size": 1e-3, "log_every": 0},
        "corpus": {"num_speakers": 2, "count": 2, "duration_s": 0.4, "rir_len": 512,
                   "max_image_order": 1, "pool_size": 3},
        "paths": {"work_dir": str(tmp_path / "work")},
    })
