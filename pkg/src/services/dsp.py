"""Time-frequency analysis/synthesis, log features and WAV I/O."""
from dataclasses import dataclass
from typing import Union
import os

import numpy as np
import soundfile as sf
from scipy.signal import check_COLA, get_window

from src.utils.errors import AudioFormatError, ConfigurationError, LengthError, ShapeError
from src.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_SAMPLE_RATE = 8000
DEFAULT_LOG_FLOOR = 1e-8
# istft divisor floor, relative to the peak summed window energy
EDGE_NORM_FLOOR = 0.1

_SUBTYPES = {"float32": "FLOAT", "pcm16": "PCM_16"}


@dataclass(frozen=True)
class MultichannelWave:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        data = np.asarray(self.samples, dtype=np.float64)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2 or data.shape[0] < 1:
            raise ShapeError(f"Expected M x L samples, got shape {data.shape}")
        if self.sample_rate <= 0:
            raise ShapeError(f"Sample rate must be positive, got {self.sample_rate}")
        data.setflags(write=False)
        object.__setattr__(self, "samples", data)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 256
    hop: int = 64
    window: str = "hann"

    def __post_init__(self):
        if self.frame_len <= 0 or self.frame_len % 2:
            raise ConfigurationError(f"frame_len must be a positive even integer, got {self.frame_len}")
        if not 0 < self.hop <= self.frame_len:
            raise ConfigurationError(f"hop must satisfy 0 < hop <= frame_len, got {self.hop}")

    @property
    def num_bins(self) -> int:
        return self.frame_len // 2 + 1

    def analysis_window(self) -> np.ndarray:
        # periodic window, the COLA-compliant variant
        return get_window(self.window, self.frame_len, fftbins=True)

    def is_cola(self) -> bool:
        if self.frame_len % self.hop:
            return False
        return bool(check_COLA(self.analysis_window(), self.frame_len, self.frame_len - self.hop))

    def num_frames(self, length: int) -> int:
        return (length - self.frame_len) // self.hop + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray
    frame_len: int = 256
    hop: int = 64
    sample_rate: int = DEFAULT_SAMPLE_RATE
    window: str = "hann"

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[0] < 1:
            raise ShapeError(f"Expected T x F bins, got shape {bins.shape}")
        if bins.shape[1] != self.frame_len // 2 + 1:
            raise ShapeError(f"F={bins.shape[1]} does not match frame_len={self.frame_len}")
        object.__setattr__(self, "bins", bins)

    @property
    def config(self) -> StftConfig:
        return StftConfig(self.frame_len, self.hop, self.window)

    @property
    def num_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def num_bins(self) -> int:
        return self.bins.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.bins)

    def frequencies(self) -> np.ndarray:
        return np.arange(self.num_bins) * self.sample_rate / self.frame_len

    def with_bins(self, bins: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(bins, self.frame_len, self.hop, self.sample_rate, self.window)

    def masked(self, mask: np.ndarray) -> "ComplexSpectrogram":
        """Apply a real T x F mask, keeping this spectrogram's phase."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.bins.shape:
            raise ShapeError(f"Mask shape {mask.shape} does not match {self.bins.shape}")
        return self.with_bins(mask * self.bins)


def stft(wave_channel: np.ndarray, cfg: StftConfig = StftConfig(),
         sample_rate: int = DEFAULT_SAMPLE_RATE) -> ComplexSpectrogram:
    """One-sided STFT without padding: T = floor((L - frame_len) / hop) + 1."""
    x = np.asarray(wave_channel, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"stft expects a single channel, got shape {x.shape}")
    if x.shape[0] < cfg.frame_len:
        raise LengthError(f"Signal of {x.shape[0]} samples is shorter than one frame ({cfg.frame_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[::cfg.hop]
    bins = np.fft.rfft(frames * cfg.analysis_window(), axis=-1)
    return ComplexSpectrogram(bins, cfg.frame_len, cfg.hop, sample_rate, cfg.window)


def stft_multichannel(wave: MultichannelWave, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """M x T x F complex STFT of every channel."""
    return np.stack([stft(wave.channel(m), cfg, wave.sample_rate).bins
                     for m in range(wave.num_channels)])


def istft(spec: ComplexSpectrogram) -> np.ndarray:
    """Weighted overlap-add synthesis with per-sample window-energy normalisation.

    Output length is (T - 1) * hop + frame_len. Near both ends the windows overlap little, so
    the divisor is floored at EDGE_NORM_FLOOR times its peak; masked spectra fade out there
    instead of being amplified.
    """
    cfg = spec.config
    if not cfg.is_cola():
        raise ConfigurationError(
            f"Window '{cfg.window}' with frame_len={cfg.frame_len}, hop={cfg.hop} is not COLA")
    window = cfg.analysis_window()
    frames = np.fft.irfft(spec.bins, n=cfg.frame_len, axis=-1) * window
    length = (spec.num_frames - 1) * cfg.hop + cfg.frame_len
    signal = np.zeros(length)
    norm = np.zeros(length)
    for t in range(spec.num_frames):
        start = t * cfg.hop
        signal[start:start + cfg.frame_len] += frames[t]
        norm[start:start + cfg.frame_len] += window ** 2
    floor = EDGE_NORM_FLOOR * norm.max()
    if floor <= 0.0:
        return np.zeros(length)
    return signal / np.maximum(norm, floor)


def frame_energy(spec: ComplexSpectrogram) -> np.ndarray:
    """Per-frame energy from the one-sided spectrum (Parseval)."""
    power = np.abs(spec.bins) ** 2
    weights = np.full(spec.num_bins, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    return power @ weights / spec.frame_len


def log_magnitude(spec: ComplexSpectrogram, floor: float = DEFAULT_LOG_FLOOR) -> np.ndarray:
    if floor <= 0:
        raise ConfigurationError(f"log floor must be positive, got {floor}")
    return np.log(np.maximum(np.abs(spec.bins), floor))


def match_length(signal: np.ndarray, length: int) -> np.ndarray:
    """Zero-pad or truncate a 1-D signal to `length` samples."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[0] >= length:
        return signal[:length]
    return np.pad(signal, (0, length - signal.shape[0]))


def read_wav(path: Union[str, os.PathLike]) -> MultichannelWave:
    try:
        info = sf.info(str(path))
        if info.format != "WAV" or info.subtype not in _SUBTYPES.values():
            raise AudioFormatError(f"{path}: unsupported format {info.format}/{info.subtype}")
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except AudioFormatError:
        raise
    except (sf.SoundFileError, RuntimeError) as e:
        raise AudioFormatError(f"{path}: cannot read WAV file: {e}") from e
    if data.shape[0] == 0:
        raise AudioFormatError(f"{path}: no audio frames")
    return MultichannelWave(data.T, int(rate))


def write_wav(path: Union[str, os.PathLike], wave: MultichannelWave, encoding: str = "float32"):
    if encoding not in _SUBTYPES:
        raise AudioFormatError(f"Unsupported WAV encoding '{encoding}'")
    samples = wave.samples.T
    if encoding == "pcm16":
        samples = np.clip(samples, -1.0, 32767 / 32768)
    else:
        samples = samples.astype(np.float32)
    try:
        sf.write(str(path), samples, wave.sample_rate, subtype=_SUBTYPES[encoding], format="WAV")
    except (sf.SoundFileError, RuntimeError) as e:
        raise AudioFormatError(f"{path}: cannot write WAV file: {e}") from e
    logger.debug(f"Wrote {wave.num_channels}-channel WAV {path} ({wave.num_samples} samples)")
