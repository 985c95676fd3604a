"""Oracle comparison systems: IRM, oracle beam pick (MBBF), IRM on the picked beam
(MBIRM) and MVDR with oracle noise statistics (OMVDR)."""
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from src.services.beamformer import steering_matrix
from src.services.dsp import (ComplexSpectrogram, MultichannelWave, StftConfig, istft, match_length,
                              stft_multichannel)
from src.services.metrics import sdr
from src.services.room_sim import SPEED_OF_SOUND, ArrayGeometry
from src.utils.errors import NumericalError, ShapeError

IRM_FLOOR = 1e-8
MVDR_LOADING = 1e-3


@dataclass(frozen=True)
class MaskedOutputs:
    masks: np.ndarray
    waveforms: List[np.ndarray]


def irm_masks(reference_magnitudes: np.ndarray, floor: float = IRM_FLOOR) -> np.ndarray:
    """mask_c = |S_c| / max(sum_c' |S_c'|, floor)."""
    S = np.abs(np.asarray(reference_magnitudes, dtype=np.float64))
    return S / np.maximum(S.sum(axis=0, keepdims=True), floor)


def irm_baseline(mixture_spec: ComplexSpectrogram,
                 reference_specs: Sequence[ComplexSpectrogram]) -> MaskedOutputs:
    """Oracle ratio masks applied to the mixture, resynthesised with the mixture phase."""
    refs = np.stack([r.magnitude for r in reference_specs])
    if refs.shape[1:] != mixture_spec.bins.shape:
        raise ShapeError(f"Reference spectra {refs.shape[1:]} do not match mixture {mixture_spec.bins.shape}")
    masks = irm_masks(refs)
    return MaskedOutputs(masks, [istft(mixture_spec.masked(m)) for m in masks])


def beam_waveforms(beams: Sequence[ComplexSpectrogram]) -> List[np.ndarray]:
    return [istft(b) for b in beams]


def mbbf_oracle(beams: Sequence[ComplexSpectrogram], references: Sequence[np.ndarray]) -> List[int]:
    """Per speaker, the beam whose waveform has the largest SDR against that speaker."""
    waves = beam_waveforms(beams)
    picks = []
    for ref in references:
        scores = [sdr(match_length(w, len(ref)), ref) for w in waves]
        picks.append(int(np.argmax(scores)))
    return picks


def mbirm_baseline(beams: Sequence[ComplexSpectrogram], beam_reference_specs: Sequence[Sequence[ComplexSpectrogram]],
                   references: Sequence[np.ndarray]) -> List[np.ndarray]:
    """IRM on each speaker's oracle beam.

    `beam_reference_specs[b][c]` is speaker c's image seen through beam b.
    """
    picks = mbbf_oracle(beams, references)
    outputs = []
    for c, b in enumerate(picks):
        outputs.append(irm_baseline(beams[b], beam_reference_specs[b]).waveforms[c])
    return outputs


def noise_covariance(interference: np.ndarray) -> np.ndarray:
    """F x M x M spatial covariance averaged over frames of an M x T x F STFT."""
    return np.einsum("mtf,ntf->fmn", interference, np.conj(interference)) / interference.shape[1]


def mvdr_weights(R: np.ndarray, d: np.ndarray, loading: float = MVDR_LOADING) -> np.ndarray:
    """w = R^-1 d / (d^H R^-1 d) per frequency, R loaded with loading * trace(R) / M."""
    F, M, _ = R.shape
    load = loading * np.real(np.trace(R, axis1=1, axis2=2)) / M
    R_loaded = R + load[:, None, None] * np.eye(M)[None]
    try:
        numerator = np.linalg.solve(R_loaded, d[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Noise covariance is singular after loading: {e}")
    denominator = np.einsum("fm,fm->f", np.conj(d), numerator)
    if np.any(np.abs(denominator) < 1e-20) or not np.all(np.isfinite(numerator)):
        raise NumericalError("Degenerate MVDR solution")
    return numerator / denominator[:, None]


def oracle_mvdr(mixture: MultichannelWave, source_azimuths: Sequence[float], interference: np.ndarray,
                geometry: ArrayGeometry, cfg: StftConfig = StftConfig(),
                c: float = SPEED_OF_SOUND) -> List[np.ndarray]:
    """MVDR toward each speaker with noise statistics from the other speakers' images.

    `interference[c]` is the M x L sum of every image except speaker c's.
    """
    if len(interference) != len(source_azimuths):
        raise ShapeError(f"{len(interference)} interference signals for {len(source_azimuths)} speakers")
    X = stft_multichannel(mixture, cfg)
    freqs = np.arange(cfg.num_bins) * mixture.sample_rate / cfg.frame_len
    outputs = []
    for az, noise in zip(source_azimuths, interference):
        N = stft_multichannel(MultichannelWave(noise, mixture.sample_rate), cfg)
        d = steering_matrix(geometry, np.array([az]), freqs, c)[:, 0, :]
        w = mvdr_weights(noise_covariance(N), d)
        Y = np.einsum("fm,mtf->tf", np.conj(w), X)
        spec = ComplexSpectrogram(Y, cfg.frame_len, cfg.hop, mixture.sample_rate, cfg.window)
        outputs.append(match_length(istft(spec), mixture.num_samples))
    return outputs
