"""Fixed second-order differential beamformer bank.

Each beam is a frequency-wise regularised least-squares fit of the array
response to a second-order cardioid-family target, constrained to be
distortionless at its look direction. Diagonal loading grows until the
white-noise gain (WNG) clears the configured floor.
"""
import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from src.services.dsp import ComplexSpectrogram, MultichannelWave, StftConfig, stft_multichannel
from src.services.room_sim import SPEED_OF_SOUND, ArrayGeometry
from src.utils.config import Config
from src.utils.errors import CompatibilityError, DesignError, ShapeError
from src.utils.logger import get_logger

logger = get_logger(__name__)

PATTERN_FLOOR_DB = -80.0
MAX_LOAD_STEPS = 60
CONDITION_LIMIT = 1e12

# B(theta) = a0 + a1 cos(theta) + a2 cos^2(theta), unit gain at theta = 0
SECOND_ORDER_TARGETS = {
    "cardioid": (0.25, 0.5, 0.25),
    "hypercardioid": (-1.0 / 6.0, 2.0 / 6.0, 5.0 / 6.0),
}


def second_order_target(name: str) -> Callable[[np.ndarray], np.ndarray]:
    """Target directivity as a function of angle (radians) from the look direction."""
    if name not in SECOND_ORDER_TARGETS:
        raise DesignError(f"Unknown target pattern '{name}'")
    a0, a1, a2 = SECOND_ORDER_TARGETS[name]
    return lambda theta: a0 + a1 * np.cos(theta) + a2 * np.cos(theta) ** 2


def pattern_nulls(name: str) -> np.ndarray:
    """Null angles (degrees, 0..180) of a second-order target."""
    a0, a1, a2 = SECOND_ORDER_TARGETS[name]
    roots = np.roots([a2, a1, a0]) if a2 else np.roots([a1, a0])
    roots = roots[np.abs(roots.imag) < 1e-6].real
    roots = roots[(roots >= -1 - 1e-12) & (roots <= 1 + 1e-12)]
    return np.unique(np.round(np.degrees(np.arccos(np.clip(roots, -1, 1))), 9))


def steering_vector(geometry: ArrayGeometry, azimuth: float, f: float,
                    c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Far-field plane-wave gains exp(-j 2 pi f tau_m), tau_m = -(u . p_m) / c."""
    return steering_matrix(geometry, np.array([azimuth]), np.array([f]), c)[0, 0]


def steering_matrix(geometry: ArrayGeometry, azimuths: np.ndarray, freqs: np.ndarray,
                    c: float = SPEED_OF_SOUND) -> np.ndarray:
    """F x A x M steering vectors for azimuths (degrees) at elevation 0."""
    theta = np.deg2rad(np.asarray(azimuths, dtype=np.float64))
    u = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=1)
    tau = -(u @ geometry.mic_positions.T) / c
    freqs = np.asarray(freqs, dtype=np.float64)
    return np.exp(-2j * np.pi * freqs[:, None, None] * tau[None, :, :])


def white_noise_gain(weights: np.ndarray, look: np.ndarray) -> float:
    """|w^H d|^2 / w^H w."""
    return float(np.abs(np.vdot(weights, look)) ** 2 / np.real(np.vdot(weights, weights)))


@dataclass(frozen=True)
class BeamformerBank:
    weights: np.ndarray
    look_azimuths: np.ndarray
    f_grid: np.ndarray
    geometry: ArrayGeometry
    design_meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.complex128)
        if w.ndim != 3:
            raise ShapeError(f"Bank weights must be B x F x M, got shape {w.shape}")
        if w.shape[0] != len(self.look_azimuths) or w.shape[1] != len(self.f_grid):
            raise ShapeError("Bank weights do not match look directions / frequency grid")
        if w.shape[2] != self.geometry.num_mics:
            raise ShapeError("Bank weights do not match the array geometry")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "look_azimuths", np.asarray(self.look_azimuths, dtype=np.float64))
        object.__setattr__(self, "f_grid", np.asarray(self.f_grid, dtype=np.float64))

    @property
    def num_beams(self) -> int:
        return self.weights.shape[0]

    @property
    def num_mics(self) -> int:
        return self.weights.shape[2]

    def nearest_design_index(self, freqs: np.ndarray) -> np.ndarray:
        freqs = np.asarray(freqs, dtype=np.float64)
        return np.argmin(np.abs(freqs[:, None] - self.f_grid[None, :]), axis=1)

    def response(self, beam_index: int, f: float, angles_deg: np.ndarray,
                 c: float = SPEED_OF_SOUND) -> np.ndarray:
        """Complex w^H d(theta, f) using the weights of the nearest design frequency."""
        k = self.nearest_design_index(np.array([f]))[0]
        d = steering_matrix(self.geometry, angles_deg, np.array([f]), c)[0]
        return d @ np.conj(self.weights[beam_index, k])


def design_beam(geometry: ArrayGeometry, look_azimuth: float, f_grid: np.ndarray,
                target_pattern: Union[str, Callable] = "cardioid", diagonal_load: float = 1e-6,
                wng_floor_db: float = -15.0, angle_step_deg: float = 5.0,
                c: float = SPEED_OF_SOUND):
    """F x M weights fitting the target under a distortionless constraint.

    Returns (weights, loads, wng_db) where loads and wng_db are per design frequency.
    """
    target = second_order_target(target_pattern) if isinstance(target_pattern, str) else target_pattern
    angles = np.arange(0.0, 360.0, angle_step_deg)
    desired = target(np.deg2rad(angles - look_azimuth)).astype(np.complex128)
    wng_floor = 10.0 ** (wng_floor_db / 10.0)
    f_grid = np.asarray(f_grid, dtype=np.float64)
    M = geometry.num_mics

    D_all = steering_matrix(geometry, angles, f_grid, c)
    looks = steering_matrix(geometry, np.array([look_azimuth]), f_grid, c)[:, 0, :]
    weights = np.zeros((len(f_grid), M), dtype=np.complex128)
    loads = np.zeros(len(f_grid))
    wngs = np.zeros(len(f_grid))

    for k, f in enumerate(f_grid):
        D, a = D_all[k], np.conj(looks[k])
        gram = D.conj().T @ D
        b = D.conj().T @ desired
        load = diagonal_load * np.real(np.trace(gram)) / M
        for _ in range(MAX_LOAD_STEPS):
            Q = gram + load * np.eye(M)
            if np.linalg.cond(Q) > CONDITION_LIMIT:
                raise DesignError(f"Normal equations ill-conditioned at {f:.1f} Hz (load {load:.3g})")
            Qb = np.linalg.solve(Q, b)
            Qa = np.linalg.solve(Q, a)
            v = Qb + Qa * (1.0 - np.vdot(a, Qb)) / np.vdot(a, Qa)
            w = np.conj(v)
            wng = white_noise_gain(w, looks[k])
            if wng >= wng_floor:
                break
            load *= 2.0
        else:
            raise DesignError(f"Could not reach WNG floor {wng_floor_db} dB at {f:.1f} Hz")
        weights[k], loads[k], wngs[k] = w, load, 10.0 * np.log10(wng)
    return weights, loads, wngs


def design_bank(geometry: ArrayGeometry, num_beams: int = 12, f_grid: Optional[np.ndarray] = None,
                target_pattern: str = "cardioid", diagonal_load: float = 1e-6,
                wng_floor_db: float = -15.0, angle_step_deg: float = 5.0,
                c: float = SPEED_OF_SOUND) -> BeamformerBank:
    if num_beams < 2:
        raise DesignError("A beam bank needs at least 2 beams")
    if f_grid is None:
        f_grid = default_design_grid()
    looks = 360.0 * np.arange(num_beams) / num_beams
    weights, loads, wngs = [], [], []
    for look in looks:
        w, load, wng = design_beam(geometry, look, f_grid, target_pattern, diagonal_load,
                                   wng_floor_db, angle_step_deg, c)
        weights.append(w)
        loads.append(load)
        wngs.append(wng)
    wngs = np.array(wngs)
    logger.info(f"Designed {num_beams} '{target_pattern}' beams over {len(f_grid)} frequencies; "
                f"min WNG {wngs.min():.2f} dB")
    meta = {
        "target": target_pattern,
        "wng_floor_db": wng_floor_db,
        "angle_step_deg": angle_step_deg,
        "diagonal_load": diagonal_load,
        "speed_of_sound": c,
        "loads": np.array(loads).tolist(),
        "wng_db": wngs.tolist(),
    }
    return BeamformerBank(np.array(weights), looks, f_grid, geometry, meta)


def default_design_grid(num: int = 64, f_min: float = 100.0, f_max: float = 3900.0) -> np.ndarray:
    return np.geomspace(f_min, f_max, num)


def beampattern(bank: BeamformerBank, beam_index: int, f: float, angle_grid: np.ndarray) -> np.ndarray:
    """Gain in dB per angle, floored at -80 dB."""
    if not 0 <= beam_index < bank.num_beams:
        raise ShapeError(f"Beam index {beam_index} out of range for {bank.num_beams} beams")
    c = bank.design_meta.get("speed_of_sound", SPEED_OF_SOUND)
    gain = np.abs(bank.response(beam_index, f, angle_grid, c))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(gain)
    return np.maximum(db, PATTERN_FLOOR_DB)


def apply_bank(bank: BeamformerBank, mixture: MultichannelWave,
               cfg: StftConfig = StftConfig()) -> List[ComplexSpectrogram]:
    """B beam spectrograms: Y_b(t, f) = sum_m conj(w_bfm) X_m(t, f)."""
    if mixture.num_channels != bank.num_mics:
        raise ShapeError(f"Mixture has {mixture.num_channels} channels, bank expects {bank.num_mics}")
    X = stft_multichannel(mixture, cfg)
    return apply_bank_stft(bank, X, cfg, mixture.sample_rate)


def apply_bank_stft(bank: BeamformerBank, X: np.ndarray, cfg: StftConfig,
                    sample_rate: int) -> List[ComplexSpectrogram]:
    """Beamform an M x T x F multichannel STFT."""
    if X.shape[0] != bank.num_mics:
        raise ShapeError(f"STFT has {X.shape[0]} channels, bank expects {bank.num_mics}")
    freqs = np.arange(X.shape[2]) * sample_rate / cfg.frame_len
    W = bank.weights[:, bank.nearest_design_index(freqs), :]
    Y = np.einsum("bfm,mtf->btf", np.conj(W), X)
    return [ComplexSpectrogram(Y[b], cfg.frame_len, cfg.hop, sample_rate, cfg.window)
            for b in range(bank.num_beams)]


def save_bank(bank: BeamformerBank, path: str, config_hash: Optional[str] = None):
    np.savez(
        path,
        format_version=np.array(Config.BANK_FORMAT_VERSION),
        weights=bank.weights,
        look_azimuths=bank.look_azimuths,
        f_grid=bank.f_grid,
        mic_positions=bank.geometry.mic_positions,
        design_meta=np.array(json.dumps(bank.design_meta, sort_keys=True)),
        config_hash=np.array(config_hash or ""),
    )
    logger.info(f"Saved beamformer bank to {path}")


def load_bank(path: str, expected_hash: Optional[str] = None) -> BeamformerBank:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != Config.BANK_FORMAT_VERSION:
            raise CompatibilityError(f"{path}: bank format version {version} is not supported")
        stored_hash = str(data["config_hash"])
        if expected_hash is not None and stored_hash != expected_hash:
            raise CompatibilityError(f"{path}: bank was designed for config {stored_hash}, "
                                     f"current front-end config is {expected_hash}")
        return BeamformerBank(
            weights=data["weights"],
            look_azimuths=data["look_azimuths"],
            f_grid=data["f_grid"],
            geometry=ArrayGeometry(data["mic_positions"]),
            design_meta=json.loads(str(data["design_meta"])),
        )


def write_beampattern_csv(bank: BeamformerBank, path: str, beam_indices: List[int],
                          freqs: List[float], angle_step_deg: float = 1.0):
    angles = np.arange(0.0, 360.0, angle_step_deg)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beam", "look_deg", "freq_hz", "angle_deg", "gain_db"])
        for b in beam_indices:
            for f in freqs:
                for angle, gain in zip(angles, beampattern(bank, b, f, angles)):
                    writer.writerow([b, f"{bank.look_azimuths[b]:.1f}", f"{f:.1f}",
                                     f"{angle:.1f}", f"{gain:.4f}"])
