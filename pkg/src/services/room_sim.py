"""Image-method room impulse responses and randomized multi-speaker mixtures."""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from src.services.dsp import DEFAULT_SAMPLE_RATE, MultichannelWave
from src.utils.errors import EnergyError, GeometryError, LengthError, SamplingError, ShapeError
from src.utils.logger import get_logger

logger = get_logger(__name__)

SPEED_OF_SOUND = 343.0
INTERP_TAPS = 81
DEFAULT_RIR_LEN = 4096
DEFAULT_IMAGE_ORDER = 6

ROOM_LENGTH_RANGE = (1.0, 10.0)
ROOM_HEIGHT_RANGE = (2.5, 4.0)
ABSORPTION_RANGE = (0.2, 0.5)
PLACEMENT_HEIGHT_RANGE = (1.0, 2.0)
MAX_SNR_DB = 2.5
SECTOR_DEG = 30.0
MAX_SPEAKERS_PER_SECTOR = 2
MAX_DRAWS = 10_000
DRAWS_PER_SCENE = 200


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise GeometryError(f"Expected M x 3 mic positions, got shape {pos.shape}")
        diffs = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        np.fill_diagonal(diffs, np.inf)
        if np.any(diffs < 1e-9):
            raise GeometryError("Microphone positions must be pairwise distinct")
        pos.setflags(write=False)
        object.__setattr__(self, "mic_positions", pos)

    @classmethod
    def circular_seven(cls, radius: float = 0.0425) -> "ArrayGeometry":
        """Center microphone (index 0) plus six on a circle at 60 degree spacing."""
        angles = np.deg2rad(np.arange(6) * 60.0)
        ring = np.stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros(6)], axis=1)
        return cls(np.vstack([np.zeros((1, 3)), ring]))

    @property
    def num_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.mic_positions, axis=1)))

    def rotated(self, degrees: float) -> "ArrayGeometry":
        theta = np.deg2rad(degrees)
        rot = np.array([[np.cos(theta), -np.sin(theta), 0.0],
                        [np.sin(theta), np.cos(theta), 0.0],
                        [0.0, 0.0, 1.0]])
        return ArrayGeometry(self.mic_positions @ rot.T)


@dataclass(frozen=True)
class RoomSpec:
    dims: np.ndarray
    absorption: float
    array_center: np.ndarray
    source_positions: np.ndarray
    max_image_order: int = DEFAULT_IMAGE_ORDER
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=np.float64)
        center = np.asarray(self.array_center, dtype=np.float64)
        sources = np.atleast_2d(np.asarray(self.source_positions, dtype=np.float64))
        if dims.shape != (3,) or np.any(dims <= 0):
            raise GeometryError(f"Room dims must be three positive lengths, got {dims}")
        if not 0 < self.absorption <= 1:
            raise GeometryError(f"Absorption must lie in (0, 1], got {self.absorption}")
        if self.max_image_order < 0:
            raise GeometryError("max_image_order must be non-negative")
        if sources.shape[1] != 3 or sources.shape[0] < 1:
            raise GeometryError(f"Expected C x 3 source positions, got shape {sources.shape}")
        if not _inside(center, dims):
            raise GeometryError(f"Array center {center} is outside the room {dims}")
        for c, pos in enumerate(sources):
            if not _inside(pos, dims):
                raise GeometryError(f"Source {c} at {pos} is outside the room {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "array_center", center)
        object.__setattr__(self, "source_positions", sources)

    @property
    def num_sources(self) -> int:
        return self.source_positions.shape[0]

    @property
    def reflection(self) -> float:
        return float(np.sqrt(1.0 - self.absorption))

    def to_record(self) -> dict:
        return {"dims": [round(float(v), 6) for v in self.dims],
                "absorption": round(float(self.absorption), 6)}


@dataclass(frozen=True)
class Scene:
    room: RoomSpec
    azimuths_deg: np.ndarray


@dataclass(frozen=True)
class MixtureSample:
    mixture: MultichannelWave
    references: np.ndarray
    source_images: np.ndarray
    source_angles: np.ndarray
    mixing_snrs: np.ndarray
    room: RoomSpec
    seed: int
    reference_mic: int = 0

    @property
    def num_speakers(self) -> int:
        return self.references.shape[0]

    def interference(self, speaker: int) -> np.ndarray:
        """M x L sum of every source image except `speaker`."""
        others = [c for c in range(self.num_speakers) if c != speaker]
        if not others:
            return np.zeros_like(self.source_images[0])
        return self.source_images[others].sum(axis=0)


def _inside(point: np.ndarray, dims: np.ndarray) -> bool:
    return bool(np.all(point > 0) and np.all(point < dims))


def image_positions(source: np.ndarray, dims: np.ndarray, max_order: int):
    """All (2K+1)^3 image sources with their reflection orders.

    Along each axis, index i maps to i*L + s (even i) or (i+1)*L - s (odd i),
    with |i| wall reflections.
    """
    idx = np.arange(-max_order, max_order + 1)
    grid = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1).reshape(-1, 3)
    odd = grid % 2 != 0
    positions = np.where(odd, (grid + 1) * dims - source, grid * dims + source)
    orders = np.abs(grid).sum(axis=1)
    return positions, orders


def fractional_delay_taps(delay: np.ndarray, num_taps: int = INTERP_TAPS):
    """Hann-windowed sinc kernel centred at each (fractional) delay.

    Returns integer tap indices and weights, both shaped (len(delay), num_taps).
    """
    half = num_taps // 2
    offsets = np.arange(-half, half + 1)
    index = np.round(delay)[:, None].astype(np.int64) + offsets[None, :]
    t = index - delay[:, None]
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * t / (num_taps + 1)))
    weights = np.sinc(t) * window
    return index, weights


def image_method_rir(room: RoomSpec, source_index: int, geometry: ArrayGeometry,
                     rir_len: int = DEFAULT_RIR_LEN, sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """M x rir_len impulse responses from one source to every microphone."""
    if not 0 <= source_index < room.num_sources:
        raise GeometryError(f"Source index {source_index} out of range for {room.num_sources} sources")
    mics = room.array_center[None, :] + geometry.mic_positions
    for m, pos in enumerate(mics):
        if not _inside(pos, room.dims):
            raise GeometryError(f"Microphone {m} at {pos} is outside the room {room.dims}")
    source = room.source_positions[source_index]
    direct = np.linalg.norm(mics - source[None, :], axis=1) / room.speed_of_sound * sample_rate
    if np.max(direct) >= rir_len:
        raise LengthError(f"rir_len={rir_len} does not cover the direct-path delay "
                          f"({np.max(direct):.1f} samples)")

    positions, orders = image_positions(source, room.dims, room.max_image_order)
    gains = room.reflection ** orders
    keep = gains > 0
    positions, gains = positions[keep], gains[keep]

    rir = np.zeros((geometry.num_mics, rir_len))
    for m, mic in enumerate(mics):
        dist = np.linalg.norm(positions - mic[None, :], axis=1)
        delay = dist / room.speed_of_sound * sample_rate
        index, weights = fractional_delay_taps(delay)
        weights = weights * (gains / (4.0 * np.pi * dist))[:, None]
        valid = (index >= 0) & (index < rir_len)
        np.add.at(rir[m], index[valid], weights[valid])
    return rir


def render_source(dry: np.ndarray, rir: np.ndarray, sample_rate: int = DEFAULT_SAMPLE_RATE) -> MultichannelWave:
    """Convolve a dry source with every RIR channel, truncated to len(dry)."""
    dry = np.asarray(dry, dtype=np.float64)
    rir = np.atleast_2d(np.asarray(rir, dtype=np.float64))
    if dry.size == 0 or rir.size == 0:
        raise ShapeError("render_source needs non-empty inputs")
    wet = fftconvolve(dry[None, :], rir, axes=1)[:, :dry.shape[0]]
    return MultichannelWave(wet, sample_rate)


def source_azimuth(center: np.ndarray, position: np.ndarray) -> float:
    delta = position - center
    return float(np.degrees(np.arctan2(delta[1], delta[0])) % 360.0)


def crowded_sector(azimuths: Sequence[float], sector_deg: float = SECTOR_DEG,
                   max_inside: int = MAX_SPEAKERS_PER_SECTOR) -> bool:
    """True when some circular window of `sector_deg` holds more than `max_inside` azimuths."""
    az = np.asarray(azimuths, dtype=np.float64) % 360.0
    for start in az:
        span = (az - start) % 360.0
        if np.count_nonzero(span <= sector_deg + 1e-9) > max_inside:
            return True
    return False


def _angular_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def _draw_room(rng: np.random.Generator):
    length, width = rng.uniform(*ROOM_LENGTH_RANGE, size=2)
    height = rng.uniform(*ROOM_HEIGHT_RANGE)
    dims = np.array([length, width, height])
    absorption = float(rng.uniform(*ABSORPTION_RANGE))
    return dims, absorption


def _draw_point(rng: np.random.Generator, dims: np.ndarray, margin: float) -> np.ndarray:
    xy = rng.uniform(margin, dims[:2] - margin)
    z = rng.uniform(*PLACEMENT_HEIGHT_RANGE)
    return np.array([xy[0], xy[1], z])


def sample_scene(rng_seed: int, num_speakers: int, geometry: ArrayGeometry,
                 max_image_order: int = DEFAULT_IMAGE_ORDER, min_separation_deg: float = 0.0,
                 min_distance: float = 0.5, max_draws: int = MAX_DRAWS,
                 draws_per_scene: int = DRAWS_PER_SCENE) -> Scene:
    """Random room, array and speaker placement honouring the 30 degree crowding rule.

    A room whose array position leaves no valid spot for the next speaker is abandoned after
    `draws_per_scene` candidates and the whole scene (room, array, speakers) is drawn again.
    `max_draws` bounds the candidates over all restarts.
    """
    if num_speakers < 1:
        raise SamplingError("num_speakers must be at least 1")
    rng = np.random.default_rng(rng_seed)
    margin = geometry.radius + 0.1
    draws = 0
    restarts = 0
    while draws < max_draws:
        dims, absorption = _draw_room(rng)
        center = _draw_point(rng, dims, margin)
        near = min(min_distance, 0.5 * min(dims[:2]) - margin)
        positions: List[np.ndarray] = []
        azimuths: List[float] = []
        for _ in range(min(draws_per_scene, max_draws - draws)):
            draws += 1
            candidate = _draw_point(rng, dims, margin)
            if np.linalg.norm(candidate[:2] - center[:2]) < near:
                continue
            az = source_azimuth(center, candidate)
            if any(_angular_gap(az, other) < min_separation_deg for other in azimuths):
                continue
            if crowded_sector(azimuths + [az]):
                continue
            positions.append(candidate)
            azimuths.append(az)
            if len(positions) == num_speakers:
                break
        if len(positions) == num_speakers:
            logger.debug(f"Scene seed={rng_seed}: room {np.round(dims, 2)}, absorption {absorption:.3f}, "
                         f"azimuths {np.round(azimuths, 1)} after {draws} draws, {restarts} restarts")
            room = RoomSpec(dims, absorption, center, np.array(positions), max_image_order)
            return Scene(room, np.array(azimuths))
        restarts += 1
        logger.debug(f"Scene seed={rng_seed}: placed {len(positions)}/{num_speakers} speakers "
                     f"in room {np.round(dims, 2)}, redrawing the scene")
    raise SamplingError(f"Scene sampling exhausted {max_draws} draws over {restarts} scenes "
                        f"placing {num_speakers} speakers (seed {rng_seed})")


def generate_mixture(dry_sources: Sequence[np.ndarray], scene: Scene, geometry: ArrayGeometry,
                     rng_seed: int, rir_len: int = DEFAULT_RIR_LEN,
                     sample_rate: int = DEFAULT_SAMPLE_RATE, reference_mic: int = 0,
                     snrs_db: Optional[Sequence[float]] = None) -> MixtureSample:
    """Reverberate, scale to the drawn mixing SNRs, truncate to the shortest, and sum."""
    room = scene.room
    if len(dry_sources) != room.num_sources:
        raise ShapeError(f"{len(dry_sources)} dry sources for {room.num_sources} source positions")
    for c, dry in enumerate(dry_sources):
        if not np.any(np.asarray(dry)):
            raise EnergyError(f"Dry source {c} is silent")

    rng = np.random.default_rng(rng_seed)
    if snrs_db is None:
        drawn = rng.uniform(-MAX_SNR_DB, MAX_SNR_DB, size=room.num_sources)
        drawn[0] = 0.0
    else:
        drawn = np.asarray(snrs_db, dtype=np.float64)
        if drawn.shape != (room.num_sources,):
            raise ShapeError("snrs_db must hold one value per source")

    images = [render_source(dry, image_method_rir(room, c, geometry, rir_len, sample_rate), sample_rate).samples
              for c, dry in enumerate(dry_sources)]
    length = min(img.shape[1] for img in images)
    images = np.stack([img[:, :length] for img in images])

    energies = np.sum(images[:, reference_mic, :] ** 2, axis=1)
    if np.any(energies <= 0):
        raise EnergyError("A reverberant source image has no energy at the reference microphone")
    gains = np.sqrt(energies[0] / energies * 10.0 ** (drawn / 10.0))
    gains[0] = 1.0
    images = images * gains[:, None, None]

    mixture = MultichannelWave(images.sum(axis=0), sample_rate)
    return MixtureSample(
        mixture=mixture,
        references=images[:, reference_mic, :].copy(),
        source_images=images,
        source_angles=np.asarray(scene.azimuths_deg, dtype=np.float64),
        mixing_snrs=drawn,
        room=room,
        seed=int(rng_seed),
        reference_mic=reference_mic,
    )
