import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import butter, lfilter

from src.services.dsp import DEFAULT_SAMPLE_RATE, MultichannelWave, read_wav, write_wav
from src.services.room_sim import (DEFAULT_IMAGE_ORDER, DEFAULT_RIR_LEN, ArrayGeometry,
                                   MixtureSample, generate_mixture, sample_scene)
from src.utils.errors import InputError
from src.utils.logger import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class CorpusRecord:
    """One manifest line, with paths resolved against the corpus directory."""
    utterance_id: str
    mixture_path: Path
    reference_paths: List[Path]
    image_paths: List[Path]
    azimuths_deg: List[float]
    snrs_db: List[float]
    seed: int
    room: Dict
    config_hash: Optional[str] = None
    acoustic_hash: Optional[str] = None

    @property
    def num_speakers(self) -> int:
        return len(self.reference_paths)

    def load_mixture(self) -> MultichannelWave:
        return read_wav(self.mixture_path)

    def load_references(self) -> np.ndarray:
        """C x L reverberant references at the reference microphone."""
        return np.stack([read_wav(p).channel(0) for p in self.reference_paths])

    def load_images(self) -> np.ndarray:
        """C x M x L multichannel source images."""
        return np.stack([read_wav(p).samples for p in self.image_paths])


def synthesize_speaker(seed: int, duration_s: float = 2.0,
                       sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Speech-like dry source: pitched harmonic "vowels" alternating with noisy "consonants".

    Each speaker gets its own pitch and formant set from `seed`.
    """
    rng = np.random.default_rng(seed)
    length = int(round(duration_s * sample_rate))
    nyquist = sample_rate / 2
    f0 = rng.uniform(90.0, 260.0)
    formants = np.sort(rng.uniform([300.0, 900.0, 2000.0], [900.0, 2200.0, 3200.0]))
    b_hi, a_hi = butter(4, min(2500.0, 0.8 * nyquist) / nyquist, btype="high")

    out = np.zeros(length)
    pos = 0
    while pos < length:
        kind = "vowel" if pos == 0 else rng.choice(["vowel", "consonant", "pause"], p=[0.6, 0.3, 0.1])
        seg_len = int(rng.uniform(0.06, 0.25) * sample_rate)
        seg_len = min(seg_len, length - pos)
        t = np.arange(seg_len) / sample_rate
        envelope = np.hanning(seg_len) if seg_len > 1 else np.ones(seg_len)
        if kind == "vowel":
            pitch = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t))
            phase = 2 * np.pi * np.cumsum(pitch) / sample_rate
            shift = rng.uniform(0.85, 1.15, size=3)
            seg = np.zeros(seg_len)
            for h in range(1, int(nyquist * 0.95 // f0) + 1):
                freq = h * f0
                gain = sum(np.exp(-0.5 * ((freq - fm * s) / 120.0) ** 2)
                           for fm, s in zip(formants, shift)) + 0.02
                seg += gain / h ** 0.5 * np.sin(h * phase)
        elif kind == "consonant":
            noise = lfilter(b_hi, a_hi, rng.standard_normal(seg_len))
            modulation = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(10.0, 30.0) * t)
            seg = 0.5 * noise * modulation
        else:
            seg = np.zeros(seg_len)
        out[pos:pos + seg_len] = seg * envelope * rng.uniform(0.5, 1.0)
        pos += seg_len
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return out


def synthetic_pool(size: int, seed: int, duration_s: float = 2.0,
                   sample_rate: int = DEFAULT_SAMPLE_RATE) -> List[np.ndarray]:
    seeds = np.random.SeedSequence(seed).generate_state(size)
    return [synthesize_speaker(int(s), duration_s, sample_rate) for s in seeds]


def load_pool(source_dir: str, sample_rate: int = DEFAULT_SAMPLE_RATE) -> List[np.ndarray]:
    """Dry sources from every WAV under `source_dir` (first channel, sorted by name)."""
    paths = sorted(Path(source_dir).glob("*.wav"))
    pool = []
    for path in paths:
        wave = read_wav(path)
        if wave.sample_rate != sample_rate:
            raise InputError(f"{path}: sample rate {wave.sample_rate} != {sample_rate}")
        pool.append(wave.channel(0).copy())
    logger.info(f"Loaded {len(pool)} dry sources from {source_dir}")
    return pool


def _mixture_seeds(rng_seed: int, count: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(rng_seed).generate_state(count)] if count else []


def stream_seeds(seed: int) -> Tuple[int, int, int]:
    """Independent seeds for source choice, scene sampling and mixing SNRs of one mixture."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(child.generate_state(1)[0]) for child in children)


def _make_mixture(index: int, seed: int, num_speakers: int, pool: Sequence[np.ndarray],
                  geometry: ArrayGeometry, rir_len: int, max_image_order: int,
                  min_separation_deg: float, sample_rate: int, reference_mic: int) -> MixtureSample:
    choice_seed, scene_seed, mixing_seed = stream_seeds(seed)
    chosen = np.random.default_rng(choice_seed).choice(len(pool), size=num_speakers, replace=False)
    scene = sample_scene(scene_seed, num_speakers, geometry, max_image_order=max_image_order,
                         min_separation_deg=min_separation_deg)
    dry = [pool[i] for i in chosen]
    logger.debug(f"Mixture {index}: sources {chosen.tolist()}")
    return generate_mixture(dry, scene, geometry, mixing_seed, rir_len, sample_rate, reference_mic)


def build_corpus(out_dir: str, count: int, num_speakers: int, rng_seed: int,
                 dry_source_pool: Sequence[np.ndarray], geometry: ArrayGeometry,
                 rir_len: int = DEFAULT_RIR_LEN, max_image_order: int = DEFAULT_IMAGE_ORDER,
                 min_separation_deg: float = 0.0, sample_rate: int = DEFAULT_SAMPLE_RATE,
                 reference_mic: int = 0, config_hash: Optional[str] = None,
                 workers: int = 1, acoustic_hash: Optional[str] = None) -> Path:
    """Write `count` mixtures plus a JSON-lines manifest under `out_dir`.

    `config_hash` identifies the exact corpus recipe; `acoustic_hash` only the settings a
    trained model depends on, so corpora drawn with other seeds can still be evaluated.
    """
    if count > 0 and len(dry_source_pool) < num_speakers:
        raise InputError(f"Dry source pool has {len(dry_source_pool)} sources; "
                         f"{num_speakers} distinct sources are needed per mixture")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _mixture_seeds(rng_seed, count)

    def job(item):
        index, seed = item
        return _make_mixture(index, seed, num_speakers, dry_source_pool, geometry, rir_len,
                             max_image_order, min_separation_deg, sample_rate, reference_mic)

    # map() keeps submission order, so the manifest order is deterministic
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(pool.map(job, enumerate(seeds)))

    manifest_path = out / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for index, sample in enumerate(samples):
            record = _write_sample(out, f"mix_{index:05d}", sample, seeds[index], config_hash, acoustic_hash)
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info(f"Wrote {count} mixtures of {num_speakers} speakers to {out}")
    return manifest_path


def _write_sample(out: Path, utterance_id: str, sample: MixtureSample, seed: int,
                  config_hash: Optional[str], acoustic_hash: Optional[str]) -> dict:
    folder = out / utterance_id
    folder.mkdir(parents=True, exist_ok=True)
    rate = sample.mixture.sample_rate
    write_wav(folder / "mixture.wav", sample.mixture)
    reference_paths, image_paths = [], []
    for c in range(sample.num_speakers):
        ref_name, img_name = f"ref_{c}.wav", f"image_{c}.wav"
        write_wav(folder / ref_name, MultichannelWave(sample.references[c], rate))
        write_wav(folder / img_name, MultichannelWave(sample.source_images[c], rate))
        reference_paths.append(f"{utterance_id}/{ref_name}")
        image_paths.append(f"{utterance_id}/{img_name}")
    return {
        "utterance_id": utterance_id,
        "mixture_path": f"{utterance_id}/mixture.wav",
        "reference_paths": reference_paths,
        "image_paths": image_paths,
        "azimuths_deg": [round(float(a), 4) for a in sample.source_angles],
        "snrs_db": [round(float(s), 4) for s in sample.mixing_snrs],
        "seed": seed,
        "room": sample.room.to_record(),
        "config_hash": config_hash,
        "acoustic_hash": acoustic_hash,
    }


def read_manifest(manifest_path: str) -> List[CorpusRecord]:
    base = Path(manifest_path).parent
    records = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                records.append(CorpusRecord(
                    utterance_id=raw["utterance_id"],
                    mixture_path=base / raw["mixture_path"],
                    reference_paths=[base / p for p in raw["reference_paths"]],
                    image_paths=[base / p for p in raw.get("image_paths", [])],
                    azimuths_deg=raw["azimuths_deg"],
                    snrs_db=raw["snrs_db"],
                    seed=raw["seed"],
                    room=raw["room"],
                    config_hash=raw.get("config_hash"),
                    acoustic_hash=raw.get("acoustic_hash"),
                ))
            except (json.JSONDecodeError, KeyError) as e:
                raise InputError(f"{manifest_path}:{line_no}: malformed manifest record ({e})")
    return sorted(records, key=lambda r: r.utterance_id)


def manifest_path_for(corpus_dir: str) -> str:
    return os.path.join(corpus_dir, MANIFEST_NAME)
