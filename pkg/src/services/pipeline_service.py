import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.database import models
from src.services import baselines
from src.services.adan import EmbeddingModel, default_salient, separate_beam, separate_beams
from src.services.beamformer import (BeamformerBank, apply_bank, default_design_grid, design_bank,
                                     load_bank, save_bank, write_beampattern_csv)
from src.services.corpus import (CorpusRecord, build_corpus, load_pool, manifest_path_for,
                                 read_manifest, synthetic_pool)
from src.services.dsp import ComplexSpectrogram, MultichannelWave, StftConfig, read_wav, stft, write_wav
from src.services.metrics import (RANK_BY_IMPROVEMENT, RANK_BY_INPUT, SdrReport, evaluate_mixture,
                                  write_evaluation_csv, write_summary_csv)
from src.services.network import ModelHyper
from src.services.post_select import SelectionReport, blind_selection, oracle_select, oracle_selection
from src.services.room_sim import ArrayGeometry
from src.services.training import (INPUT_BEAMS, INPUT_KINDS, INPUT_REFERENCE, examples_for_mixture,
                                   fit_feature_stats, load_checkpoint, make_optimizer, reference_examples,
                                   save_checkpoint, train, write_loss_csv)
from src.utils.config import Config, PipelineConfig
from src.utils.errors import CompatibilityError, InputError
from src.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_SYSTEMS = ("proposed", "proposed+oracle", "mbbf", "irm", "mbirm", "omvdr")
EXTRA_SYSTEMS = ("dan", "passthrough")
BEAM_MODEL_SYSTEMS = {"proposed", "proposed+oracle"}
REFERENCE_MODEL_SYSTEMS = {"dan"}
CHECKPOINT_PATHS = {INPUT_BEAMS: "checkpoint_path", INPUT_REFERENCE: "dan_checkpoint_path"}
BEAMPATTERN_FREQS = (500.0, 1000.0, 2000.0, 3000.0)


@dataclass
class Utterance:
    """Everything evaluation needs for one corpus mixture."""
    record: CorpusRecord
    mixture: MultichannelWave
    references: np.ndarray
    images: np.ndarray
    beams: List[ComplexSpectrogram]

    @property
    def num_speakers(self) -> int:
        return self.references.shape[0]


class PipelineService:
    def __init__(self, config: PipelineConfig, registry: bool = True):
        self.config = config
        self.registry = registry
        self.stft_cfg = StftConfig(config.stft.frame_len, config.stft.hop, config.stft.window)
        self.geometry = ArrayGeometry.circular_seven(config.array.radius)

    @contextmanager
    def _tracked(self, command: str, config_hash: str):
        """Register a run, mark it ok or failed when the block exits."""
        run_id = models.create_run(command, config_hash).id if self.registry else None
        try:
            yield run_id
        except Exception as e:
            if run_id is not None:
                models.finish_run(run_id, "failed", str(e))
            raise
        if run_id is not None:
            models.finish_run(run_id, "ok")

    def _record(self, run_id: Optional[int], kind: str, path, config_hash: str):
        if run_id is not None:
            models.record_artifact(run_id, kind, str(path), config_hash)

    # ---- corpus ----------------------------------------------------------

    def dry_source_pool(self) -> List[np.ndarray]:
        c = self.config.corpus
        if c.source_dir:
            return load_pool(c.source_dir, self.config.stft.sample_rate)
        return synthetic_pool(c.pool_size, c.seed, c.duration_s, self.config.stft.sample_rate)

    def gen_corpus(self) -> Path:
        c = self.config.corpus
        corpus_hash = self.config.corpus_hash
        with self._tracked("gen-corpus", corpus_hash) as run_id:
            manifest = build_corpus(
                str(self.config.resolve("corpus_dir")), c.count, c.num_speakers, c.seed,
                self.dry_source_pool(), self.geometry, rir_len=c.rir_len,
                max_image_order=c.max_image_order, min_separation_deg=c.min_separation_deg,
                sample_rate=self.config.stft.sample_rate, reference_mic=self.config.array.reference_mic,
                config_hash=corpus_hash, workers=Config.WORKERS, acoustic_hash=self.config.acoustic_hash,
            )
            self._record(run_id, "manifest", manifest, corpus_hash)
            return manifest

    def corpus_records(self, corpus_dir: Optional[str] = None) -> List[CorpusRecord]:
        """Records of the configured corpus, or of a held-out corpus under `corpus_dir`.

        The configured corpus must match the corpus config exactly. A held-out corpus only has to
        share the acoustic settings, so it may come from another seed or source pool.
        """
        held_out = corpus_dir is not None
        path = manifest_path_for(corpus_dir if held_out else str(self.config.resolve("corpus_dir")))
        if not os.path.exists(path):
            raise InputError(f"No corpus manifest at {path}; run gen-corpus first")
        records = read_manifest(path)
        for record in records:
            if held_out and record.acoustic_hash != self.config.acoustic_hash:
                raise CompatibilityError(f"{record.utterance_id} was simulated under acoustic settings "
                                         f"{record.acoustic_hash}, current settings are {self.config.acoustic_hash}")
            if not held_out and record.config_hash != self.config.corpus_hash:
                raise CompatibilityError(f"{record.utterance_id} was generated with config {record.config_hash}, "
                                         f"current corpus config is {self.config.corpus_hash}")
        return records

    # ---- beams -----------------------------------------------------------

    def design_beams(self) -> Path:
        b = self.config.bank
        frontend_hash = self.config.frontend_hash
        with self._tracked("design-beams", frontend_hash) as run_id:
            bank = design_bank(self.geometry, b.num_beams, default_design_grid(b.num_freqs, b.f_min, b.f_max),
                               b.target, b.diagonal_load, b.wng_floor_db, b.angle_step_deg,
                               self.config.array.speed_of_sound)
            path = self.config.resolve("bank_path")
            path.parent.mkdir(parents=True, exist_ok=True)
            save_bank(bank, str(path), frontend_hash)
            pattern_path = path.with_name(path.stem + "_beampattern.csv")
            write_beampattern_csv(bank, str(pattern_path), list(range(bank.num_beams)), list(BEAMPATTERN_FREQS))
            self._record(run_id, "bank", path, frontend_hash)
            self._record(run_id, "beampattern", pattern_path, frontend_hash)
            return path

    def load_bank(self) -> BeamformerBank:
        path = self.config.resolve("bank_path")
        if not path.exists():
            raise InputError(f"No beamformer bank at {path}; run design-beams first")
        return load_bank(str(path), self.config.frontend_hash)

    def beam_references(self, bank: BeamformerBank, images: np.ndarray, sample_rate: int):
        """B x C spectrograms of each speaker's image seen through each beam."""
        per_speaker = [apply_bank(bank, MultichannelWave(img, sample_rate), self.stft_cfg) for img in images]
        return [[per_speaker[c][b] for c in range(len(images))] for b in range(bank.num_beams)]

    def load_utterance(self, record: CorpusRecord, bank: BeamformerBank) -> Utterance:
        mixture = record.load_mixture()
        return Utterance(record, mixture, record.load_references(), record.load_images(),
                         apply_bank(bank, mixture, self.stft_cfg))

    # ---- training --------------------------------------------------------

    def _new_model(self) -> EmbeddingModel:
        m = self.config.model
        hyper = ModelHyper(num_freq=self.stft_cfg.num_bins, embedding_dim=m.embedding_dim,
                           num_anchors=m.num_anchors, hidden=m.hidden, layers=m.layers,
                           recurrent=m.recurrent)
        return EmbeddingModel.create(hyper, self.config.training.seed, self.config.stft.log_floor)

    def _beam_examples(self, model: EmbeddingModel, records: Sequence[CorpusRecord]):
        bank = self.load_bank()
        examples = []
        for record in records:
            utt = self.load_utterance(record, bank)
            refs = self.beam_references(bank, utt.images, utt.mixture.sample_rate)
            magnitudes = np.array([[spec.magnitude for spec in row] for row in refs])
            examples.extend(examples_for_mixture(model, record.utterance_id, utt.beams, magnitudes))
        return examples

    def _reference_examples(self, model: EmbeddingModel, records: Sequence[CorpusRecord]):
        ref_mic = self.config.array.reference_mic
        examples = []
        for record in records:
            mixture = record.load_mixture()
            rate = mixture.sample_rate
            mix_spec = stft(mixture.channel(ref_mic), self.stft_cfg, rate)
            magnitudes = np.stack([stft(r, self.stft_cfg, rate).magnitude for r in record.load_references()])
            examples.extend(reference_examples(model, record.utterance_id, mix_spec, magnitudes))
        return examples

    def train(self, input_kind: str = INPUT_BEAMS) -> Path:
        """Train on beam outputs (the separation model) or on the reference mic (the DAN baseline)."""
        if input_kind not in INPUT_KINDS:
            raise InputError(f"Unknown training input '{input_kind}'")
        t = self.config.training
        model_hash = self.config.model_hash
        command = "train" if input_kind == INPUT_BEAMS else f"train-{input_kind}"
        with self._tracked(command, model_hash) as run_id:
            records = self.corpus_records()
            if not records:
                raise InputError("Corpus is empty")
            model = self._new_model()
            C = records[0].num_speakers
            if input_kind == INPUT_BEAMS:
                examples = self._beam_examples(model, records)
                salient = self._salient(C)
            else:
                examples = self._reference_examples(model, records)
                salient = self._dan_salient(C, model)
            logger.info(f"Training on {len(examples)} {input_kind} examples from {len(records)} mixtures")
            fit_feature_stats(model, examples)
            optimizer = make_optimizer(t.optimizer, t.step_size, t.clip_norm)
            losses = train(model, examples, t.steps, optimizer, salient, t.batch_size, t.seed, t.log_every)

            path = self.config.resolve(CHECKPOINT_PATHS[input_kind])
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, str(path), model_hash, self.config.corpus_hash, t.seed, t.steps,
                            self.config.acoustic_hash, input_kind)
            loss_path = path.with_name(path.stem + "_loss.csv")
            write_loss_csv(str(loss_path), losses, model_hash)
            self._record(run_id, "checkpoint", path, model_hash)
            self._record(run_id, "loss", loss_path, model_hash)
            return path

    def load_model(self, input_kind: str = INPUT_BEAMS) -> EmbeddingModel:
        path = self.config.resolve(CHECKPOINT_PATHS[input_kind])
        if not path.exists():
            hint = "train" if input_kind == INPUT_BEAMS else f"train --input {input_kind}"
            raise InputError(f"No checkpoint at {path}; run {hint} first")
        return load_checkpoint(str(path), self.config.model_hash, self.config.acoustic_hash, input_kind).model

    # ---- separation ------------------------------------------------------

    def _salient(self, num_speakers: int) -> int:
        return min(self.config.model.salient, default_salient(num_speakers))

    def _dan_salient(self, num_speakers: int, model: EmbeddingModel) -> int:
        """C - 1 salient outputs plus the residual, so one channel can cover every speaker."""
        return min(max(self._salient(num_speakers), num_speakers - 1), model.hyper.num_anchors - 1)

    def candidates(self, model: EmbeddingModel, beams: Sequence[ComplexSpectrogram], num_speakers: int):
        """Flattened E x B candidates: (magnitudes, waveforms, (beam, output) provenance)."""
        separations = separate_beams(model, beams, num_speakers, self._salient(num_speakers))
        magnitudes, waveforms, provenance = [], [], []
        for b, sep in enumerate(separations):
            for e in range(sep.num_outputs):
                magnitudes.append(sep.magnitudes[e])
                waveforms.append(sep.waveforms[e])
                provenance.append((b, e))
        return magnitudes, waveforms, provenance

    def select(self, model: EmbeddingModel, beams: Sequence[ComplexSpectrogram], num_speakers: int,
               utterance_id: str = "", references: Optional[np.ndarray] = None):
        """C output waveforms plus the selection report; references switch to oracle selection."""
        s = self.config.selection
        magnitudes, waveforms, provenance = self.candidates(model, beams, num_speakers)
        if references is not None:
            report = oracle_selection(waveforms, references, provenance, utterance_id, s.oracle_strategy)
        else:
            report = blind_selection(magnitudes, provenance, num_speakers, utterance_id,
                                     s.log_affinity, s.cluster_seed, s.kmeans_restarts)
        return [waveforms[i] for i in report.chosen], report

    def separate(self, mixture_path: str, out_dir: str, num_speakers: Optional[int] = None,
                 use_oracle: bool = False) -> SelectionReport:
        model_hash = self.config.model_hash
        with self._tracked("separate", model_hash) as run_id:
            mixture = read_wav(mixture_path)
            if mixture.sample_rate != self.config.stft.sample_rate:
                raise InputError(f"{mixture_path}: sample rate {mixture.sample_rate} != "
                                 f"{self.config.stft.sample_rate}")
            C = num_speakers or self.config.corpus.num_speakers
            model = self.load_model()
            beams = apply_bank(self.load_bank(), mixture, self.stft_cfg)
            references = None
            if use_oracle:
                references = self._references_next_to(mixture_path, C)
                if references is None:
                    logger.warning(f"No references next to {mixture_path}; using blind selection")
            stem = Path(mixture_path).stem
            outputs, report = self.select(model, beams, C, stem, references)
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            for c, wave in enumerate(outputs):
                path = out / f"{stem}_spk{c}.wav"
                write_wav(path, MultichannelWave(wave, mixture.sample_rate))
                self._record(run_id, "separated", path, model_hash)
            report_path = out / f"{stem}_selection.json"
            report.dump(str(report_path))
            self._record(run_id, "selection", report_path, model_hash)
            logger.info(f"Wrote {len(outputs)} outputs for {mixture_path} to {out}")
            return report

    @staticmethod
    def _references_next_to(mixture_path: str, num_speakers: int) -> Optional[np.ndarray]:
        folder = Path(mixture_path).parent
        paths = [folder / f"ref_{c}.wav" for c in range(num_speakers)]
        if not all(p.exists() for p in paths):
            return None
        return np.stack([read_wav(p).channel(0) for p in paths])

    # ---- evaluation ------------------------------------------------------

    def system_outputs(self, system: str, utt: Utterance, bank: BeamformerBank,
                       model: Optional[EmbeddingModel],
                       dan_model: Optional[EmbeddingModel] = None) -> List[np.ndarray]:
        """C output waveforms of one system, outputs[c] paired with speaker c."""
        refs, C = utt.references, utt.num_speakers
        rate = utt.mixture.sample_rate
        if system == "passthrough":
            return list(refs)
        if system == "proposed":
            outputs, _ = self.select(model, utt.beams, C, utt.record.utterance_id)
            order = oracle_select(outputs, refs, "optimal")
            return [outputs[i] for i in order]
        if system == "proposed+oracle":
            outputs, _ = self.select(model, utt.beams, C, utt.record.utterance_id, refs)
            return outputs
        if system == "mbbf":
            waves = baselines.beam_waveforms(utt.beams)
            return [waves[b] for b in baselines.mbbf_oracle(utt.beams, refs)]
        if system == "irm":
            ref_mic = self.config.array.reference_mic
            mix_spec = stft(utt.mixture.channel(ref_mic), self.stft_cfg, rate)
            ref_specs = [stft(r, self.stft_cfg, rate) for r in refs]
            return baselines.irm_baseline(mix_spec, ref_specs).waveforms
        if system == "mbirm":
            return baselines.mbirm_baseline(utt.beams, self.beam_references(bank, utt.images, rate), refs)
        if system == "omvdr":
            interference = np.stack([utt.images[[o for o in range(C) if o != c]].sum(axis=0)
                                     if C > 1 else np.zeros_like(utt.images[0]) for c in range(C)])
            return baselines.oracle_mvdr(utt.mixture, utt.record.azimuths_deg, interference, self.geometry,
                                         self.stft_cfg, self.config.array.speed_of_sound)
        if system == "dan":
            ref_spec = stft(utt.mixture.channel(self.config.array.reference_mic), self.stft_cfg, rate)
            sep = separate_beam(dan_model, ref_spec, C, self._dan_salient(C, dan_model))
            return [sep.waveforms[i] for i in oracle_select(sep.waveforms, refs, "optimal")]
        raise InputError(f"Unknown system '{system}'")

    def evaluate_utterance(self, record: CorpusRecord, systems: Sequence[str], bank: BeamformerBank,
                           model: Optional[EmbeddingModel],
                           dan_model: Optional[EmbeddingModel] = None) -> List[SdrReport]:
        utt = self.load_utterance(record, bank)
        mix_ref = utt.mixture.channel(self.config.array.reference_mic)
        reports = []
        for system in systems:
            outputs = self.system_outputs(system, utt, bank, model, dan_model)
            reports.append(evaluate_mixture(outputs, utt.references, mix_ref, system, record.utterance_id))
        logger.debug(f"Evaluated {record.utterance_id}: "
                     + ", ".join(f"{r.system} {r.mean_improvement:.2f} dB" for r in reports))
        return reports

    def evaluate(self, systems: Sequence[str] = DEFAULT_SYSTEMS, corpus_dir: Optional[str] = None,
                 rank_by: str = RANK_BY_IMPROVEMENT) -> Dict[str, Path]:
        """Score `systems` on the configured corpus, or on a held-out one under `corpus_dir`.

        `rank_by` orders speakers for the summary's top-k columns.
        """
        unknown = [s for s in systems if s not in DEFAULT_SYSTEMS + EXTRA_SYSTEMS]
        if unknown:
            raise InputError(f"Unknown systems: {unknown}")
        if rank_by not in (RANK_BY_IMPROVEMENT, RANK_BY_INPUT):
            raise InputError(f"Unknown ranking '{rank_by}'")
        model_hash = self.config.model_hash
        with self._tracked("evaluate", model_hash) as run_id:
            records = self.corpus_records(corpus_dir)
            bank = self.load_bank()
            model = self.load_model() if BEAM_MODEL_SYSTEMS.intersection(systems) else None
            dan_model = self.load_model(INPUT_REFERENCE) if REFERENCE_MODEL_SYSTEMS.intersection(systems) else None

            def job(record):
                return self.evaluate_utterance(record, systems, bank, model, dan_model)

            with ThreadPoolExecutor(max_workers=max(1, Config.WORKERS)) as pool:
                reports = [r for batch in pool.map(job, records) for r in batch]

            out = self.config.resolve("eval_dir")
            out.mkdir(parents=True, exist_ok=True)
            rows_path, summary_path = out / "evaluation.csv", out / "summary.csv"
            write_evaluation_csv(str(rows_path), reports, systems)
            write_summary_csv(str(summary_path), reports, systems, rank_by)
            if run_id is not None:
                models.record_evaluation(run_id, reports)
            self._record(run_id, "evaluation", rows_path, model_hash)
            self._record(run_id, "summary", summary_path, model_hash)
            logger.info(f"Evaluated {len(records)} mixtures on {len(systems)} systems; results in {out}")
            return {"evaluation": rows_path, "summary": summary_path}
