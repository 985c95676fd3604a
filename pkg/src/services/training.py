import csv
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.services.adan import EmbeddingModel, forward_backward
from src.services.dsp import ComplexSpectrogram
from src.services.network import ModelHyper
from src.utils.config import Config
from src.utils.errors import CompatibilityError, DivergenceError, InputError
from src.utils.logger import get_logger

logger = get_logger(__name__)

MAX_CONSECUTIVE_DIVERGENCES = 10

# What a model was trained to separate: beamformer outputs or the reference microphone.
INPUT_BEAMS = "beams"
INPUT_REFERENCE = "reference"
INPUT_KINDS = (INPUT_BEAMS, INPUT_REFERENCE)


@dataclass(frozen=True)
class TrainingExample:
    features: np.ndarray
    beam_magnitude: np.ndarray
    references: np.ndarray
    utterance_id: str = ""
    beam_index: int = 0


def _clip(grads: Dict[str, np.ndarray], clip_norm: float) -> Dict[str, np.ndarray]:
    norm = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
    if norm > clip_norm:
        return {k: g * (clip_norm / norm) for k, g in grads.items()}
    return grads


class SGD:
    """Plain gradient descent with gradient-norm clipping."""

    def __init__(self, step_size: float, clip_norm: float = 5.0):
        self.step_size = step_size
        self.clip_norm = clip_norm

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for name, g in _clip(grads, self.clip_norm).items():
            tensors[name] -= self.step_size * g


class Adam:
    def __init__(self, step_size: float, clip_norm: float = 5.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.clip_norm = clip_norm
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.t += 1
        for name, g in _clip(grads, self.clip_norm).items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g ** 2
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            tensors[name] -= self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, step_size: float, clip_norm: float):
    if name == "sgd":
        return SGD(step_size, clip_norm)
    if name == "adam":
        return Adam(step_size, clip_norm)
    raise InputError(f"Unknown optimizer '{name}'")


def train_step(model: EmbeddingModel, batch: Sequence[TrainingExample], optimizer,
               salient: int) -> float:
    """One update from the mean loss of `batch`; rejects non-finite steps."""
    if not batch:
        raise InputError("train_step needs a non-empty batch")
    total = 0.0
    accum: Dict[str, np.ndarray] = {}
    for example in batch:
        result = forward_backward(model, example.features, example.beam_magnitude,
                                  example.references, salient)
        total += result.loss
        for name, g in result.grads.items():
            accum[name] = accum[name] + g if name in accum else g.copy()
    loss = total / len(batch)
    grads = {name: g / len(batch) for name, g in accum.items()}
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError(f"Non-finite loss or gradient (loss={loss})")
    optimizer.step(model.tensors(), grads)
    return loss


def select_training_beams(beam_references: np.ndarray) -> List[int]:
    """Per speaker, the beam with the largest speaker-to-rest energy ratio.

    `beam_references` is B x C x T x F reference magnitudes in the beam domain.
    """
    B, C = beam_references.shape[:2]
    energy = np.sum(beam_references ** 2, axis=(2, 3))
    chosen = []
    for c in range(C):
        rest = np.sum(np.delete(beam_references, c, axis=1), axis=1) if C > 1 else None
        rest_energy = np.sum(rest ** 2, axis=(1, 2)) if rest is not None else np.ones(B)
        snr = energy[:, c] / np.maximum(rest_energy, 1e-12)
        chosen.append(int(np.argmax(snr)))
    return chosen


def examples_for_mixture(model: EmbeddingModel, utterance_id: str, beams: Sequence[ComplexSpectrogram],
                         beam_references: np.ndarray) -> List[TrainingExample]:
    examples = []
    for b in sorted(set(select_training_beams(beam_references))):
        examples.append(TrainingExample(
            features=model.features(beams[b]),
            beam_magnitude=beams[b].magnitude,
            references=beam_references[b],
            utterance_id=utterance_id,
            beam_index=b,
        ))
    return examples


def reference_examples(model: EmbeddingModel, utterance_id: str, mixture_spec: ComplexSpectrogram,
                       reference_magnitudes: np.ndarray) -> List[TrainingExample]:
    """One single-channel example: the reference-microphone mixture against each speaker's image there."""
    return [TrainingExample(
        features=model.features(mixture_spec),
        beam_magnitude=mixture_spec.magnitude,
        references=np.asarray(reference_magnitudes, dtype=np.float64),
        utterance_id=utterance_id,
        beam_index=-1,
    )]


def fit_feature_stats(model: EmbeddingModel, examples: Sequence[TrainingExample]):
    stacked = np.concatenate([ex.features for ex in examples], axis=0)
    model.feat_mean = stacked.mean(axis=0)
    model.feat_std = np.maximum(stacked.std(axis=0), 1e-3)


def train(model: EmbeddingModel, examples: Sequence[TrainingExample], steps: int, optimizer,
          salient: int, batch_size: int = 1, seed: int = 0, log_every: int = 50) -> List[float]:
    """Run `steps` updates over seeded shuffles of `examples`; returns the loss per step."""
    if not examples:
        raise InputError("No training examples")
    rng = np.random.default_rng(seed)
    order: List[int] = []
    losses: List[float] = []
    consecutive = 0
    for step in range(steps):
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(rng.permutation(len(examples)))
            batch.append(examples[order.pop()])
        try:
            loss = train_step(model, batch, optimizer, salient)
            consecutive = 0
        except DivergenceError as e:
            consecutive += 1
            logger.warning(f"Step {step} rejected: {e}")
            if consecutive >= MAX_CONSECUTIVE_DIVERGENCES:
                raise
            loss = float("nan")
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            recent = [x for x in losses[-log_every:] if np.isfinite(x)]
            logger.info(f"Step {step + 1}/{steps}: mean loss {np.mean(recent) if recent else float('nan'):.5f}")
    return losses


def write_loss_csv(path: str, losses: Sequence[float], config_hash: str = ""):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "config_hash"])
        for step, loss in enumerate(losses):
            writer.writerow([step, f"{loss:.8f}", config_hash])


def save_checkpoint(model: EmbeddingModel, path: str, model_hash: str = "",
                    corpus_hash: str = "", training_seed: int = 0, steps: int = 0,
                    acoustic_hash: str = "", input_kind: str = INPUT_BEAMS):
    if input_kind not in INPUT_KINDS:
        raise InputError(f"Unknown model input '{input_kind}'")
    arrays = {f"param:{name}": value for name, value in model.params.items()}
    np.savez(
        path,
        format_version=np.array(Config.CHECKPOINT_FORMAT_VERSION),
        hyper=np.array(json.dumps(model.hyper.to_dict(), sort_keys=True)),
        anchors=model.anchors,
        feat_mean=model.feat_mean,
        feat_std=model.feat_std,
        seed=np.array(model.seed),
        log_floor=np.array(model.log_floor),
        training_seed=np.array(training_seed),
        steps=np.array(steps),
        model_hash=np.array(model_hash),
        corpus_hash=np.array(corpus_hash),
        acoustic_hash=np.array(acoustic_hash),
        input_kind=np.array(input_kind),
        **arrays,
    )
    logger.info(f"Saved checkpoint to {path}")


@dataclass(frozen=True)
class Checkpoint:
    model: EmbeddingModel
    model_hash: str
    corpus_hash: str
    acoustic_hash: str
    input_kind: str
    training_seed: int
    steps: int


def load_checkpoint(path: str, expected_model_hash: Optional[str] = None,
                    expected_acoustic_hash: Optional[str] = None,
                    expected_input: Optional[str] = None) -> Checkpoint:
    """Load a checkpoint, refusing one built for another model, front end, room setup or input.

    The corpus hash is kept for provenance only, so a model can be evaluated on held-out corpora.
    """
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != Config.CHECKPOINT_FORMAT_VERSION:
            raise CompatibilityError(f"{path}: checkpoint format version {version} is not supported")
        model_hash, corpus_hash = str(data["model_hash"]), str(data["corpus_hash"])
        acoustic_hash, input_kind = str(data["acoustic_hash"]), str(data["input_kind"])
        if expected_model_hash is not None and model_hash != expected_model_hash:
            raise CompatibilityError(f"{path}: checkpoint built for model config {model_hash}, "
                                     f"current config is {expected_model_hash}")
        if expected_acoustic_hash is not None and acoustic_hash != expected_acoustic_hash:
            raise CompatibilityError(f"{path}: checkpoint trained under acoustic settings {acoustic_hash}, "
                                     f"current settings are {expected_acoustic_hash}")
        if expected_input is not None and input_kind != expected_input:
            raise CompatibilityError(f"{path}: checkpoint was trained on '{input_kind}' input, "
                                     f"expected '{expected_input}'")
        hyper = ModelHyper(**json.loads(str(data["hyper"])))
        params = {key.split(":", 1)[1]: data[key].copy() for key in data.files if key.startswith("param:")}
        model = EmbeddingModel(hyper, params, data["anchors"].copy(), data["feat_mean"].copy(),
                               data["feat_std"].copy(), int(data["seed"]), float(data["log_floor"]))
        return Checkpoint(model, model_hash, corpus_hash, acoustic_hash, input_kind,
                          int(data["training_seed"]), int(data["steps"]))
