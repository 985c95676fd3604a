"""Anchored deep attractor network: anchors, attractors, masks and the PIT objective.

Notation: V are T x F x K embeddings, H the N x K anchors, E the number of
outputs per beam (G salient speakers plus one residual output).
"""
from dataclasses import dataclass, field
from itertools import combinations, permutations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from src.services import network
from src.services.dsp import DEFAULT_LOG_FLOOR, ComplexSpectrogram, istft, log_magnitude
from src.services.network import ModelHyper, Params
from src.utils.errors import DegenerateWeightError, ShapeError
from src.utils.logger import get_logger

logger = get_logger(__name__)

WEIGHT_EPS = 1e-12


@dataclass
class EmbeddingModel:
    hyper: ModelHyper
    params: Params
    anchors: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    seed: int = 0
    log_floor: float = DEFAULT_LOG_FLOOR

    @classmethod
    def create(cls, hyper: ModelHyper, seed: int = 0,
               log_floor: float = DEFAULT_LOG_FLOOR) -> "EmbeddingModel":
        rng = np.random.default_rng(seed)
        params = network.init_params(hyper, rng)
        anchors = rng.uniform(-0.5, 0.5, (hyper.num_anchors, hyper.embedding_dim))
        return cls(hyper, params, anchors, np.zeros(hyper.num_freq), np.ones(hyper.num_freq),
                   seed, log_floor)

    def tensors(self) -> Dict[str, np.ndarray]:
        """Every trainable array by name; updating them in place updates the model."""
        return {**self.params, "anchors": self.anchors}

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feat_mean) / self.feat_std

    def features(self, spec: ComplexSpectrogram) -> np.ndarray:
        return log_magnitude(spec, self.log_floor)

    def embed(self, features: np.ndarray) -> np.ndarray:
        V, _ = network.forward(self.params, self.hyper, self.normalize(features))
        return V


@dataclass(frozen=True)
class AttractorCandidates:
    combos: List[Tuple[int, ...]]
    weights: np.ndarray
    attractors: np.ndarray
    similarity: np.ndarray


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray

    @property
    def num_outputs(self) -> int:
        return self.masks.shape[0]


@dataclass(frozen=True)
class PitResult:
    loss: float
    pairs: Tuple[Tuple[int, int], ...]
    residual_output: Optional[int]
    residual_reference: np.ndarray = field(repr=False)


def presegment(H_subset: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Soft pre-segmentation W (C x T x F): softmax over anchors of H . V."""
    logits = np.einsum("ck,tfk->ctf", H_subset, V)
    return softmax(logits, axis=0)


def attractors(V: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Weighted mean of embeddings per source (C x K)."""
    totals = W.sum(axis=(1, 2))
    if np.any(totals <= WEIGHT_EPS):
        raise DegenerateWeightError(f"Source weights sum to zero: {totals}")
    return np.einsum("ctf,tfk->ck", W, V) / totals[:, None]


def in_set_similarity(A: np.ndarray) -> float:
    """Largest dot product between two attractors of one set."""
    if A.shape[0] < 2:
        return -np.inf
    gram = A @ A.T
    upper = np.triu_indices(A.shape[0], k=1)
    return float(np.max(gram[upper]))


def attractor_candidates(anchors: np.ndarray, V: np.ndarray, num_sources: int) -> AttractorCandidates:
    """Attractor sets for every choice of `num_sources` anchors out of N."""
    N = anchors.shape[0]
    if num_sources > N:
        raise ShapeError(f"{num_sources} sources need at least as many anchors (have {N})")
    combos = list(combinations(range(N), num_sources))
    weights, sets, sims = [], [], []
    for combo in combos:
        W = presegment(anchors[list(combo)], V)
        A = attractors(V, W)
        weights.append(W)
        sets.append(A)
        sims.append(in_set_similarity(A))
    return AttractorCandidates(combos, np.array(weights), np.array(sets), np.array(sims))


def select_attractor_set(candidates: AttractorCandidates) -> Tuple[int, np.ndarray]:
    """Candidate with the minimum in-set similarity; ties go to the lowest index."""
    index = int(np.argmin(candidates.similarity))
    return index, candidates.attractors[index]


def masks(A: np.ndarray, V: np.ndarray) -> MaskSet:
    logits = np.einsum("ek,tfk->etf", A, V)
    return MaskSet(softmax(logits, axis=0))


def residual_reference(mixture_magnitude: np.ndarray, chosen_references: np.ndarray) -> np.ndarray:
    return np.maximum(mixture_magnitude - chosen_references.sum(axis=0), 0.0)


def pit_loss(masked_outputs: np.ndarray, references: np.ndarray, mixture_magnitude: np.ndarray,
             salient: int) -> PitResult:
    """Minimum squared error over output subsets, reference subsets and bijections.

    The output left over after matching `salient` outputs is scored against the
    residual: mixture magnitude minus the chosen references, floored at 0.
    """
    E, C = masked_outputs.shape[0], references.shape[0]
    if E != salient + 1:
        raise ShapeError(f"Expected E = G + 1 outputs, got E={E}, G={salient}")
    if C < salient:
        raise ShapeError(f"G={salient} salient speakers but only {C} references")
    pair_err = np.array([[np.sum((masked_outputs[e] - references[c]) ** 2) for c in range(C)]
                         for e in range(E)])
    best = None
    for ref_sel in combinations(range(C), salient):
        residual = residual_reference(mixture_magnitude, references[list(ref_sel)])
        for out_sel in combinations(range(E), salient):
            left = next(e for e in range(E) if e not in out_sel)
            res_err = np.sum((masked_outputs[left] - residual) ** 2)
            for perm in permutations(ref_sel):
                total = res_err + sum(pair_err[e, c] for e, c in zip(out_sel, perm))
                if best is None or total < best[0]:
                    best = (total, tuple(zip(out_sel, perm)), left, residual)
    loss, pairs, left, residual = best
    return PitResult(float(loss), pairs, left, residual)


@dataclass(frozen=True)
class ForwardResult:
    loss: float
    grads: Optional[Dict[str, np.ndarray]]
    anchor_set: Tuple[int, ...]
    pit: PitResult
    masks: np.ndarray


def forward_backward(model: EmbeddingModel, features: np.ndarray, beam_magnitude: np.ndarray,
                     references: np.ndarray, salient: int, compute_grads: bool = True) -> ForwardResult:
    """Mean-per-bin PIT loss of one beam and its gradients w.r.t. every tensor.

    The attractor-set and assignment choices are held fixed for the backward pass.
    """
    T, F = beam_magnitude.shape
    E = salient + 1
    V, cache = network.forward(model.params, model.hyper, model.normalize(features))
    candidates = attractor_candidates(model.anchors, V, E)
    p, A = select_attractor_set(candidates)
    combo = candidates.combos[p]
    W = candidates.weights[p]
    M = masks(A, V).masks
    outputs = M * beam_magnitude[None]
    pit = pit_loss(outputs, references, beam_magnitude, salient)
    scale = 1.0 / (T * F)
    loss = pit.loss * scale
    if not compute_grads:
        return ForwardResult(loss, None, combo, pit, M)

    dO = np.zeros_like(outputs)
    for e, c in pit.pairs:
        dO[e] = 2.0 * (outputs[e] - references[c])
    dO[pit.residual_output] = 2.0 * (outputs[pit.residual_output] - pit.residual_reference)
    dO *= scale

    # masks = softmax_e(A . V)
    dM = dO * beam_magnitude[None]
    dZ = M * (dM - np.sum(M * dM, axis=0, keepdims=True))
    dV = np.einsum("etf,ek->tfk", dZ, A)
    dA = np.einsum("etf,tfk->ek", dZ, V)

    # A = W V / sum(W)
    totals = W.sum(axis=(1, 2))
    dA_scaled = dA / totals[:, None]
    dV += np.einsum("ctf,ck->tfk", W, dA_scaled)
    dW = np.einsum("tfk,ck->ctf", V, dA_scaled) - np.sum(A * dA_scaled, axis=1)[:, None, None]

    # W = softmax_c(H_sel . V)
    H_sel = model.anchors[list(combo)]
    dL = W * (dW - np.sum(W * dW, axis=0, keepdims=True))
    dV += np.einsum("ctf,ck->tfk", dL, H_sel)
    d_anchors = np.zeros_like(model.anchors)
    d_anchors[list(combo)] = np.einsum("ctf,tfk->ck", dL, V)

    grads = network.backward(model.params, model.hyper, cache, dV)
    grads["anchors"] = d_anchors
    return ForwardResult(loss, grads, combo, pit, M)


@dataclass(frozen=True)
class BeamSeparation:
    masks: np.ndarray
    magnitudes: np.ndarray
    spectrograms: List[ComplexSpectrogram]
    waveforms: List[np.ndarray]

    @property
    def num_outputs(self) -> int:
        return self.masks.shape[0]


def apply_masks(beam_spec: ComplexSpectrogram, mask_array: np.ndarray) -> BeamSeparation:
    """Masked magnitudes plus waveforms resynthesised with the beam's phase."""
    specs = [beam_spec.masked(m) for m in mask_array]
    return BeamSeparation(
        masks=mask_array,
        magnitudes=mask_array * beam_spec.magnitude[None],
        spectrograms=specs,
        waveforms=[istft(s) for s in specs],
    )


def default_salient(num_speakers: int) -> int:
    return min(num_speakers, 2)


def separate_beam(model: EmbeddingModel, beam_spec: ComplexSpectrogram, num_speakers: int,
                  salient: Optional[int] = None) -> BeamSeparation:
    """E = G + 1 masked outputs of one beam."""
    G = default_salient(num_speakers) if salient is None else salient
    V = model.embed(model.features(beam_spec))
    candidates = attractor_candidates(model.anchors, V, G + 1)
    _, A = select_attractor_set(candidates)
    return apply_masks(beam_spec, masks(A, V).masks)


def separate_beams(model: EmbeddingModel, beams: Sequence[ComplexSpectrogram], num_speakers: int,
                   salient: Optional[int] = None) -> List[BeamSeparation]:
    return [separate_beam(model, beam, num_speakers, salient) for beam in beams]
