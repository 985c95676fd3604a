"""Reduce the E x B candidate outputs of a mixture to C speakers.

Candidates are grouped by spectral clustering of their Pearson affinity into
C + 1 clusters. The extra cluster collects separation failures and artifacts;
it is the one whose best member has the lowest quality score. One candidate
per remaining cluster is kept.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, eigh
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from src.services.dsp import match_length
from src.services.metrics import sdr
from src.utils.errors import DegenerateInputError, InputError, NumericalError, ShapeError
from src.utils.logger import get_logger

logger = get_logger(__name__)

QUALITY_FLOOR_DB = -80.0
LOG_AFFINITY_FLOOR = 1e-8
# Centred norms below this fraction of the candidates' scale count as zero variance.
VARIANCE_RTOL = 1e-10


@dataclass(frozen=True)
class AffinityMatrix:
    entries: np.ndarray
    indices: np.ndarray  # candidate index of each row

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    num_clusters: int


def pearson_affinity(candidates: Sequence[np.ndarray], log_magnitude: bool = False) -> AffinityMatrix:
    """Pearson correlation between flattened candidate magnitudes.

    Zero-variance candidates are dropped with a warning; `indices` maps rows back. Variance is
    judged relative to the candidates' magnitude, so constants that pick up rounding noise when
    centred are dropped too.
    """
    shapes = {np.shape(c) for c in candidates}
    if len(shapes) != 1:
        raise ShapeError(f"Candidates must share one shape, got {sorted(shapes)}")
    X = np.stack([np.asarray(c, dtype=np.float64).ravel() for c in candidates])
    if log_magnitude:
        X = np.log(np.maximum(X, LOG_AFFINITY_FLOOR))
    scale = float(np.abs(X).max()) * np.sqrt(X.shape[1]) if X.size else 0.0
    X = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(X ** 2, axis=1))
    constant = norms <= VARIANCE_RTOL * scale
    keep = np.flatnonzero(~constant)
    dropped = np.flatnonzero(constant)
    for i in dropped:
        logger.warning(f"Candidate {i} has zero variance; dropped from clustering")
    if keep.size == 0:
        raise DegenerateInputError("Every candidate has zero variance")
    Z = X[keep] / norms[keep, None]
    A = np.clip(Z @ Z.T, -1.0, 1.0)
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 1.0)
    return AffinityMatrix(A, keep)


def spectral_cluster(affinity: np.ndarray, k: int, rng_seed: int = 0, restarts: int = 20) -> ClusterAssignment:
    """Normalized spectral clustering of a Pearson affinity into k groups.

    Labels are renumbered in order of first appearance.
    """
    A = np.asarray(affinity, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"Affinity must be square, got {A.shape}")
    if not np.allclose(A, A.T, atol=1e-9):
        raise ShapeError("Affinity must be symmetric")
    n = A.shape[0]
    k = min(k, n)
    if k <= 1:
        return ClusterAssignment(np.zeros(n, dtype=int), 1)

    S = (A + 1.0) / 2.0
    degree = S.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(degree, 1e-12))
    L = np.eye(n) - inv_sqrt[:, None] * S * inv_sqrt[None, :]
    try:
        _, vectors = eigh(L, subset_by_index=[0, k - 1])
    except LinAlgError as e:
        raise NumericalError(f"Eigen-decomposition of the Laplacian failed: {e}")
    rows = np.linalg.norm(vectors, axis=1, keepdims=True)
    Y = vectors / np.maximum(rows, 1e-12)

    raw = KMeans(n_clusters=k, n_init=restarts, random_state=rng_seed).fit(Y).labels_
    _, first = np.unique(raw, return_index=True)
    relabel = {old: new for new, old in enumerate(raw[np.sort(first)])}
    labels = np.array([relabel[x] for x in raw], dtype=int)
    return ClusterAssignment(labels, int(labels.max()) + 1)


def quality_score(magnitude: np.ndarray) -> float:
    """mean/std of |v|, v the peak-normalised dB magnitude floored at -80 dB.

    Higher means sparser, i.e. cleaner. Constant input gives +inf.
    """
    mag = np.abs(np.asarray(magnitude, dtype=np.float64)).ravel()
    if mag.size == 0:
        raise InputError("Cannot score an empty candidate")
    peak = mag.max()
    if peak == 0.0:
        return float("inf")
    with np.errstate(divide="ignore"):
        v = np.maximum(20.0 * np.log10(mag / peak), QUALITY_FLOOR_DB)
    values = np.abs(v)
    std = values.std()
    if std == 0.0:
        return float("inf")
    return float(values.mean() / std)


def select_outputs(num_speakers: int, scores: Sequence[float], labels: Sequence[int]) -> List[int]:
    """Best-scoring member of each cluster, after discarding the artifact cluster.

    The artifact cluster is dropped only when there are more than `num_speakers`
    clusters. Missing picks are filled with the best unselected candidates.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size < num_speakers:
        raise ShapeError(f"{scores.size} candidates cannot cover {num_speakers} speakers")

    def best_member(cluster):
        members = np.flatnonzero(labels == cluster)
        return int(members[np.argmax(scores[members])])

    best = {int(c): best_member(c) for c in np.unique(labels)}
    if len(best) > num_speakers:
        artifact = min(best, key=lambda c: (scores[best[c]], -c))
        logger.debug(f"Discarding artifact cluster {artifact}")
        del best[artifact]
    chosen = sorted(best.values(), key=lambda i: (-scores[i], i))[:num_speakers]
    if len(chosen) < num_speakers:
        logger.warning(f"Only {len(chosen)} clusters for {num_speakers} speakers; filling by score")
        for i in sorted(range(scores.size), key=lambda i: (-scores[i], i)):
            if len(chosen) == num_speakers:
                break
            if i not in chosen:
                chosen.append(i)
    return chosen


def sdr_matrix(candidates: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> np.ndarray:
    """C x N SDRs of every candidate against every reference."""
    out = np.empty((len(references), len(candidates)))
    for c, ref in enumerate(references):
        for n, cand in enumerate(candidates):
            out[c, n] = sdr(match_length(np.asarray(cand, dtype=np.float64), len(ref)), ref)
    return out


def oracle_select(candidates: Sequence[np.ndarray], references: Sequence[np.ndarray],
                  strategy: str = "greedy") -> List[int]:
    """Candidate index serving each reference; no candidate serves two references."""
    if len(candidates) < len(references):
        raise ShapeError(f"{len(candidates)} candidates cannot cover {len(references)} references")
    scores = sdr_matrix(candidates, references)
    C = scores.shape[0]
    if strategy == "optimal":
        rows, cols = linear_sum_assignment(-scores)
        return [int(n) for _, n in sorted(zip(rows, cols))]
    if strategy != "greedy":
        raise InputError(f"Unknown oracle strategy '{strategy}'")
    chosen: List[Optional[int]] = [None] * C
    working = scores.copy()
    for _ in range(C):
        c, n = np.unravel_index(np.argmax(working), working.shape)
        chosen[c] = int(n)
        working[c, :] = -np.inf
        working[:, n] = -np.inf
    return chosen


@dataclass
class SelectionReport:
    utterance_id: str
    method: str
    chosen: List[int]
    provenance: List[Tuple[int, int]]  # (beam, output) per candidate
    scores: List[float] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    dropped: List[int] = field(default_factory=list)

    def chosen_provenance(self) -> List[Tuple[int, int]]:
        return [tuple(self.provenance[i]) for i in self.chosen]

    def to_dict(self) -> dict:
        data = asdict(self)
        data["scores"] = [s if np.isfinite(s) else None for s in self.scores]
        data["chosen_provenance"] = [list(p) for p in self.chosen_provenance()]
        return data

    def dump(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def blind_selection(magnitudes: Sequence[np.ndarray], provenance: Sequence[Tuple[int, int]],
                    num_speakers: int, utterance_id: str = "", log_affinity: bool = False,
                    cluster_seed: int = 0, restarts: int = 20) -> SelectionReport:
    """Cluster, score and pick C candidates without references."""
    affinity = pearson_affinity(magnitudes, log_affinity)
    clusters = spectral_cluster(affinity.entries, num_speakers + 1, cluster_seed, restarts)
    labels = np.full(len(magnitudes), -1, dtype=int)
    labels[affinity.indices] = clusters.labels
    scores = np.array([quality_score(m) for m in magnitudes])
    kept_choice = select_outputs(min(num_speakers, affinity.size), scores[affinity.indices],
                                 clusters.labels)
    chosen = [int(affinity.indices[i]) for i in kept_choice]
    dropped = sorted(set(range(len(magnitudes))) - set(affinity.indices.tolist()))
    if len(chosen) < num_speakers:
        chosen += dropped[:num_speakers - len(chosen)]
    return SelectionReport(utterance_id, "cluster", chosen, [tuple(p) for p in provenance],
                           scores.tolist(), labels.tolist(), dropped)


def oracle_selection(waveforms: Sequence[np.ndarray], references: Sequence[np.ndarray],
                     provenance: Sequence[Tuple[int, int]], utterance_id: str = "",
                     strategy: str = "greedy") -> SelectionReport:
    chosen = oracle_select(waveforms, references, strategy)
    return SelectionReport(utterance_id, f"oracle-{strategy}", chosen, [tuple(p) for p in provenance])
