"""Scale-invariant SDR and per-speaker evaluation reports."""
import csv
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from src.services.dsp import match_length
from src.utils.errors import InputError, ShapeError

SDR_CAP_DB = 100.0

RANK_BY_IMPROVEMENT = "improvement"
RANK_BY_INPUT = "input"


def sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """10 log10(|s_target|^2 / |e - s_target|^2) with s_target the projection of e on r, capped at +-100 dB."""
    e = np.asarray(estimate, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    if e.shape != r.shape:
        raise ShapeError(f"Estimate has {e.size} samples, reference has {r.size}")
    ref_energy = float(r @ r)
    if ref_energy == 0.0:
        raise InputError("Reference signal is all zeros")
    target = (float(e @ r) / ref_energy) * r
    target_energy = float(target @ target)
    error_energy = float(np.sum((e - target) ** 2))
    if target_energy == 0.0:
        return -SDR_CAP_DB
    if error_energy == 0.0:
        return SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(target_energy / error_energy), -SDR_CAP_DB, SDR_CAP_DB))


@dataclass(frozen=True)
class SpeakerScore:
    speaker: int
    input_sdr: float
    output_sdr: float

    @property
    def improvement(self) -> float:
        return self.output_sdr - self.input_sdr


@dataclass(frozen=True)
class SdrReport:
    utterance_id: str
    system: str
    scores: List[SpeakerScore] = field(default_factory=list)

    @property
    def num_speakers(self) -> int:
        return len(self.scores)

    @property
    def mean_improvement(self) -> float:
        return float(np.mean([s.improvement for s in self.scores]))

    def ranked(self, by: str = RANK_BY_IMPROVEMENT) -> List[SpeakerScore]:
        """Speakers in descending order of improvement (or of input SDR)."""
        if by == RANK_BY_IMPROVEMENT:
            key = lambda s: s.improvement
        elif by == RANK_BY_INPUT:
            key = lambda s: s.input_sdr
        else:
            raise InputError(f"Unknown ranking '{by}'")
        return sorted(self.scores, key=lambda s: (-key(s), s.speaker))

    def top_k(self, k: int, by: str = RANK_BY_IMPROVEMENT) -> float:
        """Mean improvement over the k best-ranked speakers."""
        return float(np.mean([s.improvement for s in self.ranked(by)[:k]]))


def evaluate_mixture(outputs: Sequence[np.ndarray], references: Sequence[np.ndarray],
                     mixture_ref_channel: np.ndarray, system: str = "",
                     utterance_id: str = "") -> SdrReport:
    """Input SDR (reference-mic mixture) and output SDR for each speaker; outputs[c] pairs with references[c]."""
    if len(outputs) != len(references):
        raise ShapeError(f"{len(outputs)} outputs for {len(references)} references")
    scores = []
    for c, (out, ref) in enumerate(zip(outputs, references)):
        ref = np.asarray(ref, dtype=np.float64)
        mix = match_length(np.asarray(mixture_ref_channel, dtype=np.float64), ref.size)
        scores.append(SpeakerScore(
            speaker=c,
            input_sdr=sdr(mix, ref),
            output_sdr=sdr(match_length(np.asarray(out, dtype=np.float64), ref.size), ref),
        ))
    return SdrReport(utterance_id, system, scores)


def summarize(reports: Sequence[SdrReport], by: str = RANK_BY_IMPROVEMENT) -> List[Dict[str, object]]:
    """Per-system means plus top-k columns, one row per (system, C)."""
    groups: Dict[tuple, List[SdrReport]] = {}
    for report in reports:
        groups.setdefault((report.system, report.num_speakers), []).append(report)
    rows = []
    for (system, C), group in groups.items():
        scores = [s for r in group for s in r.scores]
        row = {
            "system": system,
            "num_speakers": C,
            "utterances": len(group),
            "mean_input_sdr": float(np.mean([s.input_sdr for s in scores])),
            "mean_output_sdr": float(np.mean([s.output_sdr for s in scores])),
            "mean_improvement": float(np.mean([s.improvement for s in scores])),
        }
        for k in range(1, C + 1):
            row[f"top{k}"] = float(np.mean([r.top_k(k, by) for r in group]))
        rows.append(row)
    return rows


def write_evaluation_csv(path: str, reports: Sequence[SdrReport], system_order: Sequence[str] = ()):
    order = {name: i for i, name in enumerate(system_order)}
    rows = sorted(reports, key=lambda r: (r.utterance_id, order.get(r.system, len(order)), r.system))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "system", "num_speakers", "speaker",
                         "input_sdr", "output_sdr", "improvement"])
        for report in rows:
            for s in report.scores:
                writer.writerow([report.utterance_id, report.system, report.num_speakers, s.speaker,
                                 f"{s.input_sdr:.4f}", f"{s.output_sdr:.4f}", f"{s.improvement:.4f}"])


def write_summary_csv(path: str, reports: Sequence[SdrReport], system_order: Sequence[str] = (),
                      by: str = RANK_BY_IMPROVEMENT):
    order = {name: i for i, name in enumerate(system_order)}
    rows = sorted(summarize(reports, by),
                  key=lambda r: (order.get(r["system"], len(order)), r["system"], r["num_speakers"]))
    max_c = max((r["num_speakers"] for r in rows), default=0)
    header = ["system", "num_speakers", "utterances", "mean_input_sdr", "mean_output_sdr",
              "mean_improvement"] + [f"top{k}" for k in range(1, max_c + 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row.get(col, "") if not isinstance(row.get(col), float) else f"{row[col]:.4f}"
                             for col in header])
