"""Candidate ranking: R = w * phi + (1 - w) * rho, plus top-k selection.

phi is the candidate's energy saving relative to the baseline model, clamped
to [0, 1] (the baseline scores 0). rho is the mean of the six bounded quality
metrics; throughput is reported alongside but never averaged in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .meter import EnergyReport
from .metrics import MetricScores


class RankError(Exception):
    pass


@dataclass
class RankingWeights:
    w: float = 0.7
    k: int = 1

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise RankError(f"w must be in [0, 1], got {self.w}")
        if self.k < 1:
            raise RankError(f"k must be >= 1, got {self.k}")


@dataclass
class CandidateRecord:
    id: str
    lineage: dict
    scores: MetricScores | None = None
    energy: EnergyReport | None = None
    phi: float = 0.0
    rho: float = 0.0
    r_score: float = 0.0
    baseline: bool = False
    stage: str = "finetune"  # "finetune" | "prune"
    status: str = "ok"  # "ok" | "failed"
    error: str | None = None
    train_records: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "lineage": self.lineage,
            "scores": self.scores.to_dict() if self.scores else None,
            "energy": self.energy.to_dict() if self.energy else None,
            "phi": self.phi,
            "rho": self.rho,
            "R": self.r_score,
            "baseline": self.baseline,
            "stage": self.stage,
            "status": self.status,
            "error": self.error,
            "train_records": [
                {
                    "epoch": tr.epoch,
                    "loss": tr.loss,
                    "energy": tr.energy.to_dict() if tr.energy else None,
                }
                for tr in self.train_records
            ],
            "extra": self.extra,
        }


def performance_score(scores: MetricScores) -> float:
    vals = scores.quality_values()
    return sum(vals) / len(vals)


def efficiency_score(e_candidate: EnergyReport, e_base: EnergyReport) -> float:
    if e_base.total_joules <= 0:
        raise RankError("baseline energy must be positive")
    phi = 1.0 - e_candidate.total_joules / e_base.total_joules
    return min(max(phi, 0.0), 1.0)


def rank_score(phi: float, rho: float, w: float) -> float:
    if not 0.0 <= w <= 1.0:
        raise RankError(f"w must be in [0, 1], got {w}")
    return w * phi + (1.0 - w) * rho


def select_top_k(collection: list[CandidateRecord], weights: RankingWeights) -> list[CandidateRecord]:
    """Descending by R; ties broken by lower total joules, then id."""
    if not collection:
        raise RankError("empty candidate collection")

    def key(rec: CandidateRecord):
        joules = rec.energy.total_joules if rec.energy else float("inf")
        return (-rec.r_score, joules, rec.id)

    return sorted(collection, key=key)[: weights.k]
