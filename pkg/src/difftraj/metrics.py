"""Evaluation metrics: sample diversity, physical feasibility of
placements, and planning aggregates, plus the serializable report.

All rates are percentages in [0, 100]. Every number here is recomputable
from stored samples or episode traces; the report carries the config
hash so a reviewer can tie numbers back to the run that produced them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .objectives import contact_distance
from .worlds import FootprintSpec, footprint_vertices

__all__ = ["apd_std", "feasibility_metrics", "planning_metrics",
           "MetricsReport", "CONTACT_THRESHOLD"]

CONTACT_THRESHOLD = 0.02


def apd_std(samples) -> tuple[float, float]:
    """Average pairwise L2 distance and mean per-coordinate deviation.

    Samples are flattened row-major; the average runs over unordered
    pairs and the deviation is the population standard deviation averaged
    across coordinates.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim < 2 or len(arr) < 2:
        raise ValueError("need at least two equal-shape samples")
    flat = arr.reshape(len(arr), -1)
    n = len(flat)
    # deliberately the literal double loop: the definition doubles as its
    # own oracle, so any reimplementation must match bit-exactly
    total = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            total += float(np.sqrt(((flat[i] - flat[j]) ** 2).sum()))
    apd = total / (n * (n - 1) / 2)
    acc = 0.0
    for k in range(flat.shape[1]):
        acc += float(np.std(flat[:, k]))
    return apd, acc / flat.shape[1]


def feasibility_metrics(poses, scene, spec: FootprintSpec | None = None,
                        contact_threshold: float = CONTACT_THRESHOLD) -> dict:
    """Placement quality: non-collision, contact, and joint feasibility.

    Non-collision is the percentage of body vertices with non-negative
    field value, averaged over samples; contact is the percentage of
    samples whose exact minimum contact distance is at or below the
    threshold; feasibility requires zero penetration and contact at once.
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or len(poses) == 0:
        raise ValueError("poses must be a non-empty (n, 3) array")
    spec = spec or FootprintSpec()
    non_collision = []
    contact = []
    feasible = []
    for pose in poses:
        verts, _ = footprint_vertices(pose, spec)
        vals = scene.clearance(verts)
        frac_clear = float((vals >= 0.0).mean())
        in_contact = contact_distance(pose, spec, scene.points) <= contact_threshold
        non_collision.append(frac_clear)
        contact.append(in_contact)
        feasible.append(frac_clear == 1.0 and in_contact)
    return {
        "non_collision": 100.0 * float(np.mean(non_collision)),
        "contact": 100.0 * float(np.mean(contact)),
        "feasibility": 100.0 * float(np.mean(feasible)),
        "n_samples": len(poses),
    }


def planning_metrics(episodes) -> dict:
    """Success rate and mean steps; failures already carry the budget."""
    if not episodes:
        raise ValueError("no episodes to score")
    succ = [e.outcome == "success" for e in episodes]
    steps = [e.steps for e in episodes]
    return {
        "success_rate": 100.0 * float(np.mean(succ)),
        "mean_steps": float(np.mean(steps)),
        "n_episodes": len(episodes),
    }


@dataclass
class MetricsReport:
    """Aggregated results for one suite run."""

    task: str
    config_hash: str
    planners: dict = field(default_factory=dict)   # name -> planning metrics
    generation: dict = field(default_factory=dict)  # apd/std/feasibility etc.

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(task=doc["task"], config_hash=doc["config_hash"],
                   planners=doc.get("planners", {}),
                   generation=doc.get("generation", {}))
