"""Experiment configuration: one JSON document plus key=value overrides.

Overrides win over the file; values are parsed as JSON when possible so
``--override train_steps=500`` yields an int and
``--override guidance.scale=0.5`` reaches into nested sections. Seeds are
always explicit and every referenced path must exist when a run starts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

__all__ = ["ExperimentConfig", "dict_hash", "parse_overrides"]

TASKS = ("nav-gen", "placement-gen", "nav-plan", "arm-plan")


def dict_hash(doc: dict) -> bytes:
    """Stable sha256 of a JSON-serializable dict."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      default=str).encode("utf-8")
    return hashlib.sha256(blob).digest()


def parse_overrides(pairs) -> dict:
    out: dict = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _deep_update(base: dict, updates: dict) -> dict:
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


@dataclass
class ExperimentConfig:
    task: str = "nav-plan"
    seed: int = 0
    out_dir: str = "runs/default"

    # model / schedule
    horizon: int = 32
    state_dim: int = 2
    timesteps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    feature_dim: int = 64
    token_count: int = 16
    n_heads: int = 2
    n_blocks: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 32
    train_steps: int = 2000

    # worlds / data
    difficulties: tuple = ("open", "cluttered", "dead-end")
    n_train_scenes: int = 40
    trajectories_per_scene: int = 30
    n_eval_scenes: int = 10
    pairs_per_scene: int = 4
    scene_files: tuple = ()
    dataset_file: str = ""
    checkpoint_file: str = ""

    # planning
    budget: int = 150
    fixed_frames: int = 15
    goal_variant: str = "sum_exp"
    collision_weight: float = 1.0
    planning_weight: float = 0.2
    guidance: dict = field(default_factory=lambda: {
        "scale": 1.0, "mode": "scheduled"})

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")

    @classmethod
    def from_file(cls, path, overrides=None) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        _deep_update(doc, parse_overrides(overrides))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for tuple_key in ("difficulties", "scene_files"):
            if tuple_key in doc:
                doc[tuple_key] = tuple(doc[tuple_key])
        return cls(**doc)

    @classmethod
    def from_overrides(cls, overrides=None) -> "ExperimentConfig":
        doc = parse_overrides(overrides)
        return cls(**doc)

    def validate_paths(self):
        """Referenced files must exist before a run starts."""
        for f in self.scene_files:
            if not Path(f).exists():
                raise FileNotFoundError(f"scene file missing: {f}")
        for attr in ("dataset_file", "checkpoint_file"):
            value = getattr(self, attr)
            if value and not Path(value).exists():
                raise FileNotFoundError(f"{attr} missing: {value}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["difficulties"] = list(self.difficulties)
        doc["scene_files"] = list(self.scene_files)
        return doc

    def config_hash(self) -> bytes:
        return dict_hash(self.to_dict())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
