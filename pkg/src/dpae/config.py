"""Experiment configuration: scale presets, JSON config files, flag merging.

Two scales are built in. `paper` is the full-size stack (200 x 38 matrices,
128-d latent, 1000 epochs, 356 events). `desk` is a reduced profile with
every structural mechanism intact, sized to run the whole pipeline on one
CPU core in minutes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .interpret import DEFAULT_SIZE_BAND
from .model import DESK_PROFILE, PAPER_PROFILE

SCALE_PRESETS = {
    "paper": {"count": 356, "epochs": 1000},
    "desk": {"count": 64, "epochs": 150},
}


@dataclass
class ExperimentConfig:
    scale: str = "desk"
    seed: int = 0
    count: int | None = None
    epochs: int | None = None
    snr_db: float = 30.0
    ratio_pad: float = 0.2
    size_band: tuple = DEFAULT_SIZE_BAND
    train: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)
    shap: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale not in SCALE_PRESETS:
            raise ValueError(f"unknown scale {self.scale!r}")
        preset = SCALE_PRESETS[self.scale]
        if self.count is None:
            self.count = preset["count"]
        if self.epochs is None:
            self.epochs = preset["epochs"]
        self.size_band = (float(self.size_band[0]), float(self.size_band[1]))
        if not (self.size_band[0] <= self.size_band[1]):
            raise ValueError("size band lower bound exceeds upper bound")

    def profile(self):
        return PAPER_PROFILE if self.scale == "paper" else DESK_PROFILE

    def as_dict(self):
        return {
            "scale": self.scale,
            "seed": self.seed,
            "count": self.count,
            "epochs": self.epochs,
            "snr_db": self.snr_db,
            "ratio_pad": self.ratio_pad,
            "size_band": list(self.size_band),
            "train": dict(self.train),
            "heads": dict(self.heads),
            "shap": dict(self.shap),
        }


def load_config_file(path):
    """Read a JSON config file; unknown keys are rejected."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must contain a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return doc


def resolve_config(config_path=None, **overrides):
    """Defaults, then config-file values, then explicit (non-None) flags."""
    merged = {} if config_path is None else dict(load_config_file(config_path))
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return ExperimentConfig(**merged)
