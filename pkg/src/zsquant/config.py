"""Pipeline configuration: one dataclass is the single source of defaults.

A JSON config file may set any field; a command-line flag of the same name
(underscores become dashes) overrides it.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .allocator import GroupedSearchParams
from .distill import DistillConfig
from .quantizer import FULL

MB_BITS = 8 * 2 ** 20


@dataclass
class PipelineConfig:
    model_path: Optional[str] = None
    compare_model_path: Optional[str] = None
    output_dir: str = "out"
    dataset_dir: Optional[str] = None
    eval_dataset_dir: Optional[str] = None
    distilled_path: Optional[str] = None
    sensitivity_path: Optional[str] = None
    assignment_path: Optional[str] = None
    # distillation
    batch_size: int = 32
    iterations: int = 500
    learning_rate: float = 1.0
    momentum: float = 0.9
    include_input_term: bool = True
    epsilon_std: float = 1e-8
    seed: int = 0
    # sensitivity / quantization
    data_source: str = "distilled"
    bit_options: list = field(default_factory=lambda: [2, 4, 8])
    weight_bits: Optional[int] = None
    activation_bits: int = 8
    clip: str = "minmax"
    gamma: float = 0.001
    # allocation
    target_mb: Optional[float] = None
    target_avg_bits: Optional[float] = None
    num_points: int = 50
    pin_edges: bool = False
    grouped: bool = False
    group_size: int = 5
    keep_wide: int = 10
    keep_narrow: int = 5
    num_size_intervals: int = 200
    random_draws: int = 5
    # fixtures
    fixture: str = "tiny3"
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)

    def validate(self):
        if self.data_source not in ("distilled", "gaussian", "dataset"):
            raise ValueError(f"data_source must be distilled, gaussian or dataset, "
                             f"got {self.data_source!r}")
        if self.clip not in ("minmax", "percentile"):
            raise ValueError(f"clip must be minmax or percentile, got {self.clip!r}")
        if self.target_mb is not None and self.target_avg_bits is not None:
            raise ValueError("give exactly one of target_mb and target_avg_bits")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.distill_config()
        self.grouped_params()
        return self

    def distill_config(self):
        return DistillConfig(self.batch_size, self.iterations, self.learning_rate,
                             self.momentum, self.seed, self.include_input_term,
                             self.epsilon_std)

    def grouped_params(self):
        return GroupedSearchParams(self.group_size, self.keep_wide, self.keep_narrow,
                                   self.num_size_intervals)

    def target_bits(self, param_counts):
        """Weight-size budget in bits; average ``w`` bits means ``w * sum(P_i)``."""
        total = sum(param_counts)
        if self.target_mb is not None:
            return int(self.target_mb * MB_BITS)
        if self.target_avg_bits is not None:
            return int(round(self.target_avg_bits * total))
        raise ValueError("a size target is required: set target_mb or target_avg_bits")

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        payload = {k: v for k, v in self.to_dict().items() if k != "threads"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f for f in fields(PipelineConfig)}


def load_config_file(path):
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(data) - set(FIELD_TYPES)
    if unknown:
        raise ValueError(f"{path}: unknown config fields {sorted(unknown)}")
    return data


def build_config(file_values=None, overrides=None):
    cfg = PipelineConfig()
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if v is not None:
                setattr(cfg, k, v)
    cfg.bit_options = sorted(int(k) for k in cfg.bit_options)
    if any(k != FULL and k < 2 for k in cfg.bit_options):
        raise ValueError("bit options must be >= 2")
    return cfg.validate()
