"""Run configuration: plain-text `key = value` files with per-module sections.

Sections: [model] (architecture), [train] (optimizer, schedule, data),
[sampler] (inference defaults). Validation collects every violation before
reporting, and no command touches the filesystem until its config is valid.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .flow import SamplerConfig
from .model import ModelConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    total_steps: int = 400
    log_every: int = 10
    checkpoint_every: int = 200
    dataset: str = ""
    seed: int = 0
    buckets: list = field(default_factory=lambda: ["32x32xT16", "32x32xT8"])


_MODEL_KEYS = {
    "n_blocks": int, "dim": int, "heads": int, "patch": int, "patch_t": int,
    "factor": int, "views": int, "frames": int, "height": int, "width": int,
    "control_depth": int,
}
_TRAIN_KEYS = {
    "lr": float, "beta1": float, "beta2": float, "eps": float,
    "batch_size": int, "total_steps": int, "log_every": int,
    "checkpoint_every": int, "dataset": str, "seed": int,
}
_SAMPLER_KEYS = {
    "steps": int, "lambda_t": float, "lambda_l": float, "lambda_r": float,
    "seed": int,
}


class ConfigError(ValueError):
    def __init__(self, violations: list):
        super().__init__("invalid config:\n" + "\n".join(
            f"  - {v}" for v in violations))
        self.violations = violations


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    violations: list = []
    model_kw: dict = {}
    run = RunConfig()

    def read_section(section, keys, sink):
        if not cp.has_section(section):
            return
        for key, raw in cp.items(section):
            if key == "buckets" and section == "train":
                run.buckets = [b.strip() for b in raw.split(",") if b.strip()]
                continue
            if key not in keys:
                violations.append(f"[{section}] unknown key {key!r}")
                continue
            try:
                sink[key] = keys[key](raw)
            except ValueError:
                violations.append(f"[{section}] {key} = {raw!r} is not "
                                  f"a valid {keys[key].__name__}")

    train_kw: dict = {}
    sampler_kw: dict = {}
    read_section("model", _MODEL_KEYS, model_kw)
    read_section("train", _TRAIN_KEYS, train_kw)
    read_section("sampler", _SAMPLER_KEYS, sampler_kw)
    try:
        run.model = ModelConfig(**model_kw)
    except ValueError as e:
        violations.append(f"[model] {e}")
    try:
        run.sampler = SamplerConfig(**sampler_kw)
    except ValueError as e:
        violations.append(f"[sampler] {e}")
    for k, v in train_kw.items():
        setattr(run, k, v)
    if run.batch_size < 1:
        violations.append("[train] batch_size must be >= 1")
    if run.total_steps < 0:
        violations.append("[train] total_steps must be >= 0")
    if not run.buckets:
        violations.append("[train] buckets must be non-empty")
    if violations:
        raise ConfigError(violations)
    return run


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    return parse_config(path.read_text(encoding="utf-8"))


def config_text(run: RunConfig) -> str:
    """Canonical serialization, diffable and round-trippable."""
    cp = configparser.ConfigParser()
    m = run.model
    cp["model"] = {k: str(getattr(m, k)) for k in _MODEL_KEYS}
    cp["train"] = {k: str(getattr(run, k)) for k in _TRAIN_KEYS}
    cp["train"]["buckets"] = ", ".join(run.buckets)
    s = run.sampler
    cp["sampler"] = {k: str(getattr(s, k)) for k in _SAMPLER_KEYS}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def model_section_matches(text_a: str, text_b: str) -> bool:
    """True when two config snapshots describe the same architecture."""
    def model_items(text):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return dict(cp.items("model")) if cp.has_section("model") else {}
    return model_items(text_a) == model_items(text_b)
