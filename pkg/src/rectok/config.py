"""Run configuration: flat key-value files, environment overrides, config hash.

Config files hold one ``key = value`` pair per line (``#`` comments).
Environment variables named ``RECTOK_<KEY>`` override file values, and
explicit ``--set key=value`` pairs override both.  The config hash stamps
every output artifact so later stages can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "RECTOK_"


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"

    # dataset: "synthetic" or a path to a dataset directory
    dataset: str = "synthetic"
    n_users: int = 500
    n_items: int = 100
    n_clusters: int = 10
    seq_len_min: int = 6
    seq_len_max: int = 12

    # identifier initializer: cid | rqvae | rqvae+letter
    initializer: str = "cid"
    embed_dim: int = 16

    rq_levels: int = 3
    rq_codebook: int = 8
    rq_latent: int = 8
    rq_hidden: int = 32
    rq_epochs: int = 300
    rq_batch: int = 64
    rq_lr: float = 1e-3
    rq_cf_weight: float = 0.1
    rq_div_weight: float = 0.1
    rq_div_clusters: int = 4
    rq_temperature: float = 1.0

    cid_branching: int = 8
    cid_threshold: int = 8
    cid_depth_cap: int = 8

    model_dim: int = 64
    model_layers: int = 2
    model_heads: int = 4
    model_context: int = 128

    warmup_epochs: int = 40
    iter_epochs: int = 20
    align_epochs: int = 60
    align_mix: str = "both"
    train_lr: float = 1e-3
    train_batch: int = 64

    iterations: int = 1
    beam_k: int = 20
    beam_width: int = 0  # candidate-generation width; 0 -> beam_k
    candidate_order: str = "perplexity"
    infer_width: int = 10
    eval_ks: str = "5,10"

    def ks(self) -> tuple[int, ...]:
        return tuple(int(part) for part in self.eval_ks.split(","))

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.initializer not in ("cid", "rqvae", "rqvae+letter"):
            raise ValueError(f"unknown initializer {self.initializer!r}")
        if self.dataset != "synthetic" and not Path(self.dataset).exists():
            raise ValueError(f"dataset path does not exist: {self.dataset}")
        self.ks()

    def config_hash(self) -> str:
        """Stable 12-hex digest of every experiment-relevant key (out_dir excluded)."""
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "out_dir":
                continue
            parts.append(f"{f.name}={getattr(self, f.name)}")
        digest = hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()
        return digest[:12]

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value for {name}: {raw!r}") from None


def parse_config_file(path: str | Path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def build_config(
    config_file: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    use_env: bool = True,
) -> RunConfig:
    """Assemble a RunConfig: defaults < file < environment < overrides."""
    config = RunConfig()
    by_name = {f.name: f for f in fields(RunConfig)}

    def apply(source: dict[str, str], origin: str) -> None:
        for key, raw in source.items():
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r} ({origin})")
            setattr(config, key, _coerce(key, raw, type(getattr(config, key))))

    if config_file is not None:
        apply(parse_config_file(config_file), f"file {config_file}")
    if use_env:
        env_pairs = {}
        for f in fields(RunConfig):
            value = os.environ.get(ENV_PREFIX + f.name.upper())
            if value is not None:
                env_pairs[f.name] = value
        apply(env_pairs, "environment")
    if overrides:
        apply(overrides, "--set")
    config.validate()
    return config
