"""Resolved run configuration: profile defaults + config file + CLI flags.

Every artifact the pipelines emit embeds the fully resolved configuration
and seed, so runs can be reproduced from their outputs alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .encoder import EncoderConfig
from .errors import ConfigError
from .evaluate import EvalOptions
from .pretrain import TrainConfig
from .sequences import AblationFlags

PROFILES = {
    # Laptop-sized runs: small hidden size, short schedules, fast learning rate.
    "desk": {
        "encoder": {"hidden": 48, "layers": 2, "heads": 4},
        "train": {"steps": 1000, "batch_size": 8, "lr": 1e-3},
    },
    # The original full-scale recipe (not runnable on a workstation).
    "paper": {
        "encoder": {"hidden": 768, "layers": 12, "heads": 12},
        "train": {"steps": 50_000, "batch_size": 12, "lr": 2e-5},
    },
}


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "desk"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> dict:
        flags = self.train.ablations
        return {
            "seed": self.seed,
            "profile": self.profile,
            "encoder": self.encoder.to_dict(),
            "train": {
                "steps": self.train.steps,
                "batch_size": self.train.batch_size,
                "lr": self.train.lr,
                "mlm_rate": self.train.mlm_rate,
                "clc_cells_per_seq": self.train.clc_cells_per_seq,
                "clc_candidates": self.train.clc_candidates,
                "clc_weight": self.train.clc_weight,
                "max_grad_norm": self.train.max_grad_norm,
                "ablations": {
                    "no_visibility": flags.no_visibility,
                    "no_type": flags.no_type,
                    "no_units_nesting": flags.no_units_nesting,
                    "no_bicoords": flags.no_bicoords,
                },
            },
            "eval": {
                "k": self.eval.k,
                "lsh_planes": self.eval.lsh_planes,
                "lsh_bands": self.eval.lsh_bands,
                "lsh_rows": self.eval.lsh_rows,
                "use_lsh": self.eval.use_lsh,
                "tc_recipe": self.eval.tc_recipe,
                "tc_mode": self.eval.tc_mode,
            },
        }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(
    config_path: Optional[str] = None,
    profile: str = "desk",
    seed: Optional[int] = None,
    overrides: Optional[dict] = None,
) -> RunConfig:
    """Layering order: profile defaults < config file < explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = dict(PROFILES[profile])
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        merged = _merge(merged, file_cfg)
    if overrides:
        merged = _merge(merged, {k: v for k, v in overrides.items() if v is not None})

    enc_kwargs = dict(merged.get("encoder", {}))
    train_kwargs = dict(merged.get("train", {}))
    eval_kwargs = dict(merged.get("eval", {}))
    flags = train_kwargs.pop("ablations", None)
    if isinstance(flags, dict):
        train_kwargs["ablations"] = AblationFlags(**flags)
    cfg = RunConfig(
        seed=merged.get("seed", 0) if seed is None else seed,
        profile=profile,
        encoder=EncoderConfig(**enc_kwargs),
        train=TrainConfig(**train_kwargs),
        eval=EvalOptions(**eval_kwargs),
    )
    cfg.train = replace(cfg.train, seed=cfg.seed)
    cfg.eval.seed = cfg.seed
    return cfg
