"""Run configuration: one table of options shared by flags, config files and presets.

Config files are flat ``key = value`` lines whose keys are the long flag names
without dashes prefix (``group-size = 5``). ``#`` starts a comment. Resolution
order is defaults, then preset, then config file, then explicit flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .dataset import SyntheticWorldConfig
from .optimizer import GrpoConfig
from .protocol import ProtocolConfig

SEED_ENV = "RAR_FORGE_SEED"


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in str(text).split(",") if part.strip())


@dataclass(frozen=True)
class Option:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    flag: bool = False  # store_true switch


SYNTHETIC_KEYS = ("users", "attributes-per-user", "distractors", "aspects", "world-seed")

OPTIONS: tuple[Option, ...] = (
    Option("data", str, None, "JSONL dataset (mutually exclusive with synthetic-world options)"),
    Option("users", int, 50, "synthetic world: number of users"),
    Option("attributes-per-user", int, 4, "synthetic world: latent attributes per user"),
    Option("distractors", int, 3, "synthetic world: distractor documents per profile"),
    Option("aspects", int, 2, "synthetic world: rubric aspects per question"),
    Option("world-seed", int, 0, "synthetic world: generator seed"),
    Option("steps", int, 200, "training steps"),
    Option("group-size", int, 5, "personalized rollouts per instance"),
    Option("topk", int, 3, "documents retrieved per search"),
    Option("topk-sweep", _int_list, None, "comma-separated top-k values, one full run each"),
    Option("beta", float, 0.001, "KL coefficient"),
    Option("epsilon", float, 0.2, "clipping range"),
    Option("lr", float, GrpoConfig.learning_rate, "peak learning rate"),
    Option("warmup-ratio", float, 0.285, "fraction of steps with linear warmup"),
    Option("temperature", float, 1.0, "sampling temperature"),
    Option("max-steps", int, 2048, "step budget per rollout"),
    Option("max-search-turns", int, 4, "search turns per rollout"),
    Option("batch-size", int, 1, "instances per update"),
    Option("update-epochs", int, 1, "gradient passes over each batch"),
    Option("no-baseline", _bool, False, "drop the non-personalized baseline from the advantage", flag=True),
    Option("no-baseline-rollout", _bool, False, "do not sample the baseline rollout at all", flag=True),
    Option("judge", str, "synthetic", "'synthetic' or the base URL of an external judge"),
    Option("eval-every", int, 0, "evaluate every N steps (0 disables)"),
    Option("workers", int, 1, "rollout threads"),
    Option("embed-dim", int, 256, "hashed embedder dimension"),
    Option("seed", int, None, f"run seed (falls back to ${SEED_ENV}, then 0)"),
)
OPTION_BY_NAME = {o.name: o for o in OPTIONS}


class ConfigError(ValueError):
    pass


def read_config_file(path: str | Path) -> dict[str, Any]:
    values: dict[str, Any] = {}
    with open(path, encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_number}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            option = OPTION_BY_NAME.get(key)
            if option is None:
                raise ConfigError(f"{path}:{line_number}: unknown key {key!r}")
            try:
                values[key] = option.parse(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_number}: {exc}") from None
    return values


def preset_path(name: str) -> Path:
    resource = resources.files("rar_forge") / "presets" / f"{name}.conf"
    if not resource.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return Path(str(resource))


def resolve(flags: dict[str, Any], config_file: str | None = None, preset: str | None = None) -> dict[str, Any]:
    """Merge defaults, preset, file and flags (``None`` flag values mean 'not given')."""
    values = {o.name: o.default for o in OPTIONS}
    if preset:
        values.update(read_config_file(preset_path(preset)))
    if config_file:
        values.update(read_config_file(config_file))
    for key, value in flags.items():
        if value is not None and key in OPTION_BY_NAME:
            values[key] = value
    if values["seed"] is None:
        env_seed = os.environ.get(SEED_ENV)
        values["seed"] = int(env_seed) if env_seed else 0
    return values


def format_resolved(values: dict[str, Any]) -> str:
    lines = []
    for option in OPTIONS:
        value = values.get(option.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{option.name} = {value}")
    return "\n".join(lines) + "\n"


def grpo_config(values: dict[str, Any], top_k: int | None = None) -> GrpoConfig:
    return GrpoConfig(
        group_size=values["group-size"],
        beta=values["beta"],
        epsilon=values["epsilon"],
        learning_rate=values["lr"],
        warmup_ratio=values["warmup-ratio"],
        total_steps=values["steps"],
        top_k=values["topk"] if top_k is None else top_k,
        temperature=values["temperature"],
        use_baseline=not values["no-baseline"],
        sample_baseline=not values["no-baseline-rollout"],
        batch_size=values["batch-size"],
        update_epochs=values["update-epochs"],
    )


def protocol_config(values: dict[str, Any]) -> ProtocolConfig:
    return ProtocolConfig(max_steps=values["max-steps"], max_search_turns=values["max-search-turns"])


def world_config(values: dict[str, Any]) -> SyntheticWorldConfig:
    return SyntheticWorldConfig(
        num_users=values["users"],
        attributes_per_user=values["attributes-per-user"],
        distractor_docs_per_user=values["distractors"],
        aspects_per_question=values["aspects"],
        seed=values["world-seed"],
    )
