"""Experiment config: a strict, flat, sectioned key-value text format.

Every key belongs to a fixed schema; unknown sections or keys are named
errors, and so are missing ones (a config file is always complete, which
keeps sweep cells self-describing). The writer emits a canonical form that
parses back to an equal config.

Syntax: `[section]` headers, `key = value` lines, `#` full-line comments,
blank lines ignored. Values are bare tokens (no quoting); `auto` means
"decide at runtime" where the schema allows it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .augment import AugmentConfig
from .ctc import DecoderConfig
from .data import SynthTaskConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _to_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}") from None


def _to_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}") from None


def _to_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ConfigError(f"expected true or false, got {s!r}")


def _to_str(s: str) -> str:
    return s


def _to_int_or_auto(s: str):
    return None if s == "auto" else _to_int(s)


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# (key, converter, default) per section; order here is the canonical order
SCHEMA: dict[str, list[tuple[str, object, object]]] = {
    "task": [
        ("vocab_size", _to_int, 28),
        ("feature_dim", _to_int, 24),
        ("min_token_frames", _to_int, 5),
        ("max_token_frames", _to_int, 9),
        ("noise_std", _to_float, 0.3),
        ("min_tokens", _to_int, 3),
        ("max_tokens", _to_int, 8),
        ("prototype_seed", _to_int, 0),
        ("silence_fraction", _to_float, 0.0),
        ("num_labeled", _to_int, 250),
        ("num_unlabeled", _to_int, 5000),
        ("num_dev", _to_int, 200),
        ("num_test", _to_int, 500),
        ("corpus_seed", _to_int, 1),
    ],
    "model": [
        ("hidden_dim", _to_int, 32),
        ("num_blocks", _to_int, 2),
        ("conv_kernel", _to_int, 7),
        ("conv_stride", _to_int, 3),
    ],
    "augment": [
        ("num_freq_masks", _to_int, 2),
        ("freq_param", _to_int, 4),
        ("num_time_masks", _to_int, 2),
        ("time_param", _to_int, 6),
        ("max_time_ratio", _to_float, 0.2),
        ("mask_value", _to_float, 0.0),
    ],
    "train": [
        ("variant", _to_str, "slimipl"),
        ("pretrain_updates", _to_int_or_auto, None),
        ("cache_size", _to_int, 100),
        ("replace_prob", _to_float, 0.1),
        ("labeled_updates_per_round", _to_int, 1),
        ("unlabeled_updates_per_round", _to_int, 1),
        ("dropout_initial", _to_float, 0.3),
        ("dropout_after_pretrain", _to_float, 0.1),
        ("learning_rate", _to_float, 0.1),
        ("batch_size", _to_int, 8),
        ("max_updates", _to_int, 20000),
        ("eval_every", _to_int, 100),
        ("seed", _to_int, 1),
        ("ema_decay", _to_float, 0.999),
        ("filter_empty_pls", _to_bool, False),
        ("plateau_patience", _to_int, 3),
        ("plateau_min_delta", _to_float, 1e-4),
        ("max_halvings", _to_int, 5),
    ],
    "decode": [
        ("beam_size", _to_int, 64),
        ("lm_weight", _to_float, 0.0),
        ("length_bonus", _to_float, 0.0),
        ("lm_order", _to_int, 2),
        ("lm_delta", _to_float, 0.1),
    ],
    "run": [
        ("output_dir", _to_str, "runs"),
        ("corpus_file", _to_str, "corpus.bin"),
    ],
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def task_config(self) -> SynthTaskConfig:
        t = self.values["task"]
        return SynthTaskConfig(
            vocab_size=t["vocab_size"],
            feature_dim=t["feature_dim"],
            min_token_frames=t["min_token_frames"],
            max_token_frames=t["max_token_frames"],
            noise_std=t["noise_std"],
            min_tokens=t["min_tokens"],
            max_tokens=t["max_tokens"],
            prototype_seed=t["prototype_seed"],
            silence_fraction=t["silence_fraction"],
        )

    def model_config(self) -> ModelConfig:
        m, t = self.values["model"], self.values["task"]
        return ModelConfig(
            feature_dim=t["feature_dim"],
            hidden_dim=m["hidden_dim"],
            num_blocks=m["num_blocks"],
            vocab_size=t["vocab_size"],
            conv_kernel=m["conv_kernel"],
            conv_stride=m["conv_stride"],
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.values["augment"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(augment=self.augment_config(), **self.values["train"])

    def decoder_config(self, lm=None) -> DecoderConfig:
        d = self.values["decode"]
        return DecoderConfig(
            beam_size=d["beam_size"],
            lm_weight=d["lm_weight"],
            length_bonus=d["length_bonus"],
            lm=lm,
        )


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        values={s: {k: d for k, _, d in keys} for s, keys in SCHEMA.items()}
    )


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    converters = {s: {k: c for k, c, _ in keys} for s, keys in SCHEMA.items()}
    values: dict[str, dict[str, object]] = {s: {} for s in SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in converters[section]:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        if key in values[section]:
            raise ConfigError(f"{where}: duplicate key {section}.{key}")
        try:
            values[section][key] = converters[section][key](val)
        except ConfigError as e:
            raise ConfigError(f"{where}: {section}.{key}: {e}") from None
    missing = [
        f"{s}.{k}" for s, keys in SCHEMA.items() for k, _, _ in keys
        if k not in values[s]
    ]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(missing)}")
    return ExperimentConfig(values=values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def write_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, _, _ in keys:
            lines.append(f"{key} = {_fmt(cfg.values[section][key])}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(write_config(cfg))


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply `section.key=value` strings on top of a parsed config."""
    converters = {s: {k: c for k, c, _ in keys} for s, keys in SCHEMA.items()}
    for item in overrides:
        head, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, dot, key = head.strip().partition(".")
        key = key.strip()
        if not dot or section not in SCHEMA or key not in converters[section]:
            raise ConfigError(f"override {item!r}: unknown key {head.strip()!r}")
        try:
            cfg.values[section][key] = converters[section][key](val.strip())
        except ConfigError as e:
            raise ConfigError(f"override {section}.{key}: {e}") from None
    return cfg
