"""Typed key-value run configuration files.

One `Key: value` pair per line, `#` comments allowed. Keys mirror the
training-hyperparameter table row names ("Layers", "Hidden dim.",
"Learning rate", "Warmup tokens", ...) so a published hyperparameter table
maps one-to-one onto a config file. Token counts accept K/M/B suffixes
(341B == 341e9). All validation failures are collected and reported together
with field-level messages.
"""

import re
from dataclasses import dataclass

from .corpus import LOSS_POLICIES
from .model import ModelConfig
from .numerics import Schedule


class ConfigError(ValueError):
    """Raised with one message line per offending field."""


def _parse_tokens(text: str) -> int:
    m = re.fullmatch(r"\s*([0-9]+(?:\.[0-9]+)?)\s*([kKmMbB]?)\s*", text)
    if not m:
        raise ValueError(f"not a token count: {text!r}")
    value = float(m.group(1))
    scale = {"": 1, "k": 10**3, "m": 10**6, "b": 10**9}[m.group(2).lower()]
    result = value * scale
    if result != int(result):
        raise ValueError(f"token count must be an integer: {text!r}")
    return int(result)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_pair(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers: {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_int_list(text: str) -> list[int]:
    return [int(p.strip()) for p in text.split(",") if p.strip()]


_PARSERS = {
    "int": int,
    "float": float,
    "str": str.strip,
    "bool": _parse_bool,
    "tokens": _parse_tokens,
    "pair": _parse_pair,
    "int_list": _parse_int_list,
}


@dataclass(frozen=True)
class Field:
    key: str
    kind: str
    required: bool = False
    default: object = None
    choices: tuple = ()


MODEL_FIELDS = (
    Field("Layers", "int", required=True),
    Field("Hidden dim.", "int", required=True),
    Field("Attention heads", "int", required=True),
    Field("Vocab size", "int", required=True),
    Field("Embedding rows", "int", default=0),
    Field("Sequence length", "int", required=True),
    Field("Tied emb.", "bool", default=True),
)

SCHEDULE_FIELDS = (
    Field("Learning rate", "float", required=True),
    Field("Min. learning rate", "float"),
    Field("Warmup tokens", "tokens", default=0),
    Field("Decay tokens", "tokens", default=0),
    Field("Decay style", "str", default="cosine", choices=("cosine", "constant")),
)

OPTIMIZER_FIELDS = (
    Field("Adam betas", "pair", default=(0.9, 0.95)),
    Field("Adam eps", "float", default=1e-8),
    Field("Weight decay", "float", default=0.0),
    Field("Gradient clipping", "float", default=1.0),
)

TRAIN_FIELDS = MODEL_FIELDS + SCHEDULE_FIELDS + OPTIMIZER_FIELDS + (
    Field("Global Batch Size", "int", required=True),
    Field("Total tokens", "tokens", required=True),
    Field("Seed", "int", default=0),
    Field("Loss policy", "str", default="full", choices=LOSS_POLICIES),
    Field("Corpus dir", "str", required=True),
)

COMPARE_FIELDS = MODEL_FIELDS + OPTIMIZER_FIELDS + (
    Field("Global Batch Size", "int", required=True),
    Field("Total tokens", "tokens", required=True),
    Field("Learning rate", "float", required=True),
    Field("Stage 2 learning rate", "float"),
    Field("Stage split", "float", default=0.5),
    Field("Seeds", "int_list", required=True),
    Field("Loss policy", "str", default="full", choices=LOSS_POLICIES),
    Field("Corpus dir", "str", required=True),
    Field("Eval dir", "str", required=True),
)


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """Split config text into raw key/value pairs, tracking line numbers."""
    pairs: dict[str, str] = {}
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if ":" not in line:
            errors.append(f"{source}:{lineno}: expected 'Key: value', got {line.strip()!r}")
            continue
        key, value = line.split(":", 1)
        key = key.strip()
        if key in pairs:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        pairs[key] = value.strip()
    if errors:
        raise ConfigError("\n".join(errors))
    return pairs


def resolve(pairs: dict[str, str], fields, source: str = "<config>") -> dict:
    """Validate raw pairs against a field schema; unknown keys are errors."""
    known = {f.key: f for f in fields}
    errors = []
    out: dict = {}
    for key in pairs:
        if key not in known:
            errors.append(f"{source}: unknown key {key!r}")
    for f in fields:
        if f.key not in pairs:
            if f.required:
                errors.append(f"{source}: missing required key {f.key!r}")
            else:
                out[f.key] = f.default
            continue
        try:
            value = _PARSERS[f.kind](pairs[f.key])
            if f.choices and value not in f.choices:
                raise ValueError(f"must be one of {', '.join(map(str, f.choices))}")
            out[f.key] = value
        except ValueError as exc:
            errors.append(f"{source}: key {f.key!r}: {exc}")
    if errors:
        raise ConfigError("\n".join(errors))
    return out


def load_config(path, fields) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    pairs = parse_pairs(text, source=str(path))
    return resolve(pairs, fields, source=str(path))


def model_config_from(values: dict) -> ModelConfig:
    return ModelConfig(
        layers=values["Layers"],
        hidden_dim=values["Hidden dim."],
        attention_heads=values["Attention heads"],
        vocab_size=values["Vocab size"],
        embedding_rows=values["Embedding rows"],
        seq_len=values["Sequence length"],
        tied_embeddings=values["Tied emb."],
    )


def schedule_from(values: dict, total_tokens: int) -> Schedule:
    style = values["Decay style"]
    peak = values["Learning rate"]
    min_lr = values.get("Min. learning rate") or (peak / 10 if style == "cosine" else peak)
    decay = values["Decay tokens"] or total_tokens
    return Schedule(
        peak_lr=peak, min_lr=min_lr,
        warmup_tokens=values["Warmup tokens"], decay_tokens=decay,
        style=style,
    )
