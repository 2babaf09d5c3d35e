"""Analytical distributed-training planner.

Pipeline-parallel layer partitioning, optimizer-state-sharded (stage-1)
per-rank memory accounting under the standard mixed-precision Adam layout
(2-byte weights and gradients, 12 bytes of fp32 master weight + two moments
per parameter), and the two named training presets. Purely arithmetic: no
pipeline-bubble or communication simulation.
"""

from dataclasses import dataclass

from .model import ModelConfig
from .numerics import Schedule

WEIGHT_BYTES = 2
GRAD_BYTES = 2
OPTIM_BYTES = 12  # fp32 master copy + first and second Adam moments


def pipeline_partition(layers: int, stages: int) -> list[int]:
    """Balanced contiguous layer split: the first (layers mod stages) stages
    take the ceiling share, the rest the floor; max - min <= 1."""
    if stages < 1:
        raise ValueError("pipeline_partition: stages must be >= 1")
    if stages > layers:
        raise ValueError(f"pipeline_partition: stages ({stages}) > layers ({layers})")
    base, rem = divmod(layers, stages)
    return [base + 1] * rem + [base] * (stages - rem)


@dataclass(frozen=True)
class ParallelPlan:
    stage_layers: tuple
    dp_ranks: int

    def __post_init__(self):
        if any(n < 1 for n in self.stage_layers):
            raise ValueError("ParallelPlan: every stage needs at least one layer")
        if self.dp_ranks < 1:
            raise ValueError("ParallelPlan: dp_ranks must be >= 1")


@dataclass(frozen=True)
class MemoryEstimate:
    """Per-rank bytes under optimizer-state sharding only."""

    param_count: int
    dp_ranks: int
    weights_bytes: int
    grads_bytes: int
    optimizer_shard_bytes: float

    @property
    def total_bytes(self) -> float:
        return self.weights_bytes + self.grads_bytes + self.optimizer_shard_bytes

    @property
    def total_gb(self) -> float:
        return self.total_bytes / 1e9

    def as_dict(self) -> dict:
        return {
            "param_count": self.param_count,
            "dp_ranks": self.dp_ranks,
            "weights_bytes": self.weights_bytes,
            "grads_bytes": self.grads_bytes,
            "optimizer_shard_bytes": self.optimizer_shard_bytes,
            "total_bytes": self.total_bytes,
            "total_gb": self.total_gb,
        }


def zero1_memory(param_count: int, dp_ranks: int) -> MemoryEstimate:
    """Per-rank memory when only optimizer states are sharded: weights and
    gradients stay replicated (2P each), the 12P of optimizer state divides
    evenly across the data-parallel ranks."""
    if param_count < 1:
        raise ValueError("zero1_memory: param_count must be >= 1")
    if dp_ranks < 1:
        raise ValueError("zero1_memory: dp_ranks must be >= 1")
    return MemoryEstimate(
        param_count=param_count,
        dp_ranks=dp_ranks,
        weights_bytes=WEIGHT_BYTES * param_count,
        grads_bytes=GRAD_BYTES * param_count,
        optimizer_shard_bytes=OPTIM_BYTES * param_count / dp_ranks,
    )


@dataclass(frozen=True)
class Preset:
    name: str
    phase: str
    model: ModelConfig
    schedule: Schedule
    global_batch: int
    total_tokens: int
    betas: tuple
    weight_decay: float
    grad_clip: float


_VOCAB = 250_680
_EMBED_ROWS = 250_880  # vocabulary padded to the allocation granularity
_SEQ_LEN = 2048

_ARCH = {
    "xuanyuan2-7b": dict(layers=30, hidden_dim=4096, attention_heads=32),
    "xuanyuan2-176b": dict(layers=70, hidden_dim=14336, attention_heads=112),
}

_PRETRAIN = {
    "xuanyuan2-7b": dict(global_batch=512, peak_lr=1.2e-4, min_lr=1e-5, total_tokens=341_000_000_000),
    "xuanyuan2-176b": dict(global_batch=2048, peak_lr=6e-5, min_lr=6e-6, total_tokens=366_000_000_000),
}

_WARMUP_TOKENS = 375_000_000
_DECAY_TOKENS = 410_000_000_000
_BETAS = (0.9, 0.95)

_FINETUNE = dict(
    global_batch=2048, lr=2.0e-5, total_tokens=13_000_000_000,
    warmup_tokens=0, weight_decay=1e-4,
)

PRESET_NAMES = tuple(sorted(_ARCH))
PHASES = ("pretrain", "finetune")


def load_preset(name: str, phase: str = "pretrain") -> Preset:
    """Named architecture + schedule bundle for one training phase."""
    if name not in _ARCH:
        raise ValueError(
            f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}"
        )
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; valid phases: {', '.join(PHASES)}")
    model = ModelConfig(
        vocab_size=_VOCAB, embedding_rows=_EMBED_ROWS, seq_len=_SEQ_LEN,
        tied_embeddings=True, **_ARCH[name],
    )
    if phase == "pretrain":
        p = _PRETRAIN[name]
        schedule = Schedule(
            peak_lr=p["peak_lr"], min_lr=p["min_lr"],
            warmup_tokens=_WARMUP_TOKENS, decay_tokens=_DECAY_TOKENS,
            style="cosine",
        )
        return Preset(
            name=name, phase=phase, model=model, schedule=schedule,
            global_batch=p["global_batch"], total_tokens=p["total_tokens"],
            betas=_BETAS, weight_decay=1e-1, grad_clip=1.0,
        )
    schedule = Schedule(
        peak_lr=_FINETUNE["lr"], min_lr=_FINETUNE["lr"],
        warmup_tokens=_FINETUNE["warmup_tokens"],
        decay_tokens=_FINETUNE["total_tokens"], style="constant",
    )
    return Preset(
        name=name, phase=phase, model=model, schedule=schedule,
        global_batch=_FINETUNE["global_batch"], total_tokens=_FINETUNE["total_tokens"],
        betas=_BETAS, weight_decay=_FINETUNE["weight_decay"], grad_clip=1.0,
    )
