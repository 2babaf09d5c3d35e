"""Token-budget training loop and the catastrophic-forgetting experiment.

One optimizer step is a sequential transaction: mean masked cross-entropy
over a packed batch, global-norm clipping at the configured threshold, then
one Adam step at the schedule rate for the tokens seen so far (inclusive of
the current batch). Everything is a pure function of (corpus, seeds, config),
so identical seeds give bit-identical checkpoints and an interrupted run
resumed from its checkpoint matches the uninterrupted one exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import DOMAINS, MixturePlan, PackedBatch, hybrid_shuffle, pack
from .model import ModelConfig, init_params, masked_loss_and_grads, masked_loss_sum
from .numerics import (
    ADAM_EPS_DEFAULT,
    OptimizerState,
    Schedule,
    adam_step,
    clip_grad_norm,
    lr_at,
)


@dataclass(frozen=True)
class TrainRunConfig:
    model: ModelConfig
    schedule: Schedule
    batch_size: int          # sequences per optimizer step
    token_budget: int        # scored (masked-in target) tokens to consume
    seed: int = 0
    loss_policy: str = "full"
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    adam_eps: float = ADAM_EPS_DEFAULT
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.token_budget <= 0:
            raise ValueError("TrainRunConfig: token_budget must be > 0")
        if self.batch_size < 1:
            raise ValueError("TrainRunConfig: batch_size must be >= 1")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    opt_state: OptimizerState
    trajectory: list[dict]
    tokens_seen: int
    steps: int
    epoch: int          # cursor: epoch of the next unconsumed batch
    batch_index: int    # cursor: index of the next unconsumed batch
    finished: bool      # token budget reached
    domain_tokens: dict[str, int]
    dropped_too_long: int

    def cursor_metadata(self) -> dict:
        return {
            "steps": self.steps,
            "tokens_seen": self.tokens_seen,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "finished": self.finished,
            "domain_tokens": dict(self.domain_tokens),
            "dropped_too_long": self.dropped_too_long,
        }


def _as_streams(corpus) -> dict:
    """Accept either a stream dict or a flat document list."""
    if isinstance(corpus, dict):
        return corpus
    streams: dict[str, list] = {}
    for doc in corpus:
        streams.setdefault(doc.stream, []).append(doc)
    return streams


def _scored_per_domain(batch: PackedBatch) -> dict[str, int]:
    """Scored-token counts by domain: positions >= 1 with mask 1, attributed
    to the segment that owns them."""
    counts = {d: 0 for d in DOMAINS}
    for r in range(batch.rows):
        mask = batch.mask[r]
        for seg in batch.segments[r]:
            lo = max(seg.start, 1)
            if lo < seg.end:
                counts[seg.domain] += int(mask[lo : seg.end].sum())
    return counts


def _epoch_batches(streams, run: TrainRunConfig, epoch: int):
    order = hybrid_shuffle(MixturePlan(streams=streams, seed=run.seed, epoch=epoch))
    return pack(order, run.model.seq_len, run.loss_policy, batch_size=run.batch_size)


def train(run: TrainRunConfig, corpus, *, start_params=None, start_opt=None,
          start_cursor: dict | None = None, max_steps: int | None = None) -> TrainResult:
    """Train until the scored-token budget is met (or max_steps, for
    deliberate interruption).

    start_params/start_opt/start_cursor resume a previous run exactly: the
    batch stream is a pure function of (corpus, seed, epoch), so skipping to
    the stored cursor reproduces the uninterrupted order.
    """
    streams = _as_streams(corpus)
    if not any(streams.values()):
        raise ValueError("train: corpus is empty")

    params = start_params if start_params is not None else init_params(run.model, run.seed)
    opt = start_opt if start_opt is not None else OptimizerState.zeros_like(params)
    cursor = start_cursor or {}
    tokens_seen = int(cursor.get("tokens_seen", 0))
    steps = int(cursor.get("steps", 0))
    epoch = int(cursor.get("epoch", 0))
    batch_index = int(cursor.get("batch_index", 0))
    domain_tokens = {d: 0 for d in DOMAINS}
    domain_tokens.update(cursor.get("domain_tokens", {}))
    dropped = int(cursor.get("dropped_too_long", 0))

    first = _epoch_batches(streams, run, epoch)
    if sum(int(b.mask[:, 1:].sum()) for b in first.batches) == 0:
        raise ValueError("train: corpus yields zero masked-in target tokens per epoch")

    trajectory: list[dict] = []
    steps_this_call = 0
    result_pack = first
    while tokens_seen < run.token_budget:
        if max_steps is not None and steps_this_call >= max_steps:
            break
        if batch_index >= len(result_pack.batches):
            dropped += result_pack.dropped_too_long
            epoch += 1
            batch_index = 0
            result_pack = _epoch_batches(streams, run, epoch)
            continue
        batch = result_pack.batches[batch_index]
        batch_index += 1
        scored = int(batch.mask[:, 1:].sum())
        if scored == 0:
            continue
        loss, grads, n_scored = masked_loss_and_grads(
            params, run.model, batch.tokens, batch.mask
        )
        grads, clip_scale = clip_grad_norm(grads, run.grad_clip)
        tokens_seen += n_scored
        lr = lr_at(run.schedule, tokens_seen)
        params, opt = adam_step(
            params, grads, opt, lr,
            betas=run.betas, eps=run.adam_eps, weight_decay=run.weight_decay,
        )
        steps += 1
        steps_this_call += 1
        for domain, n in _scored_per_domain(batch).items():
            domain_tokens[domain] += n
        trajectory.append({
            "step": steps,
            "tokens_seen": tokens_seen,
            "loss": loss,
            "lr": lr,
            "clip_scale": clip_scale,
        })

    return TrainResult(
        params=params, opt_state=opt, trajectory=trajectory,
        tokens_seen=tokens_seen, steps=steps,
        epoch=epoch, batch_index=batch_index,
        finished=tokens_seen >= run.token_budget,
        domain_tokens=domain_tokens, dropped_too_long=dropped,
    )


def save_training_checkpoint(path, config: ModelConfig, result: TrainResult) -> None:
    """Checkpoint with the optimizer moments and the resume cursor embedded."""
    from .model import save_checkpoint

    extras = {f"adam.m.{k}": v for k, v in result.opt_state.m.items()}
    extras.update({f"adam.v.{k}": v for k, v in result.opt_state.v.items()})
    metadata = {"trainer": result.cursor_metadata(), "adam_step": result.opt_state.step}
    save_checkpoint(path, config, result.params, metadata=metadata, extras=extras)


def load_training_checkpoint(path):
    """Inverse of save_training_checkpoint.

    Returns (config, params, opt_state, cursor) where cursor feeds
    train(start_cursor=...).
    """
    from .model import load_checkpoint

    ckpt = load_checkpoint(path)
    moments_m = {k[len("adam.m."):]: a for k, a in ckpt.extras.items() if k.startswith("adam.m.")}
    moments_v = {k[len("adam.v."):]: a for k, a in ckpt.extras.items() if k.startswith("adam.v.")}
    opt = OptimizerState(step=int(ckpt.metadata.get("adam_step", 0)), m=moments_m, v=moments_v)
    cursor = ckpt.metadata.get("trainer", {})
    return ckpt.config, ckpt.params, opt, cursor


def perplexity(params, config: ModelConfig, eval_docs, loss_policy: str = "full") -> float:
    """exp(total masked cross-entropy / total masked tokens) over the packed
    evaluation documents (packed in the given order, no shuffling)."""
    eval_docs = list(eval_docs)
    if not eval_docs:
        raise ValueError("perplexity: eval set is empty")
    result = pack(eval_docs, config.seq_len, loss_policy)
    total_ce = 0.0
    total_tokens = 0
    for batch in result.batches:
        ce, n = masked_loss_sum(params, config, batch.tokens, batch.mask)
        total_ce += ce
        total_tokens += n
    if total_tokens == 0:
        raise ValueError("perplexity: eval set yields zero masked tokens")
    return math.exp(total_ce / total_tokens)


# --- regime comparison --------------------------------------------------------


@dataclass(frozen=True)
class StageSpec:
    """One training stage: a corpus composition plus its run configuration."""

    streams: dict
    run: TrainRunConfig


@dataclass(frozen=True)
class RegimeSpec:
    """sequential = two or more stages run back to back (optimizer state is
    reset at each boundary); hybrid = exactly one stage over the mixed corpus."""

    regime: str
    stages: tuple

    def __post_init__(self):
        if self.regime not in ("sequential", "hybrid"):
            raise ValueError(f"RegimeSpec: unknown regime {self.regime!r}")
        if self.regime == "sequential" and len(self.stages) < 2:
            raise ValueError("RegimeSpec: sequential needs >= 2 stages")
        if self.regime == "hybrid" and len(self.stages) != 1:
            raise ValueError("RegimeSpec: hybrid needs exactly 1 stage")
        first = self.stages[0].run.model
        for s in self.stages:
            if s.run.model != first:
                raise ValueError("RegimeSpec: all stages must share one model config")

    @property
    def total_budget(self) -> int:
        return sum(s.run.token_budget for s in self.stages)


def _run_stages(spec: RegimeSpec, seed: int):
    """Run the stages of one regime with the given seed override. Returns
    (final params, per-stage TrainResults)."""
    params = None
    results = []
    for stage in spec.stages:
        run = _reseed(stage.run, seed)
        if params is None:
            res = train(run, stage.streams)
        else:
            res = train(run, stage.streams, start_params=params,
                        start_opt=OptimizerState.zeros_like(params))
        params = res.params
        results.append(res)
    return params, results


def _reseed(run: TrainRunConfig, seed: int) -> TrainRunConfig:
    return TrainRunConfig(
        model=run.model, schedule=run.schedule, batch_size=run.batch_size,
        token_budget=run.token_budget, seed=seed, loss_policy=run.loss_policy,
        betas=run.betas, weight_decay=run.weight_decay, adam_eps=run.adam_eps,
        grad_clip=run.grad_clip,
    )


def _domain_streams(stages, domain: str) -> dict:
    streams: dict = {}
    for stage in stages:
        for name, docs in stage.streams.items():
            if name.startswith(domain):
                streams.setdefault(name, [])
                existing = {d.id for d in streams[name]}
                streams[name].extend(d for d in docs if d.id not in existing)
    return streams


@dataclass
class RegimeOutcome:
    final_perplexity: dict[str, float]
    stage_general_ppl: list[float]
    forgetting_delta: dict[str, float]
    domain_tokens: dict[str, int]
    tokens_seen: int


@dataclass
class ForgettingReport:
    seeds: list[int]
    total_budget: int
    per_seed: list[dict]   # seed -> {"sequential": RegimeOutcome, "hybrid": RegimeOutcome}
    summary: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        def outcome(o: RegimeOutcome) -> dict:
            return {
                "final_perplexity": o.final_perplexity,
                "stage_general_ppl": o.stage_general_ppl,
                "forgetting_delta": {k: clean(v) for k, v in o.forgetting_delta.items()},
                "domain_tokens": o.domain_tokens,
                "tokens_seen": o.tokens_seen,
            }

        return {
            "seeds": self.seeds,
            "total_budget": self.total_budget,
            "per_seed": [
                {"seed": s, **{k: outcome(v) for k, v in row.items()}}
                for s, row in zip(self.seeds, self.per_seed)
            ],
            "summary": self.summary,
        }


def _baseline_ppl(spec: RegimeSpec, domain: str, exposure: int, seed: int,
                  eval_docs, cache: dict) -> float | None:
    """Perplexity of a fresh model trained only on `domain` streams for
    (approximately, within one batch) `exposure` scored tokens.

    The run configuration is taken from the first stage that carries this
    domain, so for the standard sequential setup the general baseline is
    exactly the stage-1 run.
    """
    if exposure <= 0:
        return None
    streams = _domain_streams(spec.stages, domain)
    if not any(streams.values()):
        return None
    base_run = None
    for stage in spec.stages:
        if any(name.startswith(domain) and docs for name, docs in stage.streams.items()):
            base_run = stage.run
            break
    if base_run is None:
        return None
    key = (spec.regime, domain, exposure, seed)
    if key not in cache:
        run = TrainRunConfig(
            model=base_run.model, schedule=base_run.schedule,
            batch_size=base_run.batch_size, token_budget=exposure,
            seed=seed, loss_policy=base_run.loss_policy, betas=base_run.betas,
            weight_decay=base_run.weight_decay, adam_eps=base_run.adam_eps,
            grad_clip=base_run.grad_clip,
        )
        res = train(run, streams)
        cache[key] = perplexity(res.params, run.model, eval_docs)
    return cache[key]


def run_forgetting_experiment(sequential: RegimeSpec, hybrid: RegimeSpec,
                              eval_sets: dict, seeds) -> ForgettingReport:
    """Compare the two regimes on held-out per-domain perplexity.

    For each seed, both regimes consume the same total scored-token budget.
    The forgetting delta for a domain is final perplexity minus the
    perplexity of a fresh model trained on that domain's streams alone with
    the regime's same-domain token exposure (for the sequential regime's
    general domain this baseline coincides with the stage-1 endpoint).
    """
    if sequential.regime != "sequential" or hybrid.regime != "hybrid":
        raise ValueError("run_forgetting_experiment: pass (sequential, hybrid) specs")
    if sequential.total_budget != hybrid.total_budget:
        raise ValueError(
            f"run_forgetting_experiment: budgets differ "
            f"({sequential.total_budget} vs {hybrid.total_budget})"
        )
    if sequential.stages[0].run.model != hybrid.stages[0].run.model:
        raise ValueError("run_forgetting_experiment: regimes must share the model config")
    for domain in DOMAINS:
        if domain not in eval_sets or not eval_sets[domain]:
            raise ValueError(f"run_forgetting_experiment: missing eval set for {domain!r}")

    seeds = list(seeds)
    per_seed = []
    for seed in seeds:
        row = {}
        baseline_cache: dict = {}

        # sequential: general stage(s) then financial stage(s)
        seq_params, seq_results = _run_stages(sequential, seed)
        stage_general = [
            perplexity(res.params, stage.run.model, eval_sets["general"])
            for stage, res in zip(sequential.stages, seq_results)
        ]
        seq_domain_tokens = {d: 0 for d in DOMAINS}
        for res in seq_results:
            for d in DOMAINS:
                seq_domain_tokens[d] += res.domain_tokens[d]
        seq_final = {
            d: perplexity(seq_params, sequential.stages[0].run.model, eval_sets[d])
            for d in DOMAINS
        }
        seq_delta = {}
        for d in DOMAINS:
            base = _baseline_ppl(sequential, d, seq_domain_tokens[d], seed,
                                 eval_sets[d], baseline_cache)
            seq_delta[d] = seq_final[d] - base if base is not None else float("nan")
        row["sequential"] = RegimeOutcome(
            final_perplexity=seq_final, stage_general_ppl=stage_general,
            forgetting_delta=seq_delta, domain_tokens=seq_domain_tokens,
            tokens_seen=sum(r.tokens_seen for r in seq_results),
        )

        hyb_params, hyb_results = _run_stages(hybrid, seed)
        hyb_result = hyb_results[0]
        hyb_final = {
            d: perplexity(hyb_params, hybrid.stages[0].run.model, eval_sets[d])
            for d in DOMAINS
        }
        hyb_delta = {}
        for d in DOMAINS:
            base = _baseline_ppl(hybrid, d, hyb_result.domain_tokens[d], seed,
                                 eval_sets[d], baseline_cache)
            hyb_delta[d] = hyb_final[d] - base if base is not None else float("nan")
        row["hybrid"] = RegimeOutcome(
            final_perplexity=hyb_final,
            stage_general_ppl=[perplexity(hyb_params, hybrid.stages[0].run.model,
                                          eval_sets["general"])],
            forgetting_delta=hyb_delta, domain_tokens=hyb_result.domain_tokens,
            tokens_seen=hyb_result.tokens_seen,
        )
        per_seed.append(row)

    forgetting_rises = sum(
        1 for row in per_seed
        if row["sequential"].stage_general_ppl[-1] > row["sequential"].stage_general_ppl[0]
    )
    hybrid_better = sum(
        1 for row in per_seed
        if row["hybrid"].final_perplexity["general"]
        < row["sequential"].final_perplexity["general"]
    )
    summary = {
        "seeds": len(seeds),
        "sequential_general_ppl_rises": forgetting_rises,
        "hybrid_better_on_general": hybrid_better,
        "mean_sequential_general_rise": float(np.mean([
            row["sequential"].stage_general_ppl[-1] - row["sequential"].stage_general_ppl[0]
            for row in per_seed
        ])),
        "mean_general_ppl_gap_sequential_minus_hybrid": float(np.mean([
            row["sequential"].final_perplexity["general"]
            - row["hybrid"].final_perplexity["general"]
            for row in per_seed
        ])),
    }
    return ForgettingReport(
        seeds=seeds, total_budget=sequential.total_budget,
        per_seed=per_seed, summary=summary,
    )
