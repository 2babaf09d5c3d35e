"""Command-line entry point.

Subcommands drive the library end to end: gen-data (instruction synthesis),
mix (one-epoch hybrid shuffle), train, eval (perplexity), compare-regimes
(the sequential-vs-hybrid forgetting experiment), and plan (parameter counts,
layer partitioning, per-rank memory). Every run writes a manifest with the
resolved config, seeds, and artifact checksums; all randomness flows from
explicit --seed flags or config keys.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""

import argparse
import sys
from pathlib import Path

from . import __version__
from .configfile import (
    COMPARE_FIELDS,
    TRAIN_FIELDS,
    ConfigError,
    load_config,
    model_config_from,
    schedule_from,
)
from .corpus import (
    STREAMS,
    Document,
    hybrid_shuffle,
    load_corpus_dir,
    load_documents,
    load_instruction_records,
    mixture_stats,
    MixturePlan,
    save_documents,
    save_instruction_records,
)
from .datagen import (
    GenStats,
    LiveCompletionClient,
    MockCompletionClient,
    StructuredRecord,
    load_qa_sources,
    self_instruct_expand,
    self_qa_structured,
    self_qa_unstructured,
)
from .model import count_params, load_checkpoint
from .numerics import Schedule
from .planner import PRESET_NAMES, load_preset, pipeline_partition, zero1_memory
from .reports import dump_json, format_table, sha256_file, write_manifest
from .training import (
    RegimeSpec,
    StageSpec,
    TrainRunConfig,
    load_training_checkpoint,
    perplexity,
    run_forgetting_experiment,
    save_training_checkpoint,
    train,
)


def _build_client(args):
    if args.mock:
        return MockCompletionClient(seed=args.seed, malformed_rate=args.malformed_rate)
    if not args.endpoint:
        raise ConfigError("gen-data: --endpoint is required unless --mock is given")
    return LiveCompletionClient(endpoint=args.endpoint)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    client = _build_client(args)
    if args.mode == "self-instruct":
        seeds = load_instruction_records(args.seeds)
        if not seeds:
            raise ConfigError(f"{args.seeds}: seed file contains no records")
        result = self_instruct_expand(seeds, client, target_count=args.target, seed=args.seed)
        records, stats = result.records, result.stats
    else:
        sources = load_qa_sources(args.seeds)
        if not sources:
            raise ConfigError(f"{args.seeds}: source file contains no items")
        records = []
        stats = GenStats()
        for item in sources:
            if isinstance(item, StructuredRecord):
                r = self_qa_structured(item, client, args.pairs_per_doc, seed=args.seed)
            else:
                r = self_qa_unstructured(item, client, args.pairs_per_doc, seed=args.seed)
            records.extend(r.records)
            stats.requested += r.stats.requested
            stats.generated += r.stats.generated
            stats.emitted += r.stats.emitted
            stats.dropped_parse += r.stats.dropped_parse
            stats.dropped_dedup += r.stats.dropped_dedup
            stats.client_calls += r.stats.client_calls
            stats.client_errors.extend(r.stats.client_errors)

    out.parent.mkdir(parents=True, exist_ok=True)
    save_instruction_records(out, records)
    stats_path = out.with_name(out.name + ".stats.json")
    dump_json(stats.as_dict(), stats_path)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        command="gen-data",
        args={"mode": args.mode, "mock": args.mock, "target": args.target,
              "pairs_per_doc": args.pairs_per_doc, "malformed_rate": args.malformed_rate},
        config_snapshot={},
        seeds=[args.seed],
        inputs=[args.seeds],
        outputs=[out, stats_path],
    )
    print(f"wrote {len(records)} records to {out} "
          f"(generated {stats.generated}, parse drops {stats.dropped_parse}, "
          f"dedup drops {stats.dropped_dedup})")
    if stats.client_errors:
        print(f"client errors: {len(stats.client_errors)}", file=sys.stderr)
    return 0


def cmd_mix(args) -> int:
    streams = load_corpus_dir(args.corpus)
    plan = MixturePlan(streams=streams, seed=args.seed, epoch=args.epoch)
    order = hybrid_shuffle(plan)
    stats = mixture_stats(order)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_documents(out, order)
    stats_path = out.with_name(out.name + ".stats.json")
    dump_json({
        "doc_counts": stats.doc_counts,
        "token_counts": stats.token_counts,
        "token_shares": stats.token_shares,
        "total_docs": stats.total_docs,
    }, stats_path)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        command="mix",
        args={"corpus": str(args.corpus), "epoch": args.epoch},
        config_snapshot={},
        seeds=[args.seed],
        inputs=[p for p in (Path(args.corpus) / f"{s}.jsonl" for s in STREAMS) if p.exists()],
        outputs=[out, stats_path],
    )
    print(f"wrote {stats.total_docs} documents to {out}")
    return 0


def _run_config_from(values: dict) -> TrainRunConfig:
    model = model_config_from(values)
    schedule = schedule_from(values, values["Total tokens"])
    return TrainRunConfig(
        model=model,
        schedule=schedule,
        batch_size=values["Global Batch Size"],
        token_budget=values["Total tokens"],
        seed=values["Seed"],
        loss_policy=values["Loss policy"],
        betas=values["Adam betas"],
        weight_decay=values["Weight decay"],
        adam_eps=values["Adam eps"],
        grad_clip=values["Gradient clipping"],
    )


def cmd_train(args) -> int:
    values = load_config(args.config, TRAIN_FIELDS)
    run = _run_config_from(values)
    streams = load_corpus_dir(values["Corpus dir"])

    start_params = start_opt = None
    cursor = None
    if args.resume:
        ck_config, start_params, start_opt, cursor = load_training_checkpoint(args.resume)
        if ck_config != run.model:
            raise ConfigError(
                f"--resume checkpoint model config does not match {args.config}"
            )

    result = train(run, streams, start_params=start_params, start_opt=start_opt,
                   start_cursor=cursor, max_steps=args.max_steps)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint_final.ckpt"
    save_training_checkpoint(ckpt_path, run.model, result)
    traj_json = out / "trajectory.json"
    dump_json(result.trajectory, traj_json)
    traj_txt = out / "trajectory.txt"
    traj_txt.write_text(format_table(
        ["step", "tokens_seen", "loss", "lr"],
        [[t["step"], t["tokens_seen"], t["loss"], t["lr"]] for t in result.trajectory],
    ), encoding="utf-8")

    corpus_files = [p for p in (Path(values["Corpus dir"]) / f"{s}.jsonl" for s in STREAMS)
                    if p.exists()]
    inputs = [args.config] + corpus_files + ([args.resume] if args.resume else [])
    write_manifest(
        out / "manifest.json",
        command="train",
        args={"config": str(args.config), "resume": str(args.resume or ""),
              "max_steps": args.max_steps},
        config_snapshot={k: repr(v) for k, v in values.items()},
        seeds=[run.seed],
        inputs=inputs,
        outputs=[ckpt_path, traj_json, traj_txt],
    )
    status = "finished" if result.finished else "stopped early"
    print(f"{status}: {result.steps} steps, {result.tokens_seen} scored tokens, "
          f"final loss {result.trajectory[-1]['loss']:.4f}"
          if result.trajectory else f"{status}: no steps taken")
    print(f"checkpoint: {ckpt_path} (sha256 {sha256_file(ckpt_path)[:12]})")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    docs = load_documents(args.eval_set)
    if not docs:
        raise ConfigError(f"{args.eval_set}: no documents")
    ppl = perplexity(ckpt.params, ckpt.config, docs, loss_policy=args.loss_policy)
    print(f"perplexity: {ppl:.6g} ({len(docs)} documents, policy {args.loss_policy})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = out / "eval.json"
        dump_json({
            "checkpoint": str(args.checkpoint),
            "eval_set": str(args.eval_set),
            "loss_policy": args.loss_policy,
            "documents": len(docs),
            "perplexity": ppl,
        }, report)
        write_manifest(
            out / "manifest.json",
            command="eval",
            args={"checkpoint": str(args.checkpoint), "eval_set": str(args.eval_set),
                  "loss_policy": args.loss_policy},
            config_snapshot={},
            seeds=[],
            inputs=[args.checkpoint, args.eval_set],
            outputs=[report],
        )
    return 0


def _split_streams(streams: dict, domain: str) -> dict:
    return {name: docs for name, docs in streams.items() if name.startswith(domain)}


def cmd_compare_regimes(args) -> int:
    values = load_config(args.config, COMPARE_FIELDS)
    model = model_config_from(values)
    streams = load_corpus_dir(values["Corpus dir"])
    eval_dir = Path(values["Eval dir"])
    eval_sets = {}
    for domain in ("general", "financial"):
        path = eval_dir / f"{domain}.jsonl"
        if not path.exists():
            raise ConfigError(f"eval set missing: {path}")
        eval_sets[domain] = load_documents(path)

    total = values["Total tokens"]
    split = values["Stage split"]
    if not 0.0 < split < 1.0:
        raise ConfigError("'Stage split' must be strictly between 0 and 1")
    stage1_budget = max(1, int(round(total * split)))
    stage2_budget = total - stage1_budget
    if stage2_budget < 1:
        raise ConfigError("'Stage split' leaves no budget for stage 2")

    peak = values["Learning rate"]
    stage2_lr = values["Stage 2 learning rate"] or peak / 3

    def cosine(budget):
        return Schedule(peak_lr=peak, min_lr=peak / 10,
                        warmup_tokens=max(budget // 20, 1),
                        decay_tokens=budget, style="cosine")

    def run_for(budget, schedule):
        return TrainRunConfig(
            model=model, schedule=schedule, batch_size=values["Global Batch Size"],
            token_budget=budget, seed=0, loss_policy=values["Loss policy"],
            betas=values["Adam betas"], weight_decay=values["Weight decay"],
            adam_eps=values["Adam eps"], grad_clip=values["Gradient clipping"],
        )

    stage2_schedule = Schedule(peak_lr=stage2_lr, min_lr=stage2_lr,
                               warmup_tokens=0, decay_tokens=stage2_budget,
                               style="constant")
    sequential = RegimeSpec(regime="sequential", stages=(
        StageSpec(streams=_split_streams(streams, "general"),
                  run=run_for(stage1_budget, cosine(stage1_budget))),
        StageSpec(streams=_split_streams(streams, "financial"),
                  run=run_for(stage2_budget, stage2_schedule)),
    ))
    hybrid = RegimeSpec(regime="hybrid", stages=(
        StageSpec(streams=streams, run=run_for(total, cosine(total))),
    ))

    report = run_forgetting_experiment(sequential, hybrid, eval_sets, values["Seeds"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_json = out / "report.json"
    dump_json(report.as_dict(), report_json)
    rows = []
    for seed, row in zip(report.seeds, report.per_seed):
        for regime in ("sequential", "hybrid"):
            o = row[regime]
            rows.append([
                seed, regime,
                o.final_perplexity["general"], o.final_perplexity["financial"],
                o.stage_general_ppl[0], o.stage_general_ppl[-1],
                o.tokens_seen,
            ])
    report_txt = out / "report.txt"
    table = format_table(
        ["seed", "regime", "ppl_general", "ppl_financial",
         "general_ppl_stage1", "general_ppl_final", "tokens"],
        rows,
    )
    summary_lines = [f"{k}: {v}" for k, v in sorted(report.summary.items())]
    report_txt.write_text(table + "\n" + "\n".join(summary_lines) + "\n", encoding="utf-8")
    print(table)
    print("\n".join(summary_lines))

    corpus_files = [p for p in (Path(values["Corpus dir"]) / f"{s}.jsonl" for s in STREAMS)
                    if p.exists()]
    write_manifest(
        out / "manifest.json",
        command="compare-regimes",
        args={"config": str(args.config)},
        config_snapshot={k: repr(v) for k, v in values.items()},
        seeds=values["Seeds"],
        inputs=[args.config] + corpus_files + [eval_dir / "general.jsonl",
                                               eval_dir / "financial.jsonl"],
        outputs=[report_json, report_txt],
    )
    return 0


def cmd_plan(args) -> int:
    preset = load_preset(args.preset, phase=args.phase)
    total = count_params(preset.model)
    lines = [
        f"preset: {preset.name} ({preset.phase})",
        f"parameters: {total:,} ({round(total / 1e6):,}M)",
        f"layers: {preset.model.layers}  hidden: {preset.model.hidden_dim}  "
        f"heads: {preset.model.attention_heads}  vocab: {preset.model.vocab_size:,} "
        f"(rows {preset.model.embedding_rows:,})  seq: {preset.model.seq_len}",
        f"schedule: {preset.schedule.style}, peak {preset.schedule.peak_lr:g}, "
        f"min {preset.schedule.min_lr:g}, warmup {preset.schedule.warmup_tokens:,}, "
        f"decay {preset.schedule.decay_tokens:,}",
        f"global batch: {preset.global_batch}  total tokens: {preset.total_tokens:,}",
    ]
    plan_obj: dict = {"preset": preset.name, "phase": preset.phase, "parameters": total}
    if args.stages:
        partition = pipeline_partition(preset.model.layers, args.stages)
        lines.append(f"pipeline partition ({args.stages} stages): {partition}")
        plan_obj["pipeline_partition"] = partition
    mem = zero1_memory(total, args.dp_ranks)
    factor = (mem.total_bytes / total)
    lines.append(
        f"per-rank memory (R={args.dp_ranks}): 2P + 2P + 12P/{args.dp_ranks} "
        f"= {factor:.2f}P = {mem.total_gb:.2f} GB"
    )
    plan_obj["memory"] = mem.as_dict()
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        plan_json = out / "plan.json"
        dump_json(plan_obj, plan_json)
        write_manifest(
            out / "manifest.json",
            command="plan",
            args={"preset": args.preset, "phase": args.phase,
                  "stages": args.stages, "dp_ranks": args.dp_ranks},
            config_snapshot={},
            seeds=[],
            outputs=[plan_json],
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridlm",
        description="Desk-scale decoder LM: hybrid data mixing, training, "
                    "forgetting evaluation, and distributed-memory planning.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate instruction records via a completion client")
    p.add_argument("--seeds", required=True, help="JSONL seed records (self-instruct) or sources (self-qa)")
    p.add_argument("--mode", required=True, choices=["self-instruct", "self-qa"])
    p.add_argument("--mock", action="store_true", help="use the deterministic offline client")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--target", type=int, default=16, help="records to generate (self-instruct)")
    p.add_argument("--pairs-per-doc", type=int, default=2, help="QA pairs per source (self-qa)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--malformed-rate", type=float, default=0.0,
                   help="mock only: fraction of deliberately unparseable blocks")
    p.add_argument("--endpoint", default="", help="completion service URL (live client)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("mix", help="shuffle the four corpus streams into one epoch order")
    p.add_argument("--corpus", required=True, help="directory with <stream>.jsonl files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None,
                   help="stop after N optimizer steps even if the budget is unmet")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on an eval set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-set", required=True, help="JSONL documents")
    p.add_argument("--loss-policy", default="full", choices=["full", "response_only"])
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-regimes", help="sequential vs hybrid forgetting experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare_regimes)

    p = sub.add_parser("plan", help="parameter count, layer partition, per-rank memory")
    p.add_argument("--preset", required=True,
                   help=f"one of: {', '.join(PRESET_NAMES)}")
    p.add_argument("--phase", default="pretrain", choices=["pretrain", "finetune"])
    p.add_argument("--stages", type=int, default=None, help="pipeline stage count")
    p.add_argument("--dp-ranks", type=int, default=1, help="data-parallel ranks")
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(func=cmd_plan)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 1 with a summary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
