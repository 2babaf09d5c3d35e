"""Instruction-data synthesis through a text-completion client.

Two generators: few-shot instruction bootstrapping from human seed records,
and question-answer extraction grounded in unstructured documents or
serialized structured records. Both parse completions with a strict
delimiter grammar; anything that does not parse is a counted failure, never
salvaged. A seeded mock client keeps every test offline and deterministic.

Wire grammars (versioned with the prompt templates below):
  instruction blocks   "Instruction:" / optional "Input:" / "Output:" line
                       groups separated by lines containing only "###"
  qa pairs             alternating "Q:" / "A:" lines
"""

import hashlib
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests

from .corpus import Document, InstructionRecord

PROMPT_VERSION = 1

SELF_INSTRUCT_TEMPLATE = """\
You are helping build a dataset of task instructions.
Here are {n_examples} example tasks:

{examples}
###
Propose {n_new} new, diverse tasks in exactly the same format.
Separate tasks with a line containing only ###.
"""

SELF_QA_TEMPLATE = """\
Read the following source material:

--- BEGIN SOURCE ---
{text}
--- END SOURCE ---

Write exactly {n_pairs} question-answer pairs grounded in the source.
Use one "Q:" line followed by one "A:" line per pair.
"""

_QA_MARKER = 'question-answer pairs'
_TASKS_MARKER = 'new, diverse tasks'


@dataclass
class GenStats:
    """Accounting for one generation run: every parsed candidate ends up in
    exactly one of emitted / dropped_parse / dropped_dedup."""

    requested: int = 0
    generated: int = 0
    emitted: int = 0
    dropped_parse: int = 0
    dropped_dedup: int = 0
    client_calls: int = 0
    client_errors: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "requested": self.requested,
            "generated": self.generated,
            "emitted": self.emitted,
            "dropped_parse": self.dropped_parse,
            "dropped_dedup": self.dropped_dedup,
            "client_calls": self.client_calls,
            "client_errors": list(self.client_errors),
        }


@dataclass
class GenResult:
    records: list[InstructionRecord]
    stats: GenStats


@dataclass(frozen=True)
class StructuredRecord:
    """A structured source item: an entity plus its typed attribute map."""

    entity: str
    fields: dict

    def __post_init__(self):
        if not self.fields:
            raise ValueError("StructuredRecord: field map must be non-empty")

    def serialize(self) -> str:
        """Deterministic text table: entity line then sorted key-value rows."""
        lines = [self.entity]
        for key in sorted(self.fields):
            lines.append(f"{key}: {self.fields[key]}")
        return "\n".join(lines)


class MockCompletionClient:
    """Deterministic stand-in for a completion service.

    The completion is a pure function of (seed, prompt): a SHA-256 of both
    seeds a PCG64 stream that emits well-formed blocks for whichever grammar
    the prompt asks for. ``malformed_rate`` makes a deterministic fraction of
    blocks unparseable so accounting paths can be exercised.
    """

    max_in_flight = 1

    def __init__(self, seed: int = 0, malformed_rate: float = 0.0):
        self.seed = seed
        self.malformed_rate = malformed_rate

    _WORDS = (
        "market bond equity yield ledger audit margin index futures tax "
        "rate asset credit branch merger report quarter filing broker fund"
    ).split()

    def _rng(self, prompt: str) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}|{prompt}".encode("utf-8")).digest()
        return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))

    def _phrase(self, rng, lo=3, hi=8) -> str:
        n = int(rng.integers(lo, hi))
        return " ".join(self._WORDS[int(i)] for i in rng.integers(0, len(self._WORDS), n))

    def complete(self, prompt: str, max_tokens: int = 512) -> str:
        rng = self._rng(prompt)
        if _QA_MARKER in prompt:
            m = re.search(r"exactly (\d+) question-answer pairs", prompt)
            n = int(m.group(1)) if m else 1
            lines = []
            for i in range(n):
                broken = rng.random() < self.malformed_rate
                lines.append(f"Q: What about {self._phrase(rng)} (case {i})?")
                if not broken:
                    lines.append(f"A: It concerns {self._phrase(rng)}.")
            return "\n".join(lines)
        if _TASKS_MARKER in prompt:
            m = re.search(r"Propose (\d+) new", prompt)
            n = int(m.group(1)) if m else 1
            blocks = []
            for _ in range(n):
                broken = rng.random() < self.malformed_rate
                block = [f"Instruction: Summarize the outlook for {self._phrase(rng)}."]
                if rng.random() < 0.5:
                    block.append(f"Input: {self._phrase(rng)}")
                if not broken:
                    block.append(f"Output: A short note on {self._phrase(rng)}.")
                blocks.append("\n".join(block))
            return "\n###\n".join(blocks)
        return f"A short note on {self._phrase(rng)}."


class LiveCompletionClient:
    """Minimal HTTP text-completion client with a bounded retry budget.

    POSTs {"prompt", "max_tokens"} to the endpoint and expects a JSON body
    with a "completion" field. The bearer token is read from the environment
    (COMPLETION_API_TOKEN by default); nothing here is exercised by tests
    against a real network.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, max_in_flight: int = 1,
                 retries: int = 2, token_env: str = "COMPLETION_API_TOKEN",
                 post=None, sleep=time.sleep):
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self.retries = retries
        self.token_env = token_env
        self._post = post or requests.post
        self._sleep = sleep

    def complete(self, prompt: str, max_tokens: int = 512) -> str:
        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._post(
                    self.endpoint,
                    json={"prompt": prompt, "max_tokens": max_tokens},
                    headers=headers,
                    timeout=self.timeout,
                )
                if resp.status_code >= 500:
                    raise RuntimeError(f"server error {resp.status_code}")
                resp.raise_for_status()
                return resp.json()["completion"]
            except Exception as exc:  # noqa: BLE001 - every failure is retryable here
                last_error = exc
                if attempt < self.retries:
                    self._sleep(min(2.0**attempt, 8.0))
        raise RuntimeError(f"completion request failed after {self.retries + 1} attempts: {last_error}")


def _complete_many(client, prompts: list[str], stats: GenStats) -> list[str | None]:
    """Issue a wave of requests, at most client.max_in_flight concurrently,
    and return completions re-sequenced into request order (None = failed)."""
    width = max(int(getattr(client, "max_in_flight", 1)), 1)

    def one(prompt):
        try:
            return client.complete(prompt)
        except Exception as exc:  # noqa: BLE001
            stats.client_errors.append(str(exc))
            return None

    stats.client_calls += len(prompts)
    if width == 1 or len(prompts) == 1:
        return [one(p) for p in prompts]
    with ThreadPoolExecutor(max_workers=width) as pool:
        return list(pool.map(one, prompts))


def _parse_instruction_blocks(completion: str) -> tuple[list[InstructionRecord], int]:
    """Strict block grammar; returns (records, parse_failures)."""
    records = []
    failures = 0
    for block in re.split(r"^###\s*$", completion, flags=re.MULTILINE):
        if not block.strip():
            continue
        fields = {}
        current = None
        ok = True
        for line in block.strip().splitlines():
            m = re.match(r"^(Instruction|Input|Output):\s?(.*)$", line)
            if m:
                current = m.group(1).lower()
                if current in fields:
                    ok = False
                    break
                fields[current] = m.group(2)
            elif current is not None:
                fields[current] += "\n" + line
            else:
                ok = False
                break
        if not ok or "instruction" not in fields or "output" not in fields \
                or not fields["instruction"].strip() or not fields["output"].strip():
            failures += 1
            continue
        records.append(InstructionRecord(
            instruction=fields["instruction"].strip(),
            input=(fields.get("input") or "").strip() or None,
            output=fields["output"].strip(),
            source="self_instruct",
        ))
    return records, failures


def _parse_qa_pairs(completion: str) -> tuple[list[tuple[str, str]], int]:
    """Alternating Q:/A: line pairs; a Q without its A is a failure."""
    pairs = []
    failures = 0
    question = None
    for line in completion.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("Q:"):
            if question is not None:
                failures += 1  # previous question never got an answer
            question = line[2:].strip()
        elif line.startswith("A:"):
            answer = line[2:].strip()
            if question is None or not question or not answer:
                failures += 1
            else:
                pairs.append((question, answer))
            question = None
        else:
            failures += 1
            question = None
    if question is not None:
        failures += 1
    return pairs, failures


def _normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.lower()).strip()


def _trigrams(text: str) -> set:
    padded = f"  {_normalize(text)}  "
    return {padded[i : i + 3] for i in range(len(padded) - 2)}


def trigram_jaccard(a: str, b: str) -> float:
    """Character-trigram Jaccard similarity of normalized text."""
    ta, tb = _trigrams(a), _trigrams(b)
    if not ta and not tb:
        return 1.0
    return len(ta & tb) / len(ta | tb)


def _is_duplicate(rec: InstructionRecord, existing, threshold: float) -> bool:
    norm = _normalize(rec.instruction)
    grams = _trigrams(rec.instruction)
    for other in existing:
        if _normalize(other.instruction) == norm:
            return True
        other_grams = _trigrams(other.instruction)
        union = len(grams | other_grams)
        if union and len(grams & other_grams) / union > threshold:
            return True
    return False


def dedup_filter(records, threshold: float = 0.7) -> list[InstructionRecord]:
    """Drop exact-duplicate instructions and near-duplicates whose trigram
    Jaccard exceeds the threshold; earlier records win, order is stable."""
    kept: list[InstructionRecord] = []
    for rec in records:
        if not _is_duplicate(rec, kept, threshold):
            kept.append(rec)
    return kept


def _render_examples(records, rng, k: int) -> str:
    idx = rng.choice(len(records), size=min(k, len(records)), replace=False)
    blocks = []
    for i in idx:
        rec = records[int(i)]
        lines = [f"Instruction: {rec.instruction}"]
        if rec.input:
            lines.append(f"Input: {rec.input}")
        lines.append(f"Output: {rec.output}")
        blocks.append("\n".join(lines))
    return "\n###\n".join(blocks)


def self_instruct_expand(seeds, client, target_count: int, seed: int = 0,
                         examples_per_prompt: int = 4, new_per_prompt: int = 4,
                         dedup_threshold: float = 0.7,
                         max_calls: int | None = None) -> GenResult:
    """Bootstrap new instruction records from human-written seeds.

    Few-shot prompts sample from the seeds plus previously accepted records;
    parsed candidates pass the dedup filter (against seeds and accepted) and
    accumulate until target_count. The client call budget is hard-capped at
    max_calls (default 2 * target_count + 8), so a misbehaving client yields a
    partial result, never a hang.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("self_instruct_expand: seeds must be non-empty")
    if target_count < 0:
        raise ValueError("self_instruct_expand: target_count must be >= 0")
    stats = GenStats(requested=target_count)
    if target_count == 0:
        return GenResult(records=[], stats=stats)
    if max_calls is None:
        max_calls = 2 * target_count + 8

    rng = np.random.default_rng(seed)
    accepted: list[InstructionRecord] = []
    while len(accepted) < target_count and stats.client_calls < max_calls:
        pool = seeds + accepted
        wanted = min(new_per_prompt, target_count - len(accepted))
        prompt = SELF_INSTRUCT_TEMPLATE.format(
            n_examples=min(examples_per_prompt, len(pool)),
            examples=_render_examples(pool, rng, examples_per_prompt),
            n_new=wanted,
        )
        (completion,) = _complete_many(client, [prompt], stats)
        if completion is None:
            break
        candidates, failures = _parse_instruction_blocks(completion)
        stats.generated += len(candidates) + failures
        stats.dropped_parse += failures
        for rec in candidates:
            # surplus past the target also lands in the dedup bucket so that
            # emitted + dropped_parse + dropped_dedup == generated stays exact
            if len(accepted) >= target_count or \
                    _is_duplicate(rec, seeds + accepted, dedup_threshold):
                stats.dropped_dedup += 1
            else:
                accepted.append(rec)
    stats.emitted = len(accepted)
    return GenResult(records=accepted, stats=stats)


def self_qa_unstructured(doc: Document, client, n_pairs: int, seed: int = 0) -> GenResult:
    """Generate question-answer records grounded in one pretrain document."""
    if doc.kind != "pretrain":
        raise ValueError("self_qa_unstructured: doc must have kind 'pretrain'")
    if n_pairs < 0:
        raise ValueError("self_qa_unstructured: n_pairs must be >= 0")
    stats = GenStats(requested=n_pairs)
    if n_pairs == 0:
        return GenResult(records=[], stats=stats)
    prompt = SELF_QA_TEMPLATE.format(text=doc.text, n_pairs=n_pairs)
    (completion,) = _complete_many(client, [prompt], stats)
    records: list[InstructionRecord] = []
    if completion is not None:
        pairs, failures = _parse_qa_pairs(completion)
        stats.generated += len(pairs) + failures
        stats.dropped_parse += failures
        stats.dropped_dedup += max(0, len(pairs) - n_pairs)  # over-delivery
        for q, a in pairs[:n_pairs]:
            records.append(InstructionRecord(
                instruction=q, output=a,
                source="self_qa_unstructured", provenance=doc.id,
            ))
    stats.emitted = len(records)
    return GenResult(records=records, stats=stats)


def load_qa_sources(path) -> list:
    """Read Self-QA source items from JSONL: each line is either a Document
    object (has "text") or a StructuredRecord object (has "entity"/"fields").
    Malformed lines are reported with their line numbers."""
    import json

    items = []
    errors = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "entity" in obj:
                    items.append(StructuredRecord(entity=obj["entity"], fields=obj["fields"]))
                elif "text" in obj:
                    items.append(Document(
                        id=str(obj.get("id", f"qa-src#{lineno}")), text=obj["text"],
                        domain=obj.get("domain", "financial"),
                        kind=obj.get("kind", "pretrain"),
                    ))
                else:
                    raise ValueError("needs either 'text' (document) or 'entity' (structured)")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    if errors:
        raise ValueError("malformed lines:\n" + "\n".join(errors[:20]))
    return items


def self_qa_structured(rec: StructuredRecord, client, n_pairs: int, seed: int = 0) -> GenResult:
    """Serialize a structured record to its text table and run Self-QA on it."""
    doc = Document(
        id=f"struct:{rec.entity}", text=rec.serialize(),
        domain="financial", kind="pretrain",
    )
    result = self_qa_unstructured(doc, client, n_pairs, seed=seed)
    records = [
        InstructionRecord(
            instruction=r.instruction, input=r.input, output=r.output,
            source="self_qa_structured", provenance=doc.id,
        )
        for r in result.records
    ]
    return GenResult(records=records, stats=result.stats)
