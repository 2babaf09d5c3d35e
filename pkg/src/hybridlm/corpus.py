"""Tokenization, the four-stream corpus mixer, and fixed-length packing.

The tokenizer is byte-level: raw bytes map to ids 0..255 and three specials
sit above them (PAD, DOC_SEP, RESP). Mixing shuffles whole documents from the
four (domain x kind) streams into one order with a seeded PCG64 Fisher-Yates
shuffle, so the entire shuffle -> format -> pack pipeline is a pure function
of (corpus, seed, epoch, config).
"""

import json
from dataclasses import dataclass, field

import numpy as np

PAD = 256
DOC_SEP = 257
RESP = 258
VOCAB_SIZE = 259

DOMAINS = ("general", "financial")
KINDS = ("pretrain", "instruction")
STREAMS = tuple(f"{d}_{k}" for d in DOMAINS for k in KINDS)

SOURCES = ("seed", "self_instruct", "self_qa_unstructured", "self_qa_structured")

LOSS_POLICIES = ("full", "response_only")


def tokenize(text) -> list[int]:
    """Byte-level encode a str (UTF-8) or bytes. Never emits special ids."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def detokenize_bytes(tokens) -> bytes:
    """Exact inverse of tokenize for byte ids; special ids are rejected."""
    out = bytearray()
    for t in tokens:
        if not 0 <= t <= 255:
            raise ValueError(f"detokenize_bytes: id {t} is not a byte token")
        out.append(t)
    return bytes(out)


def detokenize(tokens) -> str:
    """Decode byte ids to text; structural specials (PAD/DOC_SEP/RESP) are
    dropped; ids above the special range are errors."""
    buf = bytearray()
    for t in tokens:
        if 0 <= t <= 255:
            buf.append(t)
        elif t in (PAD, DOC_SEP, RESP):
            continue
        else:
            raise ValueError(f"detokenize: id {t} out of range (max {RESP})")
    return buf.decode("utf-8")


@dataclass(frozen=True)
class InstructionRecord:
    """One instruction/input/output training triple with provenance."""

    instruction: str
    output: str
    input: str | None = None
    source: str = "seed"
    provenance: str | None = None

    def __post_init__(self):
        if not self.instruction:
            raise ValueError("InstructionRecord: instruction must be non-empty")
        if not self.output:
            raise ValueError("InstructionRecord: output must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"InstructionRecord: unknown source {self.source!r}")


@dataclass(frozen=True)
class Document:
    """One corpus item tagged with (domain, kind); instruction documents may
    carry the structured record they were built from."""

    id: str
    text: str
    domain: str
    kind: str
    record: InstructionRecord | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"Document {self.id!r}: text must be non-empty")
        if self.domain not in DOMAINS:
            raise ValueError(f"Document {self.id!r}: unknown domain {self.domain!r}")
        if self.kind not in KINDS:
            raise ValueError(f"Document {self.id!r}: unknown kind {self.kind!r}")

    @property
    def stream(self) -> str:
        return f"{self.domain}_{self.kind}"


def render_instruction_text(rec: InstructionRecord) -> str:
    """Plain-text rendering of a record (prompt newline output, no specials)."""
    if rec.input:
        return f"Human: {rec.instruction}\n{rec.input}\n{rec.output}"
    return f"Human: {rec.instruction}\n{rec.output}"


def instruction_document(rec: InstructionRecord, doc_id: str, domain: str) -> Document:
    return Document(id=doc_id, text=render_instruction_text(rec), domain=domain,
                    kind="instruction", record=rec)


def format_instruction(rec: InstructionRecord) -> tuple[list[int], int]:
    """Token form of a record: prompt tokens, a RESP marker, then the output.

    Returns (tokens, response_start) where response_start indexes the first
    output token (the one right after RESP). An absent input emits no blank
    line.
    """
    if not rec.output:
        raise ValueError("format_instruction: empty output")
    prompt = f"Human: {rec.instruction}\n"
    if rec.input:
        prompt += f"{rec.input}\n"
    tokens = tokenize(prompt) + [RESP] + tokenize(rec.output)
    response_start = len(tokenize(prompt)) + 1
    return tokens, response_start


@dataclass(frozen=True)
class MixturePlan:
    """Per-stream document lists plus the (seed, epoch) that fix the order.

    repetition multiplies a stream's documents within the epoch (default 1
    everywhere: the mixing ratio is simply the corpus composition).
    """

    streams: dict[str, list[Document]]
    seed: int
    epoch: int = 0
    repetition: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.streams) - set(STREAMS)
        if unknown:
            raise ValueError(f"MixturePlan: unknown streams {sorted(unknown)}")
        for name, docs in self.streams.items():
            for doc in docs:
                if doc.stream != name:
                    raise ValueError(
                        f"MixturePlan: document {doc.id!r} tagged {doc.stream} "
                        f"placed in stream {name}"
                    )


def hybrid_shuffle(plan: MixturePlan) -> list[Document]:
    """Shuffle all four streams into one training order.

    PCG64 seeded from SeedSequence((seed, epoch)) drives a Fisher-Yates
    shuffle, so the same (streams, seed, epoch) always yields the same order
    and different epochs are independent permutations.
    """
    pool: list[Document] = []
    seen: dict[str, str] = {}
    for name in STREAMS:
        docs = plan.streams.get(name, [])
        reps = plan.repetition.get(name, 1)
        for doc in docs:
            if doc.id in seen:
                raise ValueError(
                    f"hybrid_shuffle: duplicate document id {doc.id!r} "
                    f"in streams {seen[doc.id]} and {name}"
                )
            seen[doc.id] = name
        pool.extend(list(docs) * reps)
    if not pool:
        raise ValueError("hybrid_shuffle: all streams empty")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((plan.seed, plan.epoch))))
    order = np.arange(len(pool))
    rng.shuffle(order)
    return [pool[i] for i in order]


@dataclass
class Segment:
    """Provenance of a span [start, end) within one packed row."""

    doc_id: str
    kind: str
    domain: str
    start: int
    end: int


@dataclass
class PackedBatch:
    """Fixed-length token rows with a per-position loss mask."""

    tokens: np.ndarray  # (rows, seq_len) int64
    mask: np.ndarray    # (rows, seq_len) int8, 1 = contributes to the loss
    segments: list[list[Segment]]

    def __post_init__(self):
        if self.tokens.shape != self.mask.shape or self.tokens.ndim != 2:
            raise ValueError("PackedBatch: tokens and mask must be matching 2D arrays")

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


@dataclass
class PackResult:
    batches: list[PackedBatch]
    dropped_too_long: int
    total_rows: int

    def iter_rows(self):
        for batch in self.batches:
            for r in range(batch.rows):
                yield batch.tokens[r], batch.mask[r], batch.segments[r]


def _doc_tokens(doc: Document, loss_policy: str) -> tuple[list[int], list[int]]:
    """Token and mask-bit lists for one document (pretrain gets a trailing
    DOC_SEP; instruction masking follows the loss policy)."""
    if doc.kind == "pretrain":
        toks = tokenize(doc.text) + [DOC_SEP]
        return toks, [1] * len(toks)
    if doc.record is not None:
        toks, response_start = format_instruction(doc.record)
    else:
        toks, response_start = tokenize(doc.text), 0
    if loss_policy == "response_only":
        bits = [0 if i < response_start else 1 for i in range(len(toks))]
    else:
        bits = [1] * len(toks)
    return toks, bits


def pack(documents, seq_len: int, loss_policy: str = "full",
         batch_size: int | None = None) -> PackResult:
    """Pack an ordered document list into fixed-length rows.

    Pretrain text is concatenated with DOC_SEP and may span row boundaries;
    instruction samples are never split (longer than seq_len -> dropped and
    counted; when one does not fit the open row, that row is PAD-closed).
    PAD positions always carry mask 0.
    """
    if seq_len < 2:
        raise ValueError("pack: seq_len must be >= 2")
    if loss_policy not in LOSS_POLICIES:
        raise ValueError(f"pack: unknown loss_policy {loss_policy!r}")

    rows: list[tuple[list[int], list[int], list[tuple[str, str]]]] = []
    buf: list[tuple[int, int, tuple[str, str] | None]] = []
    dropped = 0

    def emit(padded: bool) -> None:
        row = buf[:seq_len]
        del buf[:seq_len]
        if padded:
            row = row + [(PAD, 0, None)] * (seq_len - len(row))
        rows.append((
            [t for t, _, _ in row],
            [m for _, m, _ in row],
            [owner for _, _, owner in row],
        ))

    for doc in documents:
        toks, bits = _doc_tokens(doc, loss_policy)
        owner = (doc.id, doc.kind, doc.domain)
        if doc.kind == "instruction":
            if len(toks) > seq_len:
                dropped += 1
                continue
            if len(buf) + len(toks) > seq_len:
                emit(padded=True)
        buf.extend((t, m, owner) for t, m in zip(toks, bits))
        while len(buf) >= seq_len:
            emit(padded=False)
    if buf:
        emit(padded=True)

    batches: list[PackedBatch] = []
    group = len(rows) if batch_size is None else batch_size
    for start in range(0, len(rows), max(group, 1)):
        chunk = rows[start : start + group]
        tokens = np.array([r[0] for r in chunk], dtype=np.int64)
        mask = np.array([r[1] for r in chunk], dtype=np.int8)
        segments = [_owners_to_segments(r[2]) for r in chunk]
        batches.append(PackedBatch(tokens=tokens, mask=mask, segments=segments))
    return PackResult(batches=batches, dropped_too_long=dropped, total_rows=len(rows))


def _owners_to_segments(owners) -> list[Segment]:
    segs: list[Segment] = []
    for pos, owner in enumerate(owners):
        if owner is None:
            continue
        if segs and segs[-1].doc_id == owner[0] and segs[-1].end == pos:
            segs[-1].end = pos + 1
        else:
            segs.append(Segment(doc_id=owner[0], kind=owner[1], domain=owner[2],
                                start=pos, end=pos + 1))
    return segs


@dataclass
class MixtureStats:
    doc_counts: dict[str, int]
    token_counts: dict[str, int]
    token_shares: dict[str, float]

    @property
    def total_docs(self) -> int:
        return sum(self.doc_counts.values())


def mixture_stats(documents) -> MixtureStats:
    """Per-stream document counts and raw-text token shares of an ordering."""
    doc_counts = {s: 0 for s in STREAMS}
    token_counts = {s: 0 for s in STREAMS}
    for doc in documents:
        doc_counts[doc.stream] += 1
        token_counts[doc.stream] += len(tokenize(doc.text))
    total = sum(token_counts.values())
    shares = {s: (token_counts[s] / total if total else 0.0) for s in STREAMS}
    return MixtureStats(doc_counts=doc_counts, token_counts=token_counts, token_shares=shares)


# --- JSON-lines interchange ---------------------------------------------------


def _format_errors(path, errors: list[str]) -> str:
    listing = "\n".join(errors[:20])
    more = f"\n... and {len(errors) - 20} more" if len(errors) > 20 else ""
    return f"malformed lines in {path}:\n{listing}{more}"


def load_documents(path) -> list[Document]:
    """Read one Document per JSONL line; malformed lines are reported with
    their line numbers."""
    docs: list[Document] = []
    errors: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(Document(
                    id=str(obj["id"]), text=obj["text"],
                    domain=obj["domain"], kind=obj["kind"],
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    if errors:
        raise ValueError(_format_errors(path, errors))
    return docs


def save_documents(path, documents) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in documents:
            obj = {"id": doc.id, "text": doc.text, "domain": doc.domain, "kind": doc.kind}
            f.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def load_instruction_records(path) -> list[InstructionRecord]:
    records: list[InstructionRecord] = []
    errors: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(InstructionRecord(
                    instruction=obj["instruction"], output=obj["output"],
                    input=obj.get("input") or None,
                    source=obj.get("source", "seed"),
                    provenance=obj.get("provenance"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    if errors:
        raise ValueError(_format_errors(path, errors))
    return records


def save_instruction_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "instruction": rec.instruction,
                "input": rec.input,
                "output": rec.output,
                "source": rec.source,
                "provenance": rec.provenance,
            }
            f.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def records_as_documents(records, domain: str, id_prefix: str) -> list[Document]:
    """Wrap instruction records as corpus documents with stable derived ids."""
    return [
        instruction_document(rec, doc_id=f"{id_prefix}#{i}", domain=domain)
        for i, rec in enumerate(records)
    ]


def load_corpus_dir(dirpath) -> dict[str, list[Document]]:
    """Load the four stream files from a corpus directory.

    Layout: <stream>.jsonl per stream (general_pretrain, financial_pretrain,
    general_instruction, financial_instruction); pretrain files hold
    Documents, instruction files hold InstructionRecords. Missing files are
    empty streams.
    """
    from pathlib import Path

    base = Path(dirpath)
    if not base.is_dir():
        raise ValueError(f"corpus dir not found: {base}")
    streams: dict[str, list[Document]] = {}
    for stream in STREAMS:
        domain, kind = stream.rsplit("_", 1)
        path = base / f"{stream}.jsonl"
        if not path.exists():
            streams[stream] = []
            continue
        if kind == "pretrain":
            docs = load_documents(path)
            for doc in docs:
                if doc.stream != stream:
                    raise ValueError(
                        f"{path}: document {doc.id!r} is tagged "
                        f"{doc.domain}/{doc.kind}, expected stream {stream}"
                    )
            streams[stream] = docs
        else:
            records = load_instruction_records(path)
            streams[stream] = records_as_documents(records, domain=domain, id_prefix=stream)
    return streams
