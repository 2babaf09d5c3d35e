"""Instruction synthesis: mock determinism, strict parsing, accounting,
dedup against a brute-force oracle, and budget safety."""

import itertools

import pytest

from hybridlm.corpus import Document, InstructionRecord
from hybridlm.datagen import (
    GenResult,
    LiveCompletionClient,
    MockCompletionClient,
    StructuredRecord,
    _parse_instruction_blocks,
    _parse_qa_pairs,
    dedup_filter,
    self_instruct_expand,
    self_qa_structured,
    self_qa_unstructured,
    trigram_jaccard,
)

SEEDS = [
    InstructionRecord(instruction="List three bond risks.", output="Duration, credit, liquidity."),
    InstructionRecord(instruction="Explain a margin call.", input="broker context",
                      output="A demand for more collateral."),
    InstructionRecord(instruction="Define market yield.", output="Return implied by price."),
]


class TemplateClient:
    """Echoes one fixed well-formed block per requested task."""

    max_in_flight = 1

    def __init__(self):
        self.calls = 0

    def complete(self, prompt, max_tokens=512):
        self.calls += 1
        import re
        n = int(re.search(r"Propose (\d+) new", prompt).group(1))
        blocks = [
            f"Instruction: Unique task number {self.calls}-{i}.\n"
            f"Output: Unique answer {self.calls}-{i}."
            for i in range(n)
        ]
        return "\n###\n".join(blocks)


class AlwaysMalformedClient:
    max_in_flight = 1

    def __init__(self):
        self.calls = 0

    def complete(self, prompt, max_tokens=512):
        self.calls += 1
        return "gibberish with no labels at all"


class TestSelfInstruct:
    def test_target_zero(self):
        result = self_instruct_expand(SEEDS, MockCompletionClient(0), target_count=0)
        assert result.records == []
        assert result.stats.client_calls == 0

    def test_template_client_hits_target_exactly(self):
        # numbered variants of one fixed scaffold: distinct, so with the
        # exact-duplicate-only threshold every block is accepted
        result = self_instruct_expand(SEEDS, TemplateClient(), target_count=7, seed=1,
                                      dedup_threshold=1.0)
        assert len(result.records) == 7
        assert all(r.source == "self_instruct" for r in result.records)
        stats = result.stats
        assert stats.emitted + stats.dropped_parse + stats.dropped_dedup == stats.generated

    def test_deterministic_under_seed(self):
        a = self_instruct_expand(SEEDS, MockCompletionClient(3), target_count=6, seed=9)
        b = self_instruct_expand(SEEDS, MockCompletionClient(3), target_count=6, seed=9)
        assert a.records == b.records
        assert a.stats.as_dict() == b.stats.as_dict()

    def test_records_satisfy_invariants(self):
        result = self_instruct_expand(SEEDS, MockCompletionClient(5), target_count=8, seed=2)
        for rec in result.records:
            assert rec.instruction and rec.output

    def test_budget_cap_on_hostile_client(self):
        client = AlwaysMalformedClient()
        result = self_instruct_expand(SEEDS, client, target_count=5, seed=0)
        assert result.records == []
        assert client.calls == 2 * 5 + 8  # documented hard cap
        assert result.stats.client_calls == client.calls

    def test_empty_seeds_rejected(self):
        with pytest.raises(ValueError):
            self_instruct_expand([], MockCompletionClient(0), target_count=3)

    def test_malformed_blocks_counted(self):
        client = MockCompletionClient(seed=1, malformed_rate=0.5)
        result = self_instruct_expand(SEEDS, client, target_count=6, seed=4)
        stats = result.stats
        assert stats.dropped_parse > 0
        assert stats.emitted + stats.dropped_parse + stats.dropped_dedup == stats.generated


DOC = Document(id="report-1", text="Quarterly revenue rose on bond yields.",
               domain="financial", kind="pretrain")


class TestSelfQA:
    def test_zero_pairs(self):
        result = self_qa_unstructured(DOC, MockCompletionClient(0), n_pairs=0)
        assert result.records == []
        assert result.stats.client_calls == 0

    def test_provenance_tagging(self):
        result = self_qa_unstructured(DOC, MockCompletionClient(1), n_pairs=4)
        assert len(result.records) == 4
        for rec in result.records:
            assert rec.provenance == DOC.id
            assert rec.source == "self_qa_unstructured"

    def test_gap_accounted_by_parse_failures(self):
        client = MockCompletionClient(seed=2, malformed_rate=0.4)
        result = self_qa_unstructured(DOC, client, n_pairs=10)
        stats = result.stats
        assert len(result.records) <= 10
        assert stats.emitted + stats.dropped_parse + stats.dropped_dedup == stats.generated
        assert 10 - stats.emitted == stats.dropped_parse

    def test_requires_pretrain_doc(self):
        bad = Document(id="x", text="t", domain="general", kind="instruction")
        with pytest.raises(ValueError):
            self_qa_unstructured(bad, MockCompletionClient(0), n_pairs=1)


class TestSelfQAStructured:
    def test_serialization_key_order_independent(self):
        a = StructuredRecord(entity="ACME", fields={"b": 2, "a": 1})
        b = StructuredRecord(entity="ACME", fields={"a": 1, "b": 2})
        assert a.serialize() == b.serialize()
        assert a.serialize() == "ACME\na: 1\nb: 2"

    def test_zero_pairs(self):
        rec = StructuredRecord(entity="ACME", fields={"sector": "banking"})
        result = self_qa_structured(rec, MockCompletionClient(0), n_pairs=0)
        assert result.records == []

    def test_deterministic_and_tagged(self):
        rec = StructuredRecord(entity="ACME", fields={"sector": "banking", "founded": 1999})
        a = self_qa_structured(rec, MockCompletionClient(7), n_pairs=3)
        b = self_qa_structured(rec, MockCompletionClient(7), n_pairs=3)
        assert a.records == b.records
        for r in a.records:
            assert r.source == "self_qa_structured"
            assert r.provenance == "struct:ACME"

    def test_empty_fields_rejected(self):
        with pytest.raises(ValueError):
            StructuredRecord(entity="ACME", fields={})


class TestParsers:
    def test_instruction_block_multiline_output(self):
        text = "Instruction: do it\nOutput: line one\nline two\n###\nInstruction: x\nOutput: y"
        records, failures = _parse_instruction_blocks(text)
        assert failures == 0
        assert records[0].output == "line one\nline two"
        assert len(records) == 2

    def test_instruction_block_failures(self):
        text = "Instruction: incomplete\n###\nrandom text\n###\nInstruction: ok\nOutput: fine"
        records, failures = _parse_instruction_blocks(text)
        assert len(records) == 1
        assert failures == 2

    def test_qa_pairs(self):
        pairs, failures = _parse_qa_pairs("Q: one?\nA: 1\nQ: two?\nA: 2")
        assert pairs == [("one?", "1"), ("two?", "2")]
        assert failures == 0

    def test_qa_unanswered_counts(self):
        pairs, failures = _parse_qa_pairs("Q: one?\nQ: two?\nA: 2\nQ: dangling?")
        assert pairs == [("two?", "2")]
        assert failures == 2


class TestDedup:
    def test_duplicate_free_unchanged(self):
        assert dedup_filter(SEEDS) == SEEDS

    def test_exact_duplicate_dropped(self):
        recs = [SEEDS[0], SEEDS[0]]
        assert dedup_filter(recs) == [SEEDS[0]]

    def test_threshold_one_only_exact(self):
        recs = [
            InstructionRecord(instruction="Describe the bond market today.", output="a"),
            InstructionRecord(instruction="Describe the bond market now.", output="b"),
            InstructionRecord(instruction="describe  THE bond market today.", output="c"),
        ]
        kept = dedup_filter(recs, threshold=1.0)
        # the whitespace/case variant normalizes to an exact duplicate
        assert [r.output for r in kept] == ["a", "b"]

    def test_matches_bruteforce_oracle(self):
        import numpy as np
        rng = np.random.default_rng(17)
        words = ["alpha", "beta", "gamma", "delta", "rate", "bond", "yield", "tax"]
        records = [
            InstructionRecord(
                instruction=" ".join(words[i] for i in rng.integers(0, len(words), 4)),
                output="x",
            )
            for _ in range(100)
        ]
        threshold = 0.7
        survivors = dedup_filter(records, threshold)

        # brute force: keep a record iff no EARLIER SURVIVOR duplicates it
        expected = []
        for rec in records:
            dup = False
            for prev in expected:
                same = prev.instruction.lower().split() == rec.instruction.lower().split()
                if same or trigram_jaccard(prev.instruction, rec.instruction) > threshold:
                    dup = True
                    break
            if not dup:
                expected.append(rec)
        assert survivors == expected

    def test_stable_order(self):
        kept = dedup_filter(SEEDS[::-1])
        assert kept == SEEDS[::-1]


class TestConcurrencyResequencing:
    def test_parallel_client_matches_sequential(self):
        class WideMock(MockCompletionClient):
            max_in_flight = 4

        doc = Document(id="d", text="markets " * 30, domain="financial", kind="pretrain")
        seq = self_qa_unstructured(doc, MockCompletionClient(3), n_pairs=5)
        par = self_qa_unstructured(doc, WideMock(3), n_pairs=5)
        assert seq.records == par.records


class TestLiveClient:
    def test_retries_then_succeeds(self):
        calls = []

        class Resp:
            status_code = 200

            def raise_for_status(self):
                pass

            def json(self):
                return {"completion": "Q: q?\nA: a."}

        def post(url, json=None, headers=None, timeout=None):
            calls.append(url)
            if len(calls) < 3:
                raise ConnectionError("transient")
            return Resp()

        client = LiveCompletionClient("http://svc/complete", retries=3,
                                      post=post, sleep=lambda s: None)
        assert client.complete("prompt") == "Q: q?\nA: a."
        assert len(calls) == 3

    def test_exhausted_retries_raise(self):
        def post(url, json=None, headers=None, timeout=None):
            raise ConnectionError("down")

        client = LiveCompletionClient("http://svc", retries=1,
                                      post=post, sleep=lambda s: None)
        with pytest.raises(RuntimeError, match="after 2 attempts"):
            client.complete("p")

    def test_token_header_from_env(self, monkeypatch):
        seen = {}

        class Resp:
            status_code = 200

            def raise_for_status(self):
                pass

            def json(self):
                return {"completion": "ok"}

        def post(url, json=None, headers=None, timeout=None):
            seen.update(headers)
            return Resp()

        monkeypatch.setenv("COMPLETION_API_TOKEN", "sekrit")
        client = LiveCompletionClient("http://svc", post=post, sleep=lambda s: None)
        client.complete("p")
        assert seen["Authorization"] == "Bearer sekrit"
