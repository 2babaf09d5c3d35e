"""Shared test fixtures: tiny configs, synthetic corpora, and the
finite-difference oracle used by every gradient check."""

import numpy as np

from hybridlm.corpus import Document, InstructionRecord, instruction_document
from hybridlm.model import ModelConfig, masked_loss_sum

GENERAL_ALPHABET = "abcdefghijklm"
FINANCIAL_ALPHABET = "nopqrstuvwxyz"


def tiny_config(layers=1, hidden=8, heads=2, vocab=16, seq_len=32, rows=0) -> ModelConfig:
    return ModelConfig(layers=layers, hidden_dim=hidden, attention_heads=heads,
                       vocab_size=vocab, embedding_rows=rows, seq_len=seq_len)


def finite_diff_param_grads(params, config, tokens, mask, h=1e-5):
    """Central finite differences of mean masked cross-entropy for every
    parameter entry. Independent of the analytic backward path: only the
    forward loss is evaluated."""
    def loss():
        ce, n = masked_loss_sum(params, config, tokens, mask)
        return ce / n

    grads = {}
    for name, p in params.items():
        fd = np.zeros_like(p)
        flat = p.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        grads[name] = fd
    return grads


def word_vocabulary(alphabet: str, size: int, rng) -> list[str]:
    return ["".join(rng.choice(list(alphabet), size=rng.integers(2, 5))) for _ in range(size)]


def synthetic_text(alphabet: str, n_words: int, rng, vocab_size: int = 24) -> str:
    """Repetitive word text over one alphabet: learnable by a tiny model."""
    vocab = word_vocabulary(alphabet, vocab_size, rng)
    weights = 1.0 / np.arange(1, vocab_size + 1)
    weights /= weights.sum()
    picks = rng.choice(vocab_size, size=n_words, p=weights)
    return " ".join(vocab[i] for i in picks)


def make_pretrain_docs(domain: str, alphabet: str, n_docs: int, seed: int,
                       words_per_doc: int = 40, id_prefix: str = "") -> list[Document]:
    rng = np.random.default_rng(seed)
    return [
        Document(id=f"{id_prefix}{domain[0]}p{i}",
                 text=synthetic_text(alphabet, words_per_doc, rng),
                 domain=domain, kind="pretrain")
        for i in range(n_docs)
    ]


def make_instruction_docs(domain: str, alphabet: str, n_docs: int, seed: int,
                          id_prefix: str = "") -> list[Document]:
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        rec = InstructionRecord(
            instruction=synthetic_text(alphabet, 4, rng),
            output=synthetic_text(alphabet, 6, rng),
            source="seed",
        )
        docs.append(instruction_document(rec, doc_id=f"{id_prefix}{domain[0]}i{i}", domain=domain))
    return docs


def two_domain_streams(seed: int, n_pretrain: int = 16, n_instruction: int = 4,
                       words_per_doc: int = 40) -> dict[str, list[Document]]:
    """Four streams over disjoint general/financial alphabets."""
    return {
        "general_pretrain": make_pretrain_docs(
            "general", GENERAL_ALPHABET, n_pretrain, seed, words_per_doc),
        "financial_pretrain": make_pretrain_docs(
            "financial", FINANCIAL_ALPHABET, n_pretrain, seed + 1, words_per_doc),
        "general_instruction": make_instruction_docs(
            "general", GENERAL_ALPHABET, n_instruction, seed + 2),
        "financial_instruction": make_instruction_docs(
            "financial", FINANCIAL_ALPHABET, n_instruction, seed + 3),
    }


def eval_docs_for(domain: str, seed: int, n_docs: int = 6) -> list[Document]:
    alphabet = GENERAL_ALPHABET if domain == "general" else FINANCIAL_ALPHABET
    return make_pretrain_docs(domain, alphabet, n_docs, seed, id_prefix="eval-")
