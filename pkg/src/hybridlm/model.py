"""Decoder-only transformer with ALiBi attention biases and embedding LayerNorm.

Pre-norm blocks, fused QKV, GELU MLP, tied input/output embeddings. Forward
and gradients are hand-rolled over float64 NumPy with the hot elementwise and
reduction steps delegated to ``hybridlm.kernels``; matmuls go through BLAS.

The checkpoint container written here is self-describing: a JSON header with
the config, format version, endianness, and an ordered array manifest,
followed by raw little-endian float64 array bytes.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"HLMCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden_dim: int
    attention_heads: int
    vocab_size: int
    embedding_rows: int = 0  # 0 means "no padding": vocab_size rows
    seq_len: int = 2048
    tied_embeddings: bool = True

    def __post_init__(self):
        if self.embedding_rows == 0:
            object.__setattr__(self, "embedding_rows", self.vocab_size)
        if self.layers < 1 or self.hidden_dim < 1 or self.attention_heads < 1:
            raise ValueError("ModelConfig: layers, hidden_dim, attention_heads must be >= 1")
        if self.hidden_dim % self.attention_heads != 0:
            raise ValueError(
                f"ModelConfig: hidden_dim {self.hidden_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.embedding_rows < self.vocab_size:
            raise ValueError("ModelConfig: embedding_rows must be >= vocab_size")
        if self.seq_len < 1:
            raise ValueError("ModelConfig: seq_len must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.attention_heads


def param_names(config: ModelConfig) -> list[str]:
    """Canonical parameter order; checkpoints store arrays in this order."""
    names = ["embed", "embed_ln_g", "embed_ln_b"]
    for i in range(config.layers):
        names += [
            f"L{i}.ln1_g", f"L{i}.ln1_b",
            f"L{i}.qkv_w", f"L{i}.qkv_b",
            f"L{i}.attn_out_w", f"L{i}.attn_out_b",
            f"L{i}.ln2_g", f"L{i}.ln2_b",
            f"L{i}.mlp_up_w", f"L{i}.mlp_up_b",
            f"L{i}.mlp_down_w", f"L{i}.mlp_down_b",
        ]
    names += ["final_ln_g", "final_ln_b"]
    if not config.tied_embeddings:
        names.append("lm_head")
    return names


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (config.embedding_rows, h),
        "embed_ln_g": (h,), "embed_ln_b": (h,),
        "final_ln_g": (h,), "final_ln_b": (h,),
    }
    for i in range(config.layers):
        shapes[f"L{i}.ln1_g"] = (h,)
        shapes[f"L{i}.ln1_b"] = (h,)
        shapes[f"L{i}.qkv_w"] = (h, 3 * h)
        shapes[f"L{i}.qkv_b"] = (3 * h,)
        shapes[f"L{i}.attn_out_w"] = (h, h)
        shapes[f"L{i}.attn_out_b"] = (h,)
        shapes[f"L{i}.ln2_g"] = (h,)
        shapes[f"L{i}.ln2_b"] = (h,)
        shapes[f"L{i}.mlp_up_w"] = (h, 4 * h)
        shapes[f"L{i}.mlp_up_b"] = (4 * h,)
        shapes[f"L{i}.mlp_down_w"] = (4 * h, h)
        shapes[f"L{i}.mlp_down_b"] = (h,)
    if not config.tied_embeddings:
        shapes["lm_head"] = (config.vocab_size, h)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Exact parameter total as a Python int (no overflow at 176B scale)."""
    h = config.hidden_dim
    total = config.embedding_rows * h + 2 * h  # embedding + embedding LN
    total += config.layers * (12 * h * h + 13 * h)
    total += 2 * h  # final LN
    if not config.tied_embeddings:
        total += config.vocab_size * h
    return total


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seed-deterministic init: N(0, 0.02) embeddings, N(0, 0.02/sqrt(2L))
    projections, unit LN gains, zero biases."""
    rng = np.random.default_rng(seed)
    proj_std = 0.02 / np.sqrt(2.0 * config.layers)
    shapes = param_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        shape = shapes[name]
        if name in ("embed", "lm_head"):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith("_g"):
            params[name] = np.ones(shape)
        elif name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, proj_std, size=shape)
    return params


def zero_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """All-zero parameter set (uniform next-token model); LN gains stay zero too."""
    shapes = param_shapes(config)
    return {n: np.zeros(shapes[n]) for n in param_names(config)}


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Per-head linear-bias slopes.

    For a power-of-two head count n: 2**(-8*i/n) for i = 1..n. Otherwise the
    slopes of the largest power of two below n, extended with the odd-indexed
    entries of the doubled-length sequence.
    """
    if n_heads < 1:
        raise ValueError("alibi_slopes: n_heads must be >= 1")

    def power_of_two_slopes(n):
        ratio = 2.0 ** (-8.0 / n)
        return ratio ** np.arange(1, n + 1)

    if n_heads & (n_heads - 1) == 0:
        return power_of_two_slopes(n_heads)
    base = 1 << (n_heads.bit_length() - 1)
    head = power_of_two_slopes(base)
    tail = power_of_two_slopes(2 * base)[0::2][: n_heads - base]
    return np.concatenate([head, tail])


def alibi_bias(seq_len: int, n_heads: int) -> np.ndarray:
    """[head, query, key] additive attention bias: -slope * (q - k) for
    k <= q, -inf above the diagonal (causal exclusion)."""
    if seq_len < 1:
        raise ValueError("alibi_bias: seq_len must be >= 1")
    slopes = alibi_slopes(n_heads)
    pos = np.arange(seq_len)
    dist = (pos[:, None] - pos[None, :]).astype(np.float64)
    bias = -slopes[:, None, None] * dist[None, :, :]
    bias[:, pos[:, None] < pos[None, :]] = -np.inf
    return bias


def _validate_tokens(seq, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(seq, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] < 1:
        raise ValueError("token sequence must be a non-empty 1D index list")
    if tokens.shape[0] > config.seq_len:
        raise ValueError(f"sequence length {tokens.shape[0]} exceeds seq_len {config.seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token index out of range for vocab_size {config.vocab_size}")
    return tokens


def _forward(params, config: ModelConfig, tokens: np.ndarray, want_cache: bool):
    """Batched forward over (B, S) token ids. Returns (logits, cache)."""
    B, S = tokens.shape
    h = config.hidden_dim
    H = config.attention_heads
    d = config.head_dim
    scale = 1.0 / np.sqrt(d)
    bias = alibi_bias(S, H)[None]  # (1,H,S,S), broadcasts over batch

    cache = {"tokens": tokens, "layers": []} if want_cache else None

    emb = params["embed"][tokens.ravel()].reshape(B, S, h)
    x, xhat_e, rstd_e = kernels.layer_norm(emb, params["embed_ln_g"], params["embed_ln_b"], LN_EPS)
    if want_cache:
        cache["xhat_e"], cache["rstd_e"] = xhat_e, rstd_e

    for i in range(config.layers):
        L = f"L{i}."
        a_in, xhat1, rstd1 = kernels.layer_norm(x, params[L + "ln1_g"], params[L + "ln1_b"], LN_EPS)
        qkv = a_in @ params[L + "qkv_w"] + params[L + "qkv_b"]
        q = qkv[..., 0 * h : 1 * h].reshape(B, S, H, d).transpose(0, 2, 1, 3)
        k = qkv[..., 1 * h : 2 * h].reshape(B, S, H, d).transpose(0, 2, 1, 3)
        v = qkv[..., 2 * h : 3 * h].reshape(B, S, H, d).transpose(0, 2, 1, 3)
        scores = q @ k.swapaxes(-1, -2) * scale + bias
        probs = kernels.softmax(scores)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, S, h)
        x1 = x + ctx @ params[L + "attn_out_w"] + params[L + "attn_out_b"]

        m_in, xhat2, rstd2 = kernels.layer_norm(x1, params[L + "ln2_g"], params[L + "ln2_b"], LN_EPS)
        u = m_in @ params[L + "mlp_up_w"] + params[L + "mlp_up_b"]
        a = kernels.gelu(u)
        x2 = x1 + a @ params[L + "mlp_down_w"] + params[L + "mlp_down_b"]

        if want_cache:
            cache["layers"].append({
                "x": x, "a_in": a_in, "xhat1": xhat1, "rstd1": rstd1,
                "q": q, "k": k, "v": v, "probs": probs,
                "ctx": ctx, "x1": x1,
                "m_in": m_in, "xhat2": xhat2, "rstd2": rstd2, "u": u, "a": a,
            })
        x = x2

    xf, xhat_f, rstd_f = kernels.layer_norm(x, params["final_ln_g"], params["final_ln_b"], LN_EPS)
    if config.tied_embeddings:
        logits = xf @ params["embed"][: config.vocab_size].T
    else:
        logits = xf @ params["lm_head"].T
    if want_cache:
        cache["xhat_f"], cache["rstd_f"], cache["xf"] = xhat_f, rstd_f, xf
    return logits, cache


def _backward(params, config: ModelConfig, dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for all parameters given dL/dlogits (B,S,V)."""
    B, S, V = dlogits.shape
    h = config.hidden_dim
    H = config.attention_heads
    d = config.head_dim
    scale = 1.0 / np.sqrt(d)
    tokens = cache["tokens"]

    shapes = param_shapes(config)
    grads = {n: np.zeros(shapes[n]) for n in param_names(config)}

    dlog2 = dlogits.reshape(-1, V)
    xf2 = cache["xf"].reshape(-1, h)
    if config.tied_embeddings:
        grads["embed"][:V] += dlog2.T @ xf2
        dxf = dlogits @ params["embed"][:V]
    else:
        grads["lm_head"] += dlog2.T @ xf2
        dxf = dlogits @ params["lm_head"]

    dx, dgf, dbf = kernels.layer_norm_grad(dxf, cache["xhat_f"], cache["rstd_f"], params["final_ln_g"])
    grads["final_ln_g"] += dgf
    grads["final_ln_b"] += dbf

    for i in reversed(range(config.layers)):
        L = f"L{i}."
        c = cache["layers"][i]

        # x2 = x1 + gelu(m_in @ Wu + bu) @ Wd + bd
        dmlp2 = dx.reshape(-1, h)
        grads[L + "mlp_down_w"] += c["a"].reshape(-1, 4 * h).T @ dmlp2
        grads[L + "mlp_down_b"] += dmlp2.sum(axis=0)
        da = dx @ params[L + "mlp_down_w"].T
        du = kernels.gelu_grad(c["u"], da)
        du2 = du.reshape(-1, 4 * h)
        grads[L + "mlp_up_w"] += c["m_in"].reshape(-1, h).T @ du2
        grads[L + "mlp_up_b"] += du2.sum(axis=0)
        dm_in = du @ params[L + "mlp_up_w"].T
        dx1_ln, dg2, db2 = kernels.layer_norm_grad(dm_in, c["xhat2"], c["rstd2"], params[L + "ln2_g"])
        grads[L + "ln2_g"] += dg2
        grads[L + "ln2_b"] += db2
        dx1 = dx + dx1_ln

        # x1 = x + (probs @ v reassembled) @ Wo + bo
        dattn2 = dx1.reshape(-1, h)
        grads[L + "attn_out_w"] += c["ctx"].reshape(-1, h).T @ dattn2
        grads[L + "attn_out_b"] += dattn2.sum(axis=0)
        dctx = (dx1 @ params[L + "attn_out_w"].T).reshape(B, S, H, d).transpose(0, 2, 1, 3)
        dprobs = dctx @ c["v"].swapaxes(-1, -2)
        dv = c["probs"].swapaxes(-1, -2) @ dctx
        dscores = kernels.softmax_grad(c["probs"], dprobs)
        dq = dscores @ c["k"] * scale
        dk = dscores.swapaxes(-1, -2) @ c["q"] * scale
        dqkv = np.concatenate(
            [g.transpose(0, 2, 1, 3).reshape(B, S, h) for g in (dq, dk, dv)], axis=-1
        )
        dqkv2 = dqkv.reshape(-1, 3 * h)
        grads[L + "qkv_w"] += c["a_in"].reshape(-1, h).T @ dqkv2
        grads[L + "qkv_b"] += dqkv2.sum(axis=0)
        da_in = dqkv @ params[L + "qkv_w"].T
        dx_ln, dg1, db1 = kernels.layer_norm_grad(da_in, c["xhat1"], c["rstd1"], params[L + "ln1_g"])
        grads[L + "ln1_g"] += dg1
        grads[L + "ln1_b"] += db1
        dx = dx1 + dx_ln

    demb, dge, dbe = kernels.layer_norm_grad(dx, cache["xhat_e"], cache["rstd_e"], params["embed_ln_g"])
    grads["embed_ln_g"] += dge
    grads["embed_ln_b"] += dbe
    np.add.at(grads["embed"], tokens.ravel(), demb.reshape(-1, h))
    return grads


def forward_logits(params, config: ModelConfig, seq) -> np.ndarray:
    """Logits for every prefix of seq: row t depends only on tokens <= t."""
    tokens = _validate_tokens(seq, config)
    logits, _ = _forward(params, config, tokens[None, :], want_cache=False)
    return logits[0]


def sequence_log_prob(params, config: ModelConfig, seq) -> float:
    """log p(w_2..w_T | w_1): sum of next-token log-probabilities.

    The first token is context only (no implicit BOS), so the chain has T-1
    terms and the result is always <= 0.
    """
    tokens = _validate_tokens(seq, config)
    if tokens.shape[0] < 2:
        raise ValueError("sequence_log_prob: need at least 2 tokens")
    logits = forward_logits(params, config, tokens)
    losses, _ = kernels.cross_entropy_rows(logits[:-1], tokens[1:])
    return float(-losses.sum())


def masked_loss_and_grads(params, config: ModelConfig, tokens: np.ndarray, mask: np.ndarray):
    """Mean masked next-token cross-entropy and its parameter gradients.

    tokens/mask are (B, S); position t+1 contributes iff mask[t+1] == 1, so
    position 0 of every row is context only. Returns (loss, grads, n_scored).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask)
    if tokens.shape != mask.shape or tokens.ndim != 2:
        raise ValueError("tokens and mask must be matching 2D arrays")
    if tokens.shape[1] < 2:
        raise ValueError("need sequences of length >= 2 to score next tokens")
    inputs = tokens[:, :-1]
    targets = tokens[:, 1:]
    tmask = mask[:, 1:].astype(np.float64)
    n_scored = int(tmask.sum())
    if n_scored == 0:
        raise ValueError("batch has zero masked-in target tokens")

    logits, cache = _forward(params, config, inputs, want_cache=True)
    losses, dlogits = kernels.cross_entropy_rows(logits, targets)
    w = tmask.ravel() / n_scored
    loss = float(losses @ w)
    dlogits *= w[:, None]
    grads = _backward(params, config, dlogits.reshape(logits.shape), cache)
    return loss, grads, n_scored


def masked_loss_sum(params, config: ModelConfig, tokens: np.ndarray, mask: np.ndarray):
    """Total masked next-token cross-entropy and the scored-token count.

    Evaluation path: no gradient bookkeeping. Same shift convention as
    masked_loss_and_grads.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask)
    if tokens.shape != mask.shape or tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ValueError("tokens and mask must be matching 2D arrays of width >= 2")
    tmask = mask[:, 1:].astype(np.float64).ravel()
    n_scored = int(tmask.sum())
    if n_scored == 0:
        return 0.0, 0
    logits, _ = _forward(params, config, tokens[:, :-1], want_cache=False)
    losses, _ = kernels.cross_entropy_rows(logits, tokens[:, 1:])
    return float(losses @ tmask), n_scored


def greedy_generate(params, config: ModelConfig, prompt, max_new_tokens: int,
                    temperature: float = 0.0, seed: int = 0) -> list[int]:
    """Greedy (or temperature-sampled) continuation; smoke-test quality only."""
    tokens = list(_validate_tokens(prompt, config))
    rng = np.random.default_rng(seed)
    for _ in range(max_new_tokens):
        window = tokens[-config.seq_len :]
        logits = forward_logits(params, config, window)[-1]
        if temperature <= 0.0:
            nxt = int(np.argmax(logits))
        else:
            p = kernels.softmax(logits / temperature)
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        tokens.append(nxt)
    return tokens


# --- checkpoint container ---------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params, metadata=None, extras=None) -> None:
    """Write the self-describing binary container; load(save(x)) is bit-identical."""
    metadata = metadata or {}
    extras = extras or {}
    names = param_names(config)
    missing = [n for n in names if n not in params]
    if missing:
        raise ValueError(f"save_checkpoint: missing params {missing}")
    manifest = [{"name": n, "shape": list(params[n].shape), "group": "param"} for n in names]
    manifest += [
        {"name": n, "shape": list(extras[n].shape), "group": "extra"} for n in sorted(extras)
    ]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "endianness": "little",
        "dtype": "float64",
        "config": asdict(config),
        "metadata": metadata,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for entry in manifest:
            source = params if entry["group"] == "param" else extras
            arr = np.ascontiguousarray(source[entry["name"]], dtype="<f8")
            f.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        config = ModelConfig(**header["config"])
        params: dict[str, np.ndarray] = {}
        extras: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
            (params if entry["group"] == "param" else extras)[entry["name"]] = arr
    return Checkpoint(config=config, params=params, metadata=header["metadata"], extras=extras)
