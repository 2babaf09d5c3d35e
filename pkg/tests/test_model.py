"""Decoder model contracts: ALiBi geometry, causality, the forward pipeline
against an independent straight-line oracle, chain-rule log-probabilities,
exact parameter counting, and the checkpoint container."""

import itertools
import math

import numpy as np
import pytest

from hybridlm.model import (
    ModelConfig,
    alibi_bias,
    alibi_slopes,
    count_params,
    forward_logits,
    greedy_generate,
    init_params,
    load_checkpoint,
    masked_loss_and_grads,
    param_names,
    param_shapes,
    save_checkpoint,
    sequence_log_prob,
    zero_params,
)

from util import finite_diff_param_grads, tiny_config


class TestAlibiSlopes:
    def test_eight_heads_geometric(self):
        expected = [2.0 ** (-i) for i in range(1, 9)]
        np.testing.assert_allclose(alibi_slopes(8), expected, rtol=1e-15)

    def test_single_head(self):
        np.testing.assert_allclose(alibi_slopes(1), [2.0**-8], rtol=1e-15)

    def test_112_heads_reference_extension(self):
        slopes = alibi_slopes(112)
        assert len(slopes) == 112
        head, tail = slopes[:64], slopes[64:]
        np.testing.assert_allclose(head, (2.0 ** (-8.0 / 64)) ** np.arange(1, 65), rtol=1e-13)
        doubled_ratio = 2.0 ** (-8.0 / 128)
        np.testing.assert_allclose(tail, doubled_ratio ** np.arange(1, 96, 2), rtol=1e-13)
        assert all(a > b for a, b in zip(head, head[1:]))
        assert all(a > b for a, b in zip(tail, tail[1:]))

    def test_zero_heads_rejected(self):
        with pytest.raises(ValueError):
            alibi_slopes(0)


class TestAlibiBias:
    def test_zero_on_diagonal(self):
        bias = alibi_bias(5, 3)
        for h in range(3):
            np.testing.assert_array_equal(np.diag(bias[h]), np.zeros(5))

    def test_distance_scaling(self):
        bias = alibi_bias(4, 1)
        slope = alibi_slopes(1)[0]
        assert bias[0, 3, 1] == -slope * 2.0
        # a head with slope 1/2 gives exactly -1.0 at distance 2
        bias8 = alibi_bias(4, 8)
        assert bias8[0, 3, 1] == -1.0

    def test_future_positions_are_minus_inf(self):
        bias = alibi_bias(4, 2)
        for h, q, k in itertools.product(range(2), range(4), range(4)):
            if k > q:
                assert bias[h, q, k] == -np.inf
            else:
                assert np.isfinite(bias[h, q, k])

    def test_translation_structure(self):
        bias = alibi_bias(6, 4)
        for h in range(4):
            for q in range(6):
                for k in range(q + 1):
                    assert bias[h, q, k] == bias[h, q - k, 0]


def _oracle_forward(params, config, tokens):
    """Straight-line scalar-loop reference of the whole pipeline; shares no
    code with the model module."""
    T = len(tokens)
    h = config.hidden_dim
    H = config.attention_heads
    d = h // H
    eps = 1e-5

    def ln(vec, g, b):
        mu = sum(vec) / len(vec)
        var = sum((a - mu) ** 2 for a in vec) / len(vec)
        return [g[j] * (vec[j] - mu) / math.sqrt(var + eps) + b[j] for j in range(len(vec))]

    def gelu1(a):
        return a * 0.5 * (1.0 + math.erf(a / math.sqrt(2.0)))

    if H & (H - 1) == 0:
        slopes = [2.0 ** (-8.0 * (i + 1) / H) for i in range(H)]
    else:
        raise NotImplementedError("oracle only handles power-of-two heads")

    x = []
    for t in range(T):
        emb = [params["embed"][tokens[t]][j] for j in range(h)]
        x.append(ln(emb, params["embed_ln_g"], params["embed_ln_b"]))

    for i in range(config.layers):
        L = f"L{i}."
        a_in = [ln(row, params[L + "ln1_g"], params[L + "ln1_b"]) for row in x]
        qkv = [
            [sum(a_in[t][j] * params[L + "qkv_w"][j][c] for j in range(h))
             + params[L + "qkv_b"][c] for c in range(3 * h)]
            for t in range(T)
        ]
        new_x = []
        for t in range(T):
            ctx = [0.0] * h
            for head in range(H):
                q = qkv[t][head * d : (head + 1) * d]
                scores = []
                for k in range(t + 1):
                    kvec = qkv[k][h + head * d : h + (head + 1) * d]
                    dot = sum(q[j] * kvec[j] for j in range(d)) / math.sqrt(d)
                    scores.append(dot - slopes[head] * (t - k))
                mx = max(scores)
                exps = [math.exp(s - mx) for s in scores]
                z = sum(exps)
                probs = [e / z for e in exps]
                for k in range(t + 1):
                    vvec = qkv[k][2 * h + head * d : 2 * h + (head + 1) * d]
                    for j in range(d):
                        ctx[head * d + j] += probs[k] * vvec[j]
            attn = [
                sum(ctx[j] * params[L + "attn_out_w"][j][c] for j in range(h))
                + params[L + "attn_out_b"][c]
                for c in range(h)
            ]
            new_x.append([x[t][c] + attn[c] for c in range(h)])
        x = new_x

        new_x = []
        for t in range(T):
            m_in = ln(x[t], params[L + "ln2_g"], params[L + "ln2_b"])
            up = [
                gelu1(sum(m_in[j] * params[L + "mlp_up_w"][j][c] for j in range(h))
                      + params[L + "mlp_up_b"][c])
                for c in range(4 * h)
            ]
            down = [
                sum(up[j] * params[L + "mlp_down_w"][j][c] for j in range(4 * h))
                + params[L + "mlp_down_b"][c]
                for c in range(h)
            ]
            new_x.append([x[t][c] + down[c] for c in range(h)])
        x = new_x

    logits = []
    for t in range(T):
        xf = ln(x[t], params["final_ln_g"], params["final_ln_b"])
        logits.append([
            sum(xf[j] * params["embed"][v][j] for j in range(h))
            for v in range(config.vocab_size)
        ])
    return np.array(logits)


class TestForward:
    def test_matches_straight_line_oracle(self):
        config = tiny_config(layers=1, hidden=4, heads=1, vocab=8, seq_len=8)
        params = init_params(config, seed=11)
        tokens = [3, 1, 4, 1, 5]
        fast = forward_logits(params, config, tokens)
        slow = _oracle_forward(params, config, tokens)
        np.testing.assert_allclose(fast, slow, rtol=1e-9, atol=1e-12)

    def test_oracle_two_layers_two_heads(self):
        config = tiny_config(layers=2, hidden=8, heads=2, vocab=6, seq_len=8)
        params = init_params(config, seed=2)
        tokens = [0, 5, 2, 3]
        np.testing.assert_allclose(
            forward_logits(params, config, tokens),
            _oracle_forward(params, config, tokens),
            rtol=1e-9, atol=1e-12,
        )

    def test_zero_params_uniform(self):
        config = tiny_config(vocab=8)
        params = zero_params(config)
        logits = forward_logits(params, config, [1, 2, 3])
        np.testing.assert_array_equal(logits, np.zeros((3, 8)))

    def test_causality_bit_exact(self):
        config = tiny_config(layers=2, hidden=8, heads=2, vocab=12, seq_len=16)
        params = init_params(config, seed=4)
        rng = np.random.default_rng(9)
        for _ in range(25):
            tokens = rng.integers(0, 12, size=10)
            t = int(rng.integers(1, 9))
            edited = tokens.copy()
            edited[t:] = rng.integers(0, 12, size=10 - t)
            base = forward_logits(params, config, tokens)
            after = forward_logits(params, config, edited)
            assert np.array_equal(base[:t], after[:t])

    def test_token_out_of_range(self):
        config = tiny_config(vocab=8)
        with pytest.raises(ValueError):
            forward_logits(init_params(config, 0), config, [0, 8])

    def test_sequence_too_long(self):
        config = tiny_config(vocab=8, seq_len=4)
        with pytest.raises(ValueError):
            forward_logits(init_params(config, 0), config, [0] * 5)


class TestSequenceLogProb:
    def test_zero_model_uniform_chain(self):
        config = tiny_config(vocab=4)
        got = sequence_log_prob(zero_params(config), config, [0, 1, 2])
        assert abs(got - 2 * math.log(0.25)) < 1e-12

    def test_chain_of_length_one(self):
        config = tiny_config(vocab=6)
        params = init_params(config, seed=1)
        logits = forward_logits(params, config, [2, 4])
        probs = np.exp(logits[0] - logits[0].max())
        probs /= probs.sum()
        assert abs(sequence_log_prob(params, config, [2, 4]) - math.log(probs[4])) < 1e-12

    def test_continuations_sum_to_one(self):
        config = tiny_config(layers=1, hidden=8, heads=2, vocab=8, seq_len=4)
        params = init_params(config, seed=3)
        total = 0.0
        for w2 in range(8):
            for w3 in range(8):
                total += math.exp(sequence_log_prob(params, config, [5, w2, w3]))
        assert abs(total - 1.0) <= 1e-9

    def test_always_nonpositive(self):
        config = tiny_config(vocab=8)
        params = init_params(config, seed=7)
        rng = np.random.default_rng(0)
        for _ in range(20):
            seq = rng.integers(0, 8, size=rng.integers(2, 8))
            assert sequence_log_prob(params, config, seq) <= 0.0

    def test_too_short(self):
        config = tiny_config(vocab=8)
        with pytest.raises(ValueError):
            sequence_log_prob(init_params(config, 0), config, [1])


class TestCountParams:
    def test_7b_preset_exact(self):
        config = ModelConfig(layers=30, hidden_dim=4096, attention_heads=32,
                             vocab_size=250_680, embedding_rows=250_880)
        assert count_params(config) == 7_069_016_064

    def test_176b_preset_exact(self):
        config = ModelConfig(layers=70, hidden_dim=14336, attention_heads=112,
                             vocab_size=250_680, embedding_rows=250_880)
        assert count_params(config) == 176_247_271_424

    def test_hand_counted_tiny(self):
        config = ModelConfig(layers=1, hidden_dim=4, attention_heads=1,
                             vocab_size=8, embedding_rows=8)
        # embed 32 + embed LN 8 + layer (12*16 + 13*4 = 244) + final LN 8
        assert count_params(config) == 292

    def test_matches_allocated_shapes(self):
        config = tiny_config(layers=3, hidden=8, heads=2, vocab=11, rows=13)
        total = sum(int(np.prod(param_shapes(config)[n])) for n in param_names(config))
        assert total == count_params(config)

    def test_untied_adds_output_matrix(self):
        tied = tiny_config(vocab=11)
        untied = ModelConfig(layers=1, hidden_dim=8, attention_heads=2,
                             vocab_size=11, tied_embeddings=False)
        assert count_params(untied) == count_params(tied) + 11 * 8


class TestTiedEmbeddings:
    def test_row_mutation_affects_lookup_and_logit_column(self):
        config = tiny_config(vocab=8)
        params = init_params(config, seed=5)
        tokens = [1, 2, 3]
        before = forward_logits(params, config, tokens)
        # non-uniform bump: a constant shift would be erased by the embedding
        # LayerNorm on the input side and by the zero-mean final-LN output on
        # the logit side
        params["embed"][2, 0] += 0.5
        after = forward_logits(params, config, tokens)
        # column 2 changes everywhere (output side)
        assert not np.allclose(before[:, 2], after[:, 2])
        # rows at positions >= 1 change (input side: token 2 sits at position 1)
        assert not np.allclose(before[1], after[1])
        # row 0 reads token 1, whose embedding did not move, but its logit
        # column 2 did; every other column of row 0 is unchanged
        cols = [c for c in range(8) if c != 2]
        np.testing.assert_array_equal(before[0][cols], after[0][cols])


class TestGradients:
    def test_gradcheck_small_model(self):
        config = tiny_config(layers=2, hidden=8, heads=2, vocab=10, seq_len=8)
        params = init_params(config, seed=13)
        rng = np.random.default_rng(31)
        tokens = rng.integers(0, 10, size=(2, 5))
        mask = np.ones_like(tokens)
        mask[1, 2] = 0
        loss, grads, _ = masked_loss_and_grads(params, config, tokens, mask)
        fd = finite_diff_param_grads(params, config, tokens, mask)
        for name in params:
            denom = max(np.linalg.norm(fd[name]), 1e-12)
            rel = np.linalg.norm(fd[name] - grads[name]) / denom
            assert rel < 1e-4, f"{name}: rel={rel:.3e}"


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        config = tiny_config(layers=2, hidden=8, heads=2, vocab=9, rows=12)
        params = init_params(config, seed=21)
        extras = {"adam.m.embed": np.random.default_rng(0).normal(size=(12, 8))}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, config, params, metadata={"note": "x"}, extras=extras)
        ckpt = load_checkpoint(path)
        assert ckpt.config == config
        assert ckpt.metadata == {"note": "x"}
        for name, arr in params.items():
            assert np.array_equal(ckpt.params[name], arr)
        assert np.array_equal(ckpt.extras["adam.m.embed"], extras["adam.m.embed"])

        path2 = tmp_path / "model2.ckpt"
        save_checkpoint(path2, ckpt.config, ckpt.params, metadata=ckpt.metadata,
                        extras=ckpt.extras)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestGenerate:
    def test_greedy_is_deterministic_and_valid(self):
        config = tiny_config(vocab=8, seq_len=16)
        params = init_params(config, seed=2)
        a = greedy_generate(params, config, [1, 2], max_new_tokens=6)
        b = greedy_generate(params, config, [1, 2], max_new_tokens=6)
        assert a == b
        assert len(a) == 8
        assert all(0 <= t < 8 for t in a)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(layers=1, hidden_dim=10, attention_heads=3, vocab_size=8)

    def test_rows_at_least_vocab(self):
        with pytest.raises(ValueError):
            ModelConfig(layers=1, hidden_dim=8, attention_heads=2,
                        vocab_size=10, embedding_rows=9)

    def test_rows_default_to_vocab(self):
        config = ModelConfig(layers=1, hidden_dim=8, attention_heads=2, vocab_size=10)
        assert config.embedding_rows == 10
