"""Attention oracles: mask structure, sparse/dense equivalence, backward passes."""

import numpy as np
import pytest

from warpworld.attention import (
    AttnStruct,
    BlockMask,
    RopeTables,
    block_sparse_attention,
    dense_masked_attention,
    dit_block_backward,
    dit_block_forward,
    expected_true_blocks,
    sparse_attention_bwd,
    sparse_attention_fwd,
)
from warpworld.nn import xavier_uniform


def brute_force_blocks(n, assignments):
    """Independent rule-by-rule mask construction (the test oracle)."""
    e = len(assignments)
    m = np.zeros((n + e, n + e), dtype=bool)
    for qb in range(n + e):
        for kb in range(n + e):
            q_noisy, k_noisy = qb < n, kb < n
            if q_noisy and k_noisy:
                m[qb, kb] = True
            elif q_noisy and not k_noisy:
                m[qb, kb] = assignments[kb - n] == qb + 1
            elif not q_noisy and not k_noisy:
                m[qb, kb] = qb == kb
            # clean -> noisy stays False
    return m


class TestBlockMask:
    def test_matches_brute_force_all_small_sizes(self, rng):
        for n in range(1, 7):
            for m_mem in range(0, 7):
                if n < 2 and m_mem > 0:
                    continue  # memory needs a frame >= 2 to attach to
                assignments = np.concatenate(
                    [np.arange(1, n + 1), rng.integers(2, n + 1, size=m_mem)]
                )
                bm = BlockMask(n, assignments, tokens_per_frame=4)
                np.testing.assert_array_equal(bm.blocks(), brute_force_blocks(n, assignments))
                assert bm.true_block_count() == expected_true_blocks(n, m_mem)

    def test_worked_examples(self):
        # N=1, M=0: self + ref-injection + ref-self = 3 blocks
        assert BlockMask(1, [1], 4).true_block_count() == 3
        # N=2, M=1 assigned to frame 2: 4 + 2 + 1 + 3 = 10 blocks
        assert BlockMask(2, [1, 2, 2], 4).true_block_count() == 10

    def test_clean_never_sees_noisy_or_other_entries(self, rng):
        bm = BlockMask(3, [1, 2, 3, 2, 3], 2)
        blocks = bm.blocks()
        assert not blocks[3:, :3].any()
        off_diag = blocks[3:, 3:] & ~np.eye(5, dtype=bool)
        assert not off_diag.any()

    def test_token_mask_expansion_and_key_validity(self):
        kv = np.array([True, False, True, True])  # entry tokens, p=2, E=2
        bm = BlockMask(1, [1, 1], tokens_per_frame=2, key_valid=kv)
        tm = bm.to_token_mask()
        assert tm.shape == (6, 6)
        # noisy queries (rows 0:2) see noisy keys and entry keys where valid
        np.testing.assert_array_equal(tm[0], [True, True, True, False, True, True])
        # entry 0 sees only itself, minus its invalid token
        np.testing.assert_array_equal(tm[2], [False, False, True, False, False, False])

    def test_validation(self):
        with pytest.raises(ValueError):
            BlockMask(2, [0, 1], 4)      # assignment below range
        with pytest.raises(ValueError):
            BlockMask(2, [1, 3], 4)      # beyond N
        with pytest.raises(ValueError):
            BlockMask(2, [1, 2], 4, key_valid=np.ones(3, dtype=bool))


class TestDenseMasked:
    def test_manual_softmax_oracle(self):
        q = np.array([[[1.0, 0.0]]])
        k = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        v = np.array([[[2.0, 0.0], [0.0, 4.0]]])
        mask = np.array([[True, True]])
        out = dense_masked_attention(q, k, v, mask)
        s = 1 / np.sqrt(2)
        w = np.exp([s, 0.0])
        w /= w.sum()
        np.testing.assert_allclose(out[0, 0], w[0] * v[0, 0] + w[1] * v[0, 1])

    def test_fully_masked_row_is_zero(self, rng):
        q = rng.normal(size=(3, 4))
        k = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 4))
        mask = np.ones((3, 5), dtype=bool)
        mask[1] = False
        out = dense_masked_attention(q, k, v, mask)
        np.testing.assert_array_equal(out[1], 0.0)
        assert np.abs(out[0]).max() > 0

    def test_output_in_value_envelope(self, rng):
        q = rng.normal(size=(2, 6, 8))
        k = rng.normal(size=(2, 9, 8))
        v = rng.normal(size=(2, 9, 8))
        mask = rng.random((6, 9)) < 0.6
        mask[:, 0] = True  # no empty rows
        out = dense_masked_attention(q, k, v, mask)
        assert (out <= v.max(axis=-2, keepdims=True) + 1e-12).all()
        assert (out >= v.min(axis=-2, keepdims=True) - 1e-12).all()


def random_config(rng, n=None, m=None, p=None, heads=None, batch=None, d=16):
    n = n or int(rng.integers(1, 5))
    m = 0 if n < 2 else (m if m is not None else int(rng.integers(0, 5)))
    p = p or int(rng.choice([1, 4, 16]))
    heads = heads or int(rng.integers(1, 3))
    batch = batch or int(rng.integers(1, 3))
    assignments = np.concatenate([np.arange(1, n + 1), rng.integers(2, n + 1, size=m)])
    key_valid = rng.random(len(assignments) * p) < 0.85
    bm = BlockMask(n, assignments, p, key_valid=key_valid)
    t = bm.n_tokens
    q, k, v = rng.normal(size=(3, batch, heads, t, d))
    return bm, q, k, v


class TestSparseEquivalence:
    def test_matches_dense_many_configs(self, rng):
        worst = 0.0
        for _ in range(25):
            bm, q, k, v = random_config(rng)
            sparse = block_sparse_attention(q, k, v, bm)
            dense = dense_masked_attention(q, k, v, bm.to_token_mask())
            worst = max(worst, np.abs(sparse - dense).max())
        assert worst < 1e-10  # float64 here; acceptance allows 1e-5

    def test_leading_dim_flexibility(self, rng):
        bm, q, k, v = random_config(rng, n=2, m=2, p=4, heads=2, batch=1)
        full = block_sparse_attention(q, k, v, bm)
        squeezed = block_sparse_attention(q[0], k[0], v[0], bm)
        np.testing.assert_allclose(full[0], squeezed, atol=1e-12)

    def test_memory_entry_permutation_invariance(self, rng):
        # permuting memory entries (tokens + assignments together) must not
        # change the noisy-stream output
        n, p, d = 3, 4, 16
        assignments = np.array([1, 2, 3, 2, 3, 2, 2])  # 3 refs + 4 memories
        bm = BlockMask(n, assignments, p)
        q, k, v = rng.normal(size=(3, 1, 2, bm.n_tokens, d))
        out = block_sparse_attention(q, k, v, bm)
        perm = np.array([2, 0, 3, 1])  # permute the memory entries only
        entry_order = np.concatenate([np.arange(3), 3 + perm])
        block_order = np.concatenate([np.arange(n), n + entry_order])
        tok = (block_order[:, None] * p + np.arange(p)).reshape(-1)
        bm2 = BlockMask(n, assignments[entry_order], p)
        out2 = block_sparse_attention(q[:, :, tok], k[:, :, tok], v[:, :, tok], bm2)
        tn = n * p
        np.testing.assert_allclose(out2[:, :, :tn], out[:, :, :tn], atol=1e-12)
        # clean outputs travel with their entries
        np.testing.assert_allclose(out2, out[:, :, tok], atol=1e-12)

    def test_invalid_keys_excluded_everywhere(self, rng):
        # making a clean token invalid must equal deleting its key column
        bm, q, k, v = random_config(rng, n=2, m=1, p=4, heads=1, batch=1)
        out = block_sparse_attention(q, k, v, bm)
        dense = dense_masked_attention(q, k, v, bm.to_token_mask())
        np.testing.assert_allclose(out, dense, atol=1e-12)
        # and a fully-invalid entry yields zero clean output rows for itself
        kv2 = bm.key_valid.copy()
        kv2[:] = False
        bm2 = BlockMask(bm.n_frames, bm.assignments, bm.tokens_per_frame, key_valid=kv2)
        out2 = block_sparse_attention(q, k, v, bm2)
        tn = bm.n_frames * bm.tokens_per_frame
        np.testing.assert_array_equal(out2[:, :, tn:], 0.0)


class TestSparseBackward:
    def _loss_and_grads(self, qn, kn, vn, qc, kci, kcs, vc, struct, wn, wc):
        out_n, out_c, cache = sparse_attention_fwd(qn, kn, vn, qc, kci, kcs, vc, struct)
        loss = (out_n * wn).sum() + (out_c * wc).sum()
        grads = sparse_attention_bwd(wn, wc, cache)
        return loss, grads

    def test_gradients_match_finite_differences(self, rng):
        b, h, n, p, e, d = 2, 2, 2, 3, 3, 16
        struct = AttnStruct(
            n_frames=n,
            tokens_per_frame=p,
            assigned=rng.integers(0, n, size=(b, e)),
            key_valid=rng.random((b, e, p)) < 0.8,
        )
        tensors = [rng.normal(size=(b, h, n * p, d)) for _ in range(3)]
        tensors += [rng.normal(size=(b, h, e * p, d)) for _ in range(4)]
        wn = rng.normal(size=(b, h, n * p, d))
        wc = rng.normal(size=(b, h, e * p, d))
        loss0, grads = self._loss_and_grads(*tensors, struct, wn, wc)
        eps = 1e-6
        for ti, (tensor, grad) in enumerate(zip(tensors, grads)):
            for _ in range(4):
                idx = tuple(rng.integers(0, s) for s in tensor.shape)
                tensor[idx] += eps
                lp, _ = self._loss_and_grads(*tensors, struct, wn, wc)
                tensor[idx] -= 2 * eps
                lm, _ = self._loss_and_grads(*tensors, struct, wn, wc)
                tensor[idx] += eps
                fd = (lp - lm) / (2 * eps)
                assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8), f"tensor {ti} at {idx}"


def make_block_params(rng, d, hidden=None, dtype=np.float64):
    hidden = hidden or 4 * d
    z = lambda *s: np.zeros(s, dtype=dtype)
    return {
        "mod.w": z(d, 6 * d),
        "mod.b": z(6 * d),
        "attn.qkv.w": xavier_uniform(rng, d, 3 * d, dtype),
        "attn.qkv.b": z(3 * d),
        "attn.out.w": xavier_uniform(rng, d, d, dtype),
        "attn.out.b": z(d),
        "cross.norm.g": np.ones(d, dtype=dtype),
        "cross.norm.b": z(d),
        "cross.q.w": xavier_uniform(rng, d, d, dtype),
        "cross.q.b": z(d),
        "cross.kv.w": xavier_uniform(rng, d, 2 * d, dtype),
        "cross.kv.b": z(2 * d),
        "cross.out.w": xavier_uniform(rng, d, d, dtype),
        "cross.out.b": z(d),
        "ffn.w1": xavier_uniform(rng, d, hidden, dtype),
        "ffn.b1": z(hidden),
        "ffn.w2": xavier_uniform(rng, hidden, d, dtype),
        "ffn.b2": z(d),
    }


def make_rope_tables(rng, h, tn, tc, hd):
    def tab(*shape):
        ang = rng.normal(scale=2.0, size=shape)
        return np.sin(ang), np.cos(ang)

    sn, cn = tab(h, tn, hd // 2)
    ss, cs = tab(1, h, tc, hd // 2)
    si, ci = tab(1, h, tc, hd // 2)
    return RopeTables(sn, cn, ss, cs, si, ci)


class TestDiTBlock:
    def _setup(self, rng, b=2, n=2, p=4, e=3, d=32, heads=2):
        struct = AttnStruct(
            n_frames=n,
            tokens_per_frame=p,
            assigned=rng.integers(0, n, size=(b, e)),
            key_valid=rng.random((b, e, p)) < 0.85,
        )
        rope = make_rope_tables(rng, heads, n * p, e * p, d // heads)
        hn = rng.normal(size=(b, n * p, d))
        hc = rng.normal(size=(b, e * p, d))
        cn = rng.normal(size=(b, d))
        cc = rng.normal(size=(b, d))
        y = rng.normal(size=(b, d))
        return hn, hc, rope, struct, cn, cc, y, heads

    def test_zero_params_identity(self, rng):
        hn, hc, rope, struct, cn, cc, y, heads = self._setup(rng)
        params = {k: np.zeros_like(v) for k, v in make_block_params(rng, 32).items()}
        out_n, out_c, _ = dit_block_forward(hn, hc, params, rope, struct, cn, cc, y, heads)
        np.testing.assert_array_equal(out_n, hn)
        np.testing.assert_array_equal(out_c, hc)

    def test_cross_value_is_per_sample_constant_shift(self, rng):
        hn, hc, rope, struct, cn, cc, y, heads = self._setup(rng)
        params = {k: np.zeros_like(v) for k, v in make_block_params(rng, 32).items()}
        params["cross.kv.w"] = rng.normal(size=(32, 64)) * 0.1
        params["cross.out.w"] = rng.normal(size=(32, 32)) * 0.1
        out_n, out_c, _ = dit_block_forward(hn, hc, params, rope, struct, cn, cc, y, heads)
        shift = out_n - hn
        np.testing.assert_allclose(shift, np.broadcast_to(shift[:, :1], shift.shape), atol=1e-12)
        # clean stream receives the same conditioning shift
        np.testing.assert_allclose((out_c - hc)[:, 0], shift[:, 0], atol=1e-12)

    def test_block_gradients_match_finite_differences(self, rng):
        hn, hc, rope, struct, cn, cc, y, heads = self._setup(rng)
        params = make_block_params(rng, 32)
        # break the zero-init so every path carries gradient
        for k in ("mod.w", "mod.b", "attn.qkv.b", "cross.kv.b", "ffn.b1"):
            params[k] = params[k] + rng.normal(scale=0.05, size=params[k].shape)
        wn = rng.normal(size=hn.shape)
        wc = rng.normal(size=hc.shape)

        def loss(ps):
            on, oc, _ = dit_block_forward(hn, hc, ps, rope, struct, cn, cc, y, heads)
            return (on * wn).sum() + (oc * wc).sum()

        _, _, cache = dit_block_forward(
            hn, hc, params, rope, struct, cn, cc, y, heads, need_cache=True
        )
        dhn_in, dhc_in, dcn, dcc, dy, g = dit_block_backward(wn, wc, params, cache)
        eps = 1e-6
        for name in ("mod.w", "attn.qkv.w", "attn.out.w", "cross.kv.w", "cross.out.w", "ffn.w1", "ffn.w2", "ffn.b1", "mod.b"):
            p = params[name]
            for _ in range(3):
                idx = tuple(rng.integers(0, s) for s in p.shape)
                p[idx] += eps
                lp = loss(params)
                p[idx] -= 2 * eps
                lm = loss(params)
                p[idx] += eps
                fd = (lp - lm) / (2 * eps)
                assert g[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-7), f"{name} {idx}"
        # input gradients
        for tensor, grad, label in ((hn, dhn_in, "hn"), (hc, dhc_in, "hc"), (cn, dcn, "cn"), (cc, dcc, "cc"), (y, dy, "y")):
            for _ in range(3):
                idx = tuple(rng.integers(0, s) for s in tensor.shape)
                tensor[idx] += eps
                lp = loss(params)
                tensor[idx] -= 2 * eps
                lm = loss(params)
                tensor[idx] += eps
                fd = (lp - lm) / (2 * eps)
                assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7), f"{label} {idx}"
