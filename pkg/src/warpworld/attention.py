"""Dual-stream block-sparse attention and the transformer block around it.

Token layout is always [noisy latent frames | clean conditioning entries],
frame-major within each part. The sparsity pattern is structural, not
learned:

* noisy -> noisy: dense (full spatiotemporal self-attention),
* noisy frame i -> clean entry e: only when entry e is assigned to frame i,
* clean entry -> itself: dense within the entry,
* clean -> noisy and clean -> other clean: never.

Clean tokens therefore form an isolated per-entry stream whose keys are
injected into exactly one noisy frame, which is what makes the cost linear
in the number of conditioning entries instead of quadratic in total tokens.
Invalid clean tokens (patches that received no splatted content) are removed
as keys everywhere but still occupy their grid slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    gelu_bwd,
    gelu_fwd,
    layernorm_bwd,
    layernorm_fwd,
    linear_bwd,
    linear_fwd,
    modulate_bwd,
    modulate_fwd,
    silu_bwd,
    silu_fwd,
)

_NEG = -1e30  # masked-logit value; finite so max-subtraction stays NaN-free


# ---------------------------------------------------------------------------
# block mask


@dataclass
class BlockMask:
    """Frame-block level attention mask.

    n_frames: N noisy latent frames.
    assignments: (E,) 1-based target frame of each clean entry (reference
        replicas and memory entries alike).
    tokens_per_frame: tokens in one frame-block (latent Hl*Wl).
    key_valid: optional (E * tokens_per_frame,) bool; False removes a clean
        token as a key everywhere. Noisy keys are always valid.
    """

    n_frames: int
    assignments: np.ndarray
    tokens_per_frame: int
    key_valid: np.ndarray = None

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.n_frames < 1 or self.tokens_per_frame < 1:
            raise ValueError("n_frames and tokens_per_frame must be positive")
        if self.assignments.ndim != 1:
            raise ValueError("assignments must be one-dimensional")
        if len(self.assignments) and not (
            (1 <= self.assignments).all() & (self.assignments <= self.n_frames).all()
        ):
            raise ValueError(f"assignments must lie in [1, {self.n_frames}]")
        if self.key_valid is not None:
            self.key_valid = np.asarray(self.key_valid, dtype=bool)
            if self.key_valid.shape != (len(self.assignments) * self.tokens_per_frame,):
                raise ValueError("key_valid must have one flag per clean token")

    @property
    def n_entries(self) -> int:
        return len(self.assignments)

    @property
    def n_tokens(self) -> int:
        return (self.n_frames + self.n_entries) * self.tokens_per_frame

    def blocks(self) -> np.ndarray:
        """(N+E, N+E) boolean frame-block mask."""
        n, e = self.n_frames, self.n_entries
        m = np.zeros((n + e, n + e), dtype=bool)
        m[:n, :n] = True
        for j, a in enumerate(self.assignments):
            m[a - 1, n + j] = True   # assigned noisy frame reads entry j
            m[n + j, n + j] = True   # entry self-attention
        return m

    def true_block_count(self) -> int:
        return int(self.blocks().sum())

    def to_token_mask(self) -> np.ndarray:
        """Expand to a (T, T) boolean token mask (the dense-attention oracle)."""
        p = self.tokens_per_frame
        m = np.kron(self.blocks(), np.ones((p, p), dtype=bool))
        if self.key_valid is not None:
            m[:, self.n_frames * p :] &= self.key_valid
        return m


def expected_true_blocks(n_frames: int, n_memory: int) -> int:
    """Closed form: N^2 noisy + (N+M) entry-injection + (N+M) entry-self."""
    return n_frames**2 + 2 * (n_frames + n_memory)


# ---------------------------------------------------------------------------
# dense reference implementation


def dense_masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Plain softmax attention with a boolean mask (True = may attend).

    q: (..., Tq, d), k/v: (..., Tk, d), mask broadcastable to (..., Tq, Tk).
    Rows whose keys are all masked produce zeros.
    """
    scale = float(1.0 / np.sqrt(q.shape[-1]))
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    logits = np.where(mask, logits, _NEG)
    m = logits.max(axis=-1, keepdims=True)
    p = np.exp(logits - m) * mask  # masked columns contribute exactly zero
    z = p.sum(axis=-1, keepdims=True)
    p = np.where(z > 0, p / np.where(z > 0, z, 1.0), 0.0)
    return p @ v


# ---------------------------------------------------------------------------
# block-sparse attention, batched internals


@dataclass
class AttnStruct:
    """Per-sample sparse structure shared by every transformer block."""

    n_frames: int
    tokens_per_frame: int
    assigned: np.ndarray   # (B, E) int64, 0-based target frame per entry
    key_valid: np.ndarray  # (B, E, tokens_per_frame) bool

    def __post_init__(self):
        self.assigned = np.asarray(self.assigned, dtype=np.int64)
        self.key_valid = np.asarray(self.key_valid, dtype=bool)
        b, e = self.assigned.shape
        if self.key_valid.shape != (b, e, self.tokens_per_frame):
            raise ValueError("key_valid must be (B, E, tokens_per_frame)")
        if len(self.assigned) and e and not (
            (0 <= self.assigned).all() and (self.assigned < self.n_frames).all()
        ):
            raise ValueError("assigned frames out of range")


def _gather_frames(x: np.ndarray, assigned: np.ndarray) -> np.ndarray:
    """Pick per-entry frame slices: (B,H,N,p,d), (B,E) -> (B,H,E,p,d)."""
    idx = assigned[:, None, :, None, None]
    return np.take_along_axis(x, idx, axis=2)


def _scatter_add_frames(target: np.ndarray, src: np.ndarray, assigned: np.ndarray) -> None:
    """target[b,:,assigned[b,e]] += src[b,:,e], looping entries (few of them)."""
    b_idx = np.arange(target.shape[0])
    for e in range(src.shape[2]):
        target[b_idx, :, assigned[:, e]] += src[:, :, e]


def sparse_attention_fwd(
    qn, kn, vn, qc, kc_inject, kc_self, vc, struct: AttnStruct, need_cache: bool = True
):
    """Fused dual-stream attention.

    All tensors are (B, H, T, d) with T = N*p for the noisy stream and E*p
    for the clean stream. kc_inject are the clean keys as seen by noisy
    queries (warped-PE rotation); kc_self are the keys for within-entry
    self-attention (native-PE rotation). The two softmaxes over a noisy row
    (its N*p noisy keys plus the p keys of each assigned entry) are fused
    into one normalization, exactly matching dense masked attention.
    """
    b, h, tn, d = qn.shape
    n, p = struct.n_frames, struct.tokens_per_frame
    e = struct.assigned.shape[1]
    scale = float(1.0 / np.sqrt(d))
    b_idx = np.arange(b)
    kvalid = struct.key_valid  # (B, E, p)

    # the (B,H,Tn,Tn) buffer is reused through scale/shift/exp/normalize;
    # fresh multi-ten-MB temporaries cost real page-fault time per step
    l_nn = qn @ np.swapaxes(kn, -1, -2)                     # (B,H,Tn,Tn)
    l_nn *= scale
    qf = qn.reshape(b, h, n, p, d)
    if e:
        qe = _gather_frames(qf, struct.assigned)            # (B,H,E,p,d)
        kce = kc_inject.reshape(b, h, e, p, d)
        l_ne = qe @ np.swapaxes(kce, -1, -2)                # (B,H,E,p,p)
        l_ne *= scale
        np.copyto(l_ne, _NEG, where=~kvalid[:, None, :, None, :])
    # joint row max over the noisy block row and every entry assigned to it
    m = l_nn.max(axis=-1).reshape(b, h, n, p)
    if e:
        me = l_ne.max(axis=-1)                              # (B,H,E,p)
        for j in range(e):
            sel = (b_idx, slice(None), struct.assigned[:, j])
            m[sel] = np.maximum(m[sel], me[:, :, j])
    mq = m.reshape(b, h, tn, 1)
    l_nn -= mq
    p_nn = np.exp(l_nn, out=l_nn)
    z = p_nn.sum(axis=-1).reshape(b, h, n, p)
    if e:
        mg = _gather_frames(m[..., None], struct.assigned)[..., 0]   # (B,H,E,p)
        l_ne -= mg[..., None]
        p_ne = np.exp(l_ne, out=l_ne)
        p_ne *= kvalid[:, None, :, None, :]
        for j in range(e):
            z[b_idx, :, struct.assigned[:, j]] += p_ne[:, :, j].sum(axis=-1)
    zq = z.reshape(b, h, tn, 1)
    a_nn = p_nn
    a_nn /= zq
    out_n = a_nn @ vn
    a_ne = None
    if e:
        zg = _gather_frames(z[..., None], struct.assigned)[..., 0]
        a_ne = p_ne
        a_ne /= zg[..., None]
        vce = vc.reshape(b, h, e, p, d)
        out_f = out_n.reshape(b, h, n, p, d)
        _scatter_add_frames(out_f, a_ne @ vce, struct.assigned)

    # clean stream: per-entry self-attention with invalid keys removed
    out_c = np.zeros_like(qc)
    a_cc = None
    if e:
        qce = qc.reshape(b, h, e, p, d)
        kcse = kc_self.reshape(b, h, e, p, d)
        l_cc = qce @ np.swapaxes(kcse, -1, -2)
        l_cc *= scale
        np.copyto(l_cc, _NEG, where=~kvalid[:, None, :, None, :])
        mc = l_cc.max(axis=-1, keepdims=True)
        l_cc -= mc
        p_cc = np.exp(l_cc, out=l_cc)
        p_cc *= kvalid[:, None, :, None, :]
        zc = p_cc.sum(axis=-1, keepdims=True)
        a_cc = p_cc
        a_cc /= np.maximum(zc, 1e-300 if p_cc.dtype == np.float64 else 1e-30)
        out_c = (a_cc @ vce).reshape(b, h, e * p, d)

    cache = None
    if need_cache:
        cache = (qn, kn, vn, qc, kc_inject, kc_self, vc, a_nn, a_ne, a_cc, struct)
    return out_n, out_c, cache


def sparse_attention_bwd(dout_n, dout_c, cache):
    qn, kn, vn, qc, kc_inject, kc_self, vc, a_nn, a_ne, a_cc, struct = cache
    b, h, tn, d = qn.shape
    n, p = struct.n_frames, struct.tokens_per_frame
    e = struct.assigned.shape[1]
    scale = float(1.0 / np.sqrt(d))

    # noisy-query softmax: joint normalization over nn and ne groups.
    # da buffers are consumed in place into dl; the row dots go through
    # einsum so no (B,H,T,T)-sized product temporary is materialized.
    da_nn = dout_n @ np.swapaxes(vn, -1, -2)
    dvn = np.swapaxes(a_nn, -1, -2) @ dout_n
    rho = np.einsum("bhij,bhij->bhi", a_nn, da_nn).reshape(b, h, n, p)
    dvc = np.zeros_like(vc)
    if e:
        dout_f = dout_n.reshape(b, h, n, p, d)
        dout_e = _gather_frames(dout_f, struct.assigned)
        vce = vc.reshape(b, h, e, p, d)
        da_ne = dout_e @ np.swapaxes(vce, -1, -2)
        dvce = np.swapaxes(a_ne, -1, -2) @ dout_e
        dvc += dvce.reshape(b, h, e * p, d)
        rho_ne = np.einsum("bhejk,bhejk->bhej", a_ne, da_ne)
        for j in range(e):
            rho[np.arange(b), :, struct.assigned[:, j]] += rho_ne[:, :, j]
    rho_q = rho.reshape(b, h, tn, 1)
    da_nn -= rho_q
    da_nn *= a_nn
    dl_nn = da_nn
    dqn = dl_nn @ kn
    dqn *= scale
    dkn = np.swapaxes(dl_nn, -1, -2) @ qn
    dkn *= scale
    dkc_inject = np.zeros_like(kc_inject)
    if e:
        rho_e = _gather_frames(rho[..., None], struct.assigned)[..., 0]
        da_ne -= rho_e[..., None]
        da_ne *= a_ne
        dl_ne = da_ne
        kce = kc_inject.reshape(b, h, e, p, d)
        qf = qn.reshape(b, h, n, p, d)
        qe = _gather_frames(qf, struct.assigned)
        dqf = dqn.reshape(b, h, n, p, d)
        _scatter_add_frames(dqf, (dl_ne @ kce) * scale, struct.assigned)
        dkc_inject = ((np.swapaxes(dl_ne, -1, -2) @ qe) * scale).reshape(b, h, e * p, d)

    # clean self-attention
    dqc = np.zeros_like(qc)
    dkc_self = np.zeros_like(kc_self)
    if e:
        qce = qc.reshape(b, h, e, p, d)
        kcse = kc_self.reshape(b, h, e, p, d)
        vce = vc.reshape(b, h, e, p, d)
        dout_ce = dout_c.reshape(b, h, e, p, d)
        da_cc = dout_ce @ np.swapaxes(vce, -1, -2)
        dvc += (np.swapaxes(a_cc, -1, -2) @ dout_ce).reshape(b, h, e * p, d)
        rho_c = np.einsum("bhejk,bhejk->bhej", a_cc, da_cc)[..., None]
        da_cc -= rho_c
        da_cc *= a_cc
        dl_cc = da_cc
        dqc = ((dl_cc @ kcse) * scale).reshape(b, h, e * p, d)
        dkc_self = ((np.swapaxes(dl_cc, -1, -2) @ qce) * scale).reshape(b, h, e * p, d)

    return dqn, dkn, dvn, dqc, dkc_inject, dkc_self, dvc


def noisy_stream_attention(qn, kn, vn, kc_inject, vc, struct: AttnStruct):
    """Forward-only attention for the noisy rows.

    Matches the out_n half of sparse_attention_fwd exactly. Samplers use it
    with per-block cached clean keys/values: the clean stream never reads
    the noisy one, so it is computed once per conditioning set while this
    runs every ODE step.
    """
    b, h, tn, d = qn.shape
    n, p = struct.n_frames, struct.tokens_per_frame
    e = struct.assigned.shape[1]
    scale = float(1.0 / np.sqrt(d))
    b_idx = np.arange(b)
    kvalid = struct.key_valid

    l_nn = qn @ np.swapaxes(kn, -1, -2)
    l_nn *= scale
    m = l_nn.max(axis=-1).reshape(b, h, n, p)
    if e:
        qe = _gather_frames(qn.reshape(b, h, n, p, d), struct.assigned)
        kce = kc_inject.reshape(b, h, e, p, d)
        l_ne = qe @ np.swapaxes(kce, -1, -2)
        l_ne *= scale
        np.copyto(l_ne, _NEG, where=~kvalid[:, None, :, None, :])
        me = l_ne.max(axis=-1)
        for j in range(e):
            sel = (b_idx, slice(None), struct.assigned[:, j])
            m[sel] = np.maximum(m[sel], me[:, :, j])
    mq = m.reshape(b, h, tn, 1)
    l_nn -= mq
    p_nn = np.exp(l_nn, out=l_nn)
    z = p_nn.sum(axis=-1).reshape(b, h, n, p)
    if e:
        mg = _gather_frames(m[..., None], struct.assigned)[..., 0]
        l_ne -= mg[..., None]
        p_ne = np.exp(l_ne, out=l_ne)
        p_ne *= kvalid[:, None, :, None, :]
        for j in range(e):
            z[b_idx, :, struct.assigned[:, j]] += p_ne[:, :, j].sum(axis=-1)
    zq = z.reshape(b, h, tn, 1)
    p_nn /= zq
    out_n = p_nn @ vn
    if e:
        zg = _gather_frames(z[..., None], struct.assigned)[..., 0]
        p_ne /= zg[..., None]
        out_f = out_n.reshape(b, h, n, p, d)
        _scatter_add_frames(out_f, p_ne @ vc.reshape(b, h, e, p, d), struct.assigned)
    return out_n


def block_sparse_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: BlockMask) -> np.ndarray:
    """Sparse attention over the concatenated [noisy | clean] sequence.

    Equivalent to dense_masked_attention with mask.to_token_mask(), but never
    materializes masked-out logits. q/k/v: (..., T, d) with up to two leading
    dims (heads, or batch and heads).
    """
    lead = q.shape[:-2]
    t, d = q.shape[-2:]
    if t != mask.n_tokens:
        raise ValueError(f"sequence length {t} != mask tokens {mask.n_tokens}")
    qb = q.reshape(1, -1, t, d) if q.ndim <= 3 else q
    kb = k.reshape(1, -1, t, d) if k.ndim <= 3 else k
    vb = v.reshape(1, -1, t, d) if v.ndim <= 3 else v
    b = qb.shape[0]
    n, p, e = mask.n_frames, mask.tokens_per_frame, mask.n_entries
    tn = n * p
    kv = mask.key_valid
    kvalid = np.ones((b, e, p), dtype=bool) if kv is None else np.broadcast_to(
        kv.reshape(1, e, p), (b, e, p)
    )
    struct = AttnStruct(
        n_frames=n,
        tokens_per_frame=p,
        assigned=np.broadcast_to(mask.assignments - 1, (b, e)),
        key_valid=kvalid,
    )
    out_n, out_c, _ = sparse_attention_fwd(
        qb[..., :tn, :], kb[..., :tn, :], vb[..., :tn, :],
        qb[..., tn:, :], kb[..., tn:, :], kb[..., tn:, :], vb[..., tn:, :],
        struct, need_cache=False,
    )
    return np.concatenate([out_n, out_c], axis=-2).reshape(*lead, t, d)


# ---------------------------------------------------------------------------
# rotary application on (B, H, T, hd) with cached tables


@dataclass
class RopeTables:
    """Precomputed sin/cos per stream; shapes broadcast against (B,H,T,hd/2).

    noisy: the native grid of the noisy latent frames (shared by batch).
    clean_self: each entry's own grid, for within-entry attention.
    clean_inject: each entry's warped coordinates, for keys read by noisy
        queries. One table set serves every transformer block.
    """

    sin_n: np.ndarray
    cos_n: np.ndarray
    sin_cs: np.ndarray
    cos_cs: np.ndarray
    sin_ci: np.ndarray
    cos_ci: np.ndarray

    # pair rotation is one complex multiply; the phasor tables are derived
    # lazily and cached so each batch pays the cos+1j*sin build once
    def _tab(self, key: str, sin: np.ndarray, cos: np.ndarray, conj: bool) -> np.ndarray:
        t = self.__dict__.get(key)
        if t is None:
            t = cos - 1j * sin if conj else cos + 1j * sin
            self.__dict__[key] = t
        return t

    def tab(self, stream: str, conj: bool = False) -> np.ndarray:
        sin, cos = {
            "n": (self.sin_n, self.cos_n),
            "cs": (self.sin_cs, self.cos_cs),
            "ci": (self.sin_ci, self.cos_ci),
        }[stream]
        return self._tab(f"_tab_{stream}_{int(conj)}", sin, cos, conj)


def _rot(x, tab):
    shape = x.shape
    half = shape[-1] // 2
    x2 = np.ascontiguousarray(x).reshape(*shape[:-1], half, 2)
    ctype = np.complex64 if x2.dtype == np.float32 else np.complex128
    z = x2.view(ctype)[..., 0] * tab
    return z.view(z.real.dtype).reshape(shape)


def _rot_bwd(dy, tab_conj):
    return _rot(dy, tab_conj)


# ---------------------------------------------------------------------------
# transformer block


def _split_heads(x, n_heads):
    b, t, dm = x.shape
    return x.reshape(b, t, n_heads, dm // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def dit_block_forward(
    hn: np.ndarray,
    hc: np.ndarray,
    params: dict,
    rope: RopeTables,
    struct: AttnStruct,
    cn: np.ndarray,
    cc: np.ndarray,
    y: np.ndarray,
    n_heads: int,
    need_cache: bool = False,
):
    """One dual-stream block: modulated self-attention, cross-attention, FFN.

    hn: (B, Tn, D) noisy tokens; hc: (B, Tc, D) clean tokens. Both streams
    share every weight; they differ only in their conditioning vector (cn is
    the true diffusion-time embedding, cc the clean-time embedding) and in
    the rotary tables applied to their queries/keys. y: (B, D) conditioning
    embedding, cross-attended as a single key/value token by both streams.

    With all parameters zero the block is the identity: modulation gates are
    zero and the cross-attention output projection is zero.
    """
    c = {}

    sn = silu_fwd(cn)
    sc = silu_fwd(cc)
    mod_n = linear_fwd(sn, params["mod.w"], params["mod.b"])
    mod_c = linear_fwd(sc, params["mod.w"], params["mod.b"])
    mn = np.split(mod_n, 6, axis=-1)  # shift1 scale1 gate1 shift2 scale2 gate2
    mc = np.split(mod_c, 6, axis=-1)

    # --- fused-softmax dual-stream self-attention
    xn, ln_n = layernorm_fwd(hn)
    xc, ln_c = layernorm_fwd(hc)
    an = modulate_fwd(xn, mn[0], mn[1])
    ac = modulate_fwd(xc, mc[0], mc[1])
    qkv_n = linear_fwd(an, params["attn.qkv.w"], params["attn.qkv.b"])
    qkv_c = linear_fwd(ac, params["attn.qkv.w"], params["attn.qkv.b"])
    qn, kn, vn = (_split_heads(t, n_heads) for t in np.split(qkv_n, 3, axis=-1))
    qc, kc, vc = (_split_heads(t, n_heads) for t in np.split(qkv_c, 3, axis=-1))
    qn_r = _rot(qn, rope.tab("n"))
    kn_r = _rot(kn, rope.tab("n"))
    qc_r = _rot(qc, rope.tab("cs"))
    kc_s = _rot(kc, rope.tab("cs"))
    kc_i = _rot(kc, rope.tab("ci"))
    out_n, out_c, acache = sparse_attention_fwd(
        qn_r, kn_r, vn, qc_r, kc_i, kc_s, vc, struct, need_cache=need_cache
    )
    on = _merge_heads(out_n)
    oc = _merge_heads(out_c)
    pn = linear_fwd(on, params["attn.out.w"], params["attn.out.b"])
    pc = linear_fwd(oc, params["attn.out.w"], params["attn.out.b"])
    hn1 = hn + mn[2][:, None, :] * pn
    hc1 = hc + mc[2][:, None, :] * pc

    # --- cross-attention to the conditioning token. With a single key the
    # softmax is constant one, so attention reduces to broadcasting the value
    # projection of y; the query/key path (cross.norm, cross.q, the k half of
    # cross.kv) cannot influence the output and is not evaluated. The params
    # stay in the block so the layout survives a move to multi-token
    # conditioning. The output projection is applied to the single value row,
    # never to the broadcast copies.
    kv = linear_fwd(y, params["cross.kv.w"], params["cross.kv.b"])  # (B, 2D)
    _ky, vy = np.split(kv, 2, axis=-1)
    u = linear_fwd(vy, params["cross.out.w"], params["cross.out.b"])  # (B, D)
    hn2 = hn1 + u[:, None, :]
    hc2 = hc1 + u[:, None, :]

    # --- modulated FFN
    xn3, ln_n3 = layernorm_fwd(hn2)
    xc3, ln_c3 = layernorm_fwd(hc2)
    fn = modulate_fwd(xn3, mn[3], mn[4])
    fc = modulate_fwd(xc3, mc[3], mc[4])
    gn_in = linear_fwd(fn, params["ffn.w1"], params["ffn.b1"])
    gc_in = linear_fwd(fc, params["ffn.w1"], params["ffn.b1"])
    gn = gelu_fwd(gn_in)
    gc = gelu_fwd(gc_in)
    on3 = linear_fwd(gn, params["ffn.w2"], params["ffn.b2"])
    oc3 = linear_fwd(gc, params["ffn.w2"], params["ffn.b2"])
    hn_out = hn2 + mn[5][:, None, :] * on3
    hc_out = hc2 + mc[5][:, None, :] * oc3

    if need_cache:
        c = dict(
            cn=cn, cc=cc, sn=sn, sc=sc, mn=mn, mc=mc,
            ln_n=ln_n, ln_c=ln_c, xn=xn, xc=xc, an=an, ac=ac,
            acache=acache, on=on, oc=oc, pn=pn, pc=pc, y=y, vy=vy,
            ln_n3=ln_n3, ln_c3=ln_c3, xn3=xn3, xc3=xc3, fn=fn, fc=fc,
            gn_in=gn_in, gc_in=gc_in, gn=gn, gc=gc, on3=on3, oc3=oc3,
            n_heads=n_heads, rope=rope,
        )
    return hn_out, hc_out, c


def dit_block_backward(dhn, dhc, params, cache):
    """Backward of dit_block_forward. Returns input grads and a params-grad dict."""
    g = {k: np.zeros_like(v) for k, v in params.items()}
    mn, mc = cache["mn"], cache["mc"]
    rope = cache["rope"]
    n_heads = cache["n_heads"]

    # --- FFN
    dgate_n = (dhn * cache["on3"]).sum(axis=1)
    dgate_c = (dhc * cache["oc3"]).sum(axis=1)
    don3 = dhn * mn[5][:, None, :]
    doc3 = dhc * mc[5][:, None, :]
    dgn, dw2, db2 = linear_bwd(don3, cache["gn"], params["ffn.w2"])
    dgc, dw2c, db2c = linear_bwd(doc3, cache["gc"], params["ffn.w2"])
    g["ffn.w2"] = dw2 + dw2c
    g["ffn.b2"] = db2 + db2c
    dfn_in = gelu_bwd(dgn, cache["gn_in"])
    dfc_in = gelu_bwd(dgc, cache["gc_in"])
    dfn, dw1, db1 = linear_bwd(dfn_in, cache["fn"], params["ffn.w1"])
    dfc, dw1c, db1c = linear_bwd(dfc_in, cache["fc"], params["ffn.w1"])
    g["ffn.w1"] = dw1 + dw1c
    g["ffn.b1"] = db1 + db1c
    dxn3, dshift2_n, dscale2_n = modulate_bwd(dfn, cache["xn3"], mn[4])
    dxc3, dshift2_c, dscale2_c = modulate_bwd(dfc, cache["xc3"], mc[4])
    dhn2 = dhn + layernorm_bwd(dxn3, cache["ln_n3"])
    dhc2 = dhc + layernorm_bwd(dxc3, cache["ln_c3"])

    # --- cross-attention; only the value path carries gradient (single key).
    # The broadcast over query positions collapses to a sum before the
    # projection backward, so the whole path runs on (B, D) rows.
    du = dhn2.sum(axis=1) + dhc2.sum(axis=1)
    dvy, dcw, dcb = linear_bwd(du, cache["vy"], params["cross.out.w"])
    g["cross.out.w"] = dcw
    g["cross.out.b"] = dcb
    dkv = np.concatenate([np.zeros_like(dvy), dvy], axis=-1)
    dy_, dkvw, dkvb = linear_bwd(dkv, cache["y"], params["cross.kv.w"])
    g["cross.kv.w"] = dkvw
    g["cross.kv.b"] = dkvb
    dhn1 = dhn2
    dhc1 = dhc2

    # --- self-attention
    dgate1_n = (dhn1 * cache["pn"]).sum(axis=1)
    dgate1_c = (dhc1 * cache["pc"]).sum(axis=1)
    dpn = dhn1 * mn[2][:, None, :]
    dpc = dhc1 * mc[2][:, None, :]
    don, daw, dab = linear_bwd(dpn, cache["on"], params["attn.out.w"])
    doc, dawc, dabc = linear_bwd(dpc, cache["oc"], params["attn.out.w"])
    g["attn.out.w"] = daw + dawc
    g["attn.out.b"] = dab + dabc
    dout_n = _split_heads(don, n_heads)
    dout_c = _split_heads(doc, n_heads)
    dqn_r, dkn_r, dvn, dqc_r, dkc_i, dkc_s, dvc = sparse_attention_bwd(
        dout_n, dout_c, cache["acache"]
    )
    dqn = _rot_bwd(dqn_r, rope.tab("n", conj=True))
    dkn = _rot_bwd(dkn_r, rope.tab("n", conj=True))
    dqc = _rot_bwd(dqc_r, rope.tab("cs", conj=True))
    dkc = _rot_bwd(dkc_s, rope.tab("cs", conj=True)) + _rot_bwd(dkc_i, rope.tab("ci", conj=True))
    dqkv_n = np.concatenate([_merge_heads(t) for t in (dqn, dkn, dvn)], axis=-1)
    dqkv_c = np.concatenate([_merge_heads(t) for t in (dqc, dkc, dvc)], axis=-1)
    dan, dqw, dqb = linear_bwd(dqkv_n, cache["an"], params["attn.qkv.w"])
    dac, dqwc, dqbc = linear_bwd(dqkv_c, cache["ac"], params["attn.qkv.w"])
    g["attn.qkv.w"] = dqw + dqwc
    g["attn.qkv.b"] = dqb + dqbc
    dxn, dshift1_n, dscale1_n = modulate_bwd(dan, cache["xn"], mn[1])
    dxc, dshift1_c, dscale1_c = modulate_bwd(dac, cache["xc"], mc[1])
    dhn_in = dhn1 + layernorm_bwd(dxn, cache["ln_n"])
    dhc_in = dhc1 + layernorm_bwd(dxc, cache["ln_c"])

    # --- modulation path back to the conditioning vectors
    dmod_n = np.concatenate(
        [dshift1_n, dscale1_n, dgate1_n, dshift2_n, dscale2_n, dgate_n], axis=-1
    )
    dmod_c = np.concatenate(
        [dshift1_c, dscale1_c, dgate1_c, dshift2_c, dscale2_c, dgate_c], axis=-1
    )
    dsn, dmw, dmb = linear_bwd(dmod_n, cache["sn"], params["mod.w"])
    dsc, dmwc, dmbc = linear_bwd(dmod_c, cache["sc"], params["mod.w"])
    g["mod.w"] = dmw + dmwc
    g["mod.b"] = dmb + dmbc
    dcn = silu_bwd(dsn, cache["cn"])
    dcc = silu_bwd(dsc, cache["cc"])

    return dhn_in, dhc_in, dcn, dcc, dy_, g
