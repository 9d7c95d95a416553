"""Micro attention encoder-decoder with hand-written backprop.

A deliberately small transformer-shaped model: learned token and
position embeddings, multi-head dot-product attention with residual
connections, relu feed-forward blocks, no layer norm. Everything is
float64 NumPy so finite-difference checks are meaningful at tight
tolerances.

The decoder layer computes

    u  = s + A_s(s)                      (causal self-attention)
    v  = u + A_e(H, u) [+ A_c(D, u)]     (source attention, and draft
                                          attention when built with
                                          with_draft_attention)
    s' = v + FF(v)

so a model whose draft-attention weights are zero is exactly the
single-pass decoder. The draft context D is any (T, dim) matrix;
passing draft=None skips A_c entirely. Scoring accepts the context
either as token ids (embedded here, gradients routed back into the
embedding tables) or as a precomputed matrix, which is treated as a
constant: its gradient is discarded, so a caller handing over decoder
states from another model keeps that model out of the backward pass.

An empty source encodes to a 0-row memory and A_e is skipped over it,
the same way A_c is skipped without a draft, so empty sequences stay
legal inputs on both sides.
"""

import numpy as np

from ..corpus import BOS, EOS, TokenSeq
from .base import Seq2SeqModel
from .params import ModelParams

NEG_INF = -1e30


def _softmax_rows(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_back(a, d_a):
    return a * (d_a - (d_a * a).sum(axis=-1, keepdims=True))


def _split_heads(mat, n_heads):
    t, d = mat.shape
    return mat.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(heads):
    n_heads, t, dk = heads.shape
    return heads.transpose(1, 0, 2).reshape(t, n_heads * dk)


def _mha_forward(q_in, kv_in, wq, wk, wv, wo, n_heads, causal):
    dk = wq.shape[1] // n_heads
    q = _split_heads(q_in @ wq, n_heads)
    k = _split_heads(kv_in @ wk, n_heads)
    v = _split_heads(kv_in @ wv, n_heads)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dk)
    if causal:
        t_q = q_in.shape[0]
        mask = np.triu(np.full((t_q, t_q), NEG_INF), k=1)
        scores = scores + mask[None, :, :]
    attn = _softmax_rows(scores)
    ctx = _merge_heads(attn @ v)
    out = ctx @ wo
    cache = (q_in, kv_in, q, k, v, attn, ctx)
    return out, cache


def _mha_backward(d_out, cache, wq, wk, wv, wo, n_heads, grads, prefix):
    q_in, kv_in, q, k, v, attn, ctx = cache
    dk = wq.shape[1] // n_heads
    grads[prefix + "o"] += ctx.T @ d_out
    d_ctx = _split_heads(d_out @ wo.T, n_heads)
    d_attn = d_ctx @ v.transpose(0, 2, 1)
    d_v = attn.transpose(0, 2, 1) @ d_ctx
    d_scores = _softmax_back(attn, d_attn)
    d_q = d_scores @ k / np.sqrt(dk)
    d_k = d_scores.transpose(0, 2, 1) @ q / np.sqrt(dk)
    d_qm = _merge_heads(d_q)
    d_km = _merge_heads(d_k)
    d_vm = _merge_heads(d_v)
    grads[prefix + "q"] += q_in.T @ d_qm
    grads[prefix + "k"] += kv_in.T @ d_km
    grads[prefix + "v"] += kv_in.T @ d_vm
    d_q_in = d_qm @ wq.T
    d_kv_in = d_km @ wk.T + d_vm @ wv.T
    return d_q_in, d_kv_in


def _ff_forward(h, w1, b1, w2, b2):
    pre = h @ w1 + b1
    act = np.maximum(pre, 0.0)
    out = act @ w2 + b2
    return out, (h, pre, act)


def _ff_backward(d_out, cache, w1, w2, grads, prefix):
    h, pre, act = cache
    grads[prefix + "w2"] += act.T @ d_out
    grads[prefix + "b2"] += d_out.sum(axis=0)
    d_act = d_out @ w2.T
    d_pre = d_act * (pre > 0)
    grads[prefix + "w1"] += h.T @ d_pre
    grads[prefix + "b1"] += d_pre.sum(axis=0)
    return d_pre @ w1.T


class AttentionModel(Seq2SeqModel):
    family = "micro-attention"

    def __init__(self, src_vocab, tgt_vocab, direction="S2T", orientation="L2R",
                 max_len=8, dim=16, n_heads=2, n_layers=2, seed=0,
                 with_draft_attention=False):
        super().__init__(src_vocab, tgt_vocab, direction, orientation, max_len)
        if dim % n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.dim = dim
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.with_draft_attention = with_draft_attention
        rng = np.random.default_rng(seed)
        d = dim

        def mat(rows, cols, scale=None):
            if scale is None:
                scale = 1.0 / np.sqrt(rows)
            return rng.normal(scale=scale, size=(rows, cols))

        arrays = {
            "emb_src": mat(len(src_vocab), d, 0.5),
            "emb_tgt": mat(len(tgt_vocab), d, 0.5),
            "pos_src": mat(max_len, d, 0.5),
            "pos_tgt": mat(max_len + 1, d, 0.5),
        }
        for l in range(n_layers):
            for name in ("q", "k", "v", "o"):
                arrays[f"enc{l}_a{name}"] = mat(d, d)
            arrays[f"enc{l}_w1"] = mat(d, 2 * d)
            arrays[f"enc{l}_b1"] = np.zeros(2 * d)
            arrays[f"enc{l}_w2"] = mat(2 * d, d)
            arrays[f"enc{l}_b2"] = np.zeros(d)
        for l in range(n_layers):
            for block in ("s", "e") + (("c",) if with_draft_attention else ()):
                for name in ("q", "k", "v", "o"):
                    arrays[f"dec{l}_{block}{name}"] = mat(d, d)
            arrays[f"dec{l}_w1"] = mat(d, 2 * d)
            arrays[f"dec{l}_b1"] = np.zeros(2 * d)
            arrays[f"dec{l}_w2"] = mat(2 * d, d)
            arrays[f"dec{l}_b2"] = np.zeros(d)
        arrays["w_out"] = mat(d, len(tgt_vocab))
        arrays["b_out"] = np.zeros(len(tgt_vocab))
        self.params = ModelParams(arrays)

    def _check_x(self, x):
        super()._check_x(x)
        if len(x) > self.max_len:
            raise ValueError("source longer than the position table")

    # ---- encoder -------------------------------------------------------

    def _encoder_forward(self, x_ids):
        p = self.params
        h = p["emb_src"][x_ids] + p["pos_src"][: len(x_ids)]
        caches = []
        if len(x_ids) == 0:
            # empty source: a 0-row memory, nothing to attend over
            return h, caches
        for l in range(self.n_layers):
            att, c_att = _mha_forward(h, h, p[f"enc{l}_aq"], p[f"enc{l}_ak"],
                                      p[f"enc{l}_av"], p[f"enc{l}_ao"],
                                      self.n_heads, causal=False)
            h1 = h + att
            ff, c_ff = _ff_forward(h1, p[f"enc{l}_w1"], p[f"enc{l}_b1"],
                                   p[f"enc{l}_w2"], p[f"enc{l}_b2"])
            h = h1 + ff
            caches.append((c_att, c_ff))
        return h, caches

    def _encoder_backward(self, d_h, caches, grads, x_ids):
        if len(x_ids) == 0:
            return
        p = self.params
        for l in reversed(range(self.n_layers)):
            c_att, c_ff = caches[l]
            d_h1 = _ff_backward(d_h, c_ff, p[f"enc{l}_w1"], p[f"enc{l}_w2"],
                                grads, f"enc{l}_") + d_h
            d_q, d_kv = _mha_backward(d_h1, c_att, p[f"enc{l}_aq"], p[f"enc{l}_ak"],
                                      p[f"enc{l}_av"], p[f"enc{l}_ao"],
                                      self.n_heads, grads, f"enc{l}_a")
            d_h = d_h1 + d_q + d_kv
        np.add.at(grads["emb_src"], x_ids, d_h)
        grads["pos_src"][: len(x_ids)] += d_h

    # ---- decoder -------------------------------------------------------

    def _embed_draft(self, draft_ids):
        p = self.params
        return p["emb_tgt"][draft_ids] + p["pos_tgt"][: len(draft_ids)]

    def _decoder_forward(self, h_enc, tok_in, draft=None):
        p = self.params
        s = p["emb_tgt"][tok_in] + p["pos_tgt"][: len(tok_in)]
        caches = []
        for l in range(self.n_layers):
            a_s, c_s = _mha_forward(s, s, p[f"dec{l}_sq"], p[f"dec{l}_sk"],
                                    p[f"dec{l}_sv"], p[f"dec{l}_so"],
                                    self.n_heads, causal=True)
            u = s + a_s
            v = u
            c_e = None
            if h_enc.shape[0]:
                a_e, c_e = _mha_forward(u, h_enc, p[f"dec{l}_eq"], p[f"dec{l}_ek"],
                                        p[f"dec{l}_ev"], p[f"dec{l}_eo"],
                                        self.n_heads, causal=False)
                v = v + a_e
            c_c = None
            if draft is not None:
                a_c, c_c = _mha_forward(u, draft, p[f"dec{l}_cq"], p[f"dec{l}_ck"],
                                        p[f"dec{l}_cv"], p[f"dec{l}_co"],
                                        self.n_heads, causal=False)
                v = v + a_c
            ff, c_ff = _ff_forward(v, p[f"dec{l}_w1"], p[f"dec{l}_b1"],
                                   p[f"dec{l}_w2"], p[f"dec{l}_b2"])
            s = v + ff
            caches.append((c_s, c_e, c_c, c_ff))
        logits = s @ p["w_out"] + p["b_out"] + self.mask[None, :]
        return logits, (s, caches)

    def _decoder_backward(self, d_logits, fwd_cache, grads, tok_in, draft=None):
        """Returns (d_h_enc, d_draft)."""
        p = self.params
        s_top, caches = fwd_cache
        grads["w_out"] += s_top.T @ d_logits
        grads["b_out"] += d_logits.sum(axis=0)
        d_s = d_logits @ p["w_out"].T
        d_h_enc = 0.0
        d_draft = None if draft is None else np.zeros_like(draft)
        for l in reversed(range(self.n_layers)):
            c_s, c_e, c_c, c_ff = caches[l]
            d_v = _ff_backward(d_s, c_ff, p[f"dec{l}_w1"], p[f"dec{l}_w2"],
                               grads, f"dec{l}_") + d_s
            d_u = d_v.copy()
            if draft is not None:
                d_uq, d_kv = _mha_backward(d_v, c_c, p[f"dec{l}_cq"], p[f"dec{l}_ck"],
                                           p[f"dec{l}_cv"], p[f"dec{l}_co"],
                                           self.n_heads, grads, f"dec{l}_c")
                d_u += d_uq
                d_draft += d_kv
            if c_e is not None:
                d_uq, d_kv = _mha_backward(d_v, c_e, p[f"dec{l}_eq"], p[f"dec{l}_ek"],
                                           p[f"dec{l}_ev"], p[f"dec{l}_eo"],
                                           self.n_heads, grads, f"dec{l}_e")
                d_u += d_uq
                d_h_enc = d_h_enc + d_kv
            d_sq, d_skv = _mha_backward(d_u, c_s, p[f"dec{l}_sq"], p[f"dec{l}_sk"],
                                        p[f"dec{l}_sv"], p[f"dec{l}_so"],
                                        self.n_heads, grads, f"dec{l}_s")
            d_s = d_u + d_sq + d_skv
        np.add.at(grads["emb_tgt"], tok_in, d_s)
        grads["pos_tgt"][: len(tok_in)] += d_s
        return d_h_enc, d_draft

    # ---- scoring ---------------------------------------------------------

    @staticmethod
    def _teacher_rows(y_ids):
        tok_in = np.concatenate(([BOS], y_ids)).astype(np.int64)
        return tok_in

    def _logits_for(self, x_ids, y_ids, draft_ids=None, draft_mat=None):
        if draft_ids is not None and draft_mat is not None:
            raise ValueError("pass draft_ids or draft_mat, not both")
        h_enc, enc_cache = self._encoder_forward(x_ids)
        if draft_mat is not None:
            draft = draft_mat
        else:
            draft = self._embed_draft(draft_ids) if draft_ids is not None else None
        tok_in = self._teacher_rows(y_ids)
        logits, dec_cache = self._decoder_forward(h_enc, tok_in, draft)
        return logits, (h_enc, enc_cache, tok_in, dec_cache, draft, draft_ids)

    def _score_from_logits(self, logits, y_ids, terminated):
        logp = logits - logits.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        lp = float(logp[np.arange(len(y_ids)), y_ids].sum()) if len(y_ids) else 0.0
        if terminated:
            lp += float(logp[len(y_ids), EOS])
        else:
            with np.errstate(divide="ignore"):
                lp += float(np.log1p(-np.exp(logp[len(y_ids), EOS])))
        return lp, logp

    def _logprob_nat(self, x_ids, y_ids, terminated, draft_ids=None,
                     draft_mat=None):
        logits, _ = self._logits_for(x_ids, y_ids, draft_ids, draft_mat)
        lp, _ = self._score_from_logits(logits, y_ids, terminated)
        return lp

    def _grad_nat(self, x_ids, y_ids, weight, grads, terminated,
                  draft_ids=None, draft_mat=None):
        logits, cache = self._logits_for(x_ids, y_ids, draft_ids, draft_mat)
        lp, logp = self._score_from_logits(logits, y_ids, terminated)
        probs = np.exp(logp)
        d_logits = -weight * probs
        steps = np.arange(len(y_ids))
        d_logits[steps, y_ids] += weight
        final = len(y_ids)
        if terminated:
            d_logits[final, EOS] += weight
        else:
            # d log(1 - p_eos): restore the final row, then apply the
            # capped-outcome gradient
            p = probs[final]
            p_eos = p[EOS]
            row = p * (weight * p_eos / (1.0 - p_eos))
            row[EOS] = -weight * p_eos
            d_logits[final] = row
        h_enc, enc_cache, tok_in, dec_cache, draft, draft_ids = cache
        d_h_enc, d_draft = self._decoder_backward(d_logits, dec_cache, grads,
                                                  tok_in, draft)
        self._encoder_backward(d_h_enc, enc_cache, grads, x_ids)
        if draft_ids is not None:
            np.add.at(grads["emb_tgt"], draft_ids, d_draft)
            grads["pos_tgt"][: len(draft_ids)] += d_draft
        return lp

    # ---- generation --------------------------------------------------------

    def _start(self, x_ids):
        h_enc, _ = self._encoder_forward(x_ids)
        return (h_enc, None)

    def _next_logprobs(self, ctx, prefix_ids):
        h_enc, draft = ctx
        tok_in = np.asarray([BOS] + list(prefix_ids), dtype=np.int64)
        logits, _ = self._decoder_forward(h_enc, tok_in, draft)
        row = logits[-1]
        shifted = row - row.max()
        return shifted - np.log(np.exp(shifted).sum())

    def encode(self, x):
        self._check_x(x)
        h_enc, _ = self._encoder_forward(x.ids)
        return h_enc
