"""Exactly enumerable log-linear sequence model.

Step logits decompose into context-independent tables plus one
previous-token table:

    logits[t] = bias + pos[min(t, P)] + sum_i s1[clip(i - t)][x_i]
              + sum_i s2[clip(end_i - t)][x_i]  (+ t_table[prev])

where end_i is position i's distance from the source end. The shift
bucketing makes copying, reversal and substitution ciphers all linearly
learnable, EOS timing included, while keeping gradients analytic and
the outcome space small enough to enumerate. All computation funnels
through the _core kernels so the compiled and pure backends are
interchangeable.
"""

import numpy as np

from .. import _core
from ..corpus import BOS, EOS, PAD, UNK, TokenSeq
from .base import Seq2SeqModel
from .params import ModelParams


class TabularModel(Seq2SeqModel):
    family = "tabular"

    def __init__(self, src_vocab, tgt_vocab, direction="S2T", orientation="L2R",
                 max_len=8, radius=3, context_order=1, init_scale=0.0, seed=0):
        super().__init__(src_vocab, tgt_vocab, direction, orientation, max_len)
        if context_order not in (0, 1):
            raise ValueError("context_order must be 0 or 1")
        self.radius = radius
        self.context_order = context_order
        n_out = len(tgt_vocab)
        n_src = len(src_vocab)
        rng = np.random.default_rng(seed)

        def init(shape):
            if init_scale == 0.0:
                return np.zeros(shape)
            return rng.normal(scale=init_scale, size=shape)

        arrays = {
            "bias": init(n_out),
            "pos": init((max_len + 1, n_out)),
            "s1": init((2 * radius + 1, n_src, n_out)),
            "s2": init((2 * radius + 1, n_src, n_out)),
        }
        if context_order == 1:
            arrays["t_table"] = init((n_out, n_out))
        self.params = ModelParams(arrays)
        self._zero_t = np.zeros((n_out, n_out))

    def _t_table(self):
        return self.params["t_table"] if self.context_order == 1 else self._zero_t

    def _build_m(self, x_ids, n_steps):
        m = _core.build_m(self.params["bias"], self.params["pos"],
                          self.params["s1"], self.params["s2"],
                          np.ascontiguousarray(x_ids), n_steps)
        m += self.mask[None, :]
        return m

    def _final_row_probs(self, m, y_ids):
        prev = int(y_ids[-1]) if len(y_ids) else BOS
        row = m[len(y_ids)] + self._t_table()[prev]
        shifted = row - row.max()
        p = np.exp(shifted)
        p /= p.sum()
        return p, prev

    # ---- scoring ------------------------------------------------------

    def _logprob_nat(self, x_ids, y_ids, terminated):
        m = self._build_m(x_ids, len(y_ids) + 1)
        lp = _core.step_logprob(m, self._t_table(), np.ascontiguousarray(y_ids),
                                BOS, EOS, terminated)
        if not terminated:
            # capped outcome: prefix mass times 1 - p(EOS)
            p, _ = self._final_row_probs(m, y_ids)
            with np.errstate(divide="ignore"):
                lp += float(np.log1p(-p[EOS]))
        return lp

    def _grad_nat(self, x_ids, y_ids, weight, grads, terminated):
        n_rows = len(y_ids) + 1
        m = self._build_m(x_ids, n_rows)
        d_m = np.zeros_like(m)
        d_t = grads["t_table"] if self.context_order == 1 else np.zeros_like(self._zero_t)
        lp = _core.step_grad(m, self._t_table(), np.ascontiguousarray(y_ids),
                             BOS, EOS, terminated, weight, d_m, d_t)
        if not terminated:
            p, prev = self._final_row_probs(m, y_ids)
            p_eos = p[EOS]
            g = p * (weight * p_eos / (1.0 - p_eos))
            g[EOS] = -weight * p_eos
            d_m[-1] += g
            d_t[prev] += g
            lp += float(np.log1p(-p_eos))
        grads["bias"] += d_m.sum(axis=0)
        steps = np.arange(n_rows)
        np.add.at(grads["pos"], np.minimum(steps, self.max_len), d_m)
        _core.scatter_shift(d_m, np.ascontiguousarray(x_ids), self.radius,
                            grads["s1"], grads["s2"])
        return lp

    # ---- generation ---------------------------------------------------

    def _sample_nat(self, x_ids, temperature, rng):
        m = self._build_m(x_ids, self.max_len + 1)
        t_table = self._t_table()
        if temperature != 1.0:
            # the mask stays effectively -inf under any positive temperature
            m = m / temperature
            t_table = t_table / temperature
        uniforms = rng.random(self.max_len + 1)
        return _core.sample_steps(m, t_table, BOS, EOS, self.max_len, uniforms)

    def _start(self, x_ids):
        return self._build_m(x_ids, self.max_len + 1)

    def _next_logprobs(self, ctx, prefix_ids):
        prev = prefix_ids[-1] if prefix_ids else BOS
        row = ctx[len(prefix_ids)] + self._t_table()[prev]
        shifted = row - row.max()
        return shifted - np.log(np.exp(shifted).sum())

    def encode(self, x):
        """Per-token states: the aligned-shift output rows for each token.

        The tabular family has no recurrent encoder; the zero-shift s1
        row is the closest thing to a token embedding it owns and is
        deterministic and target-free, which is all downstream users
        (sentence vectors) require.
        """
        self._check_x(x)
        return self.params["s1"][self.radius][x.ids].copy()

    # ---- enumeration ----------------------------------------------------

    def enumerate_translations(self, x, max_len=None, include_unterminated=False):
        """All terminated sequences up to max_len with exact probabilities.

        Returns (sequence, probability) pairs summing to at most 1; the
        shortfall is the mass of continuations past max_len. With
        include_unterminated=True the return items are (sequence,
        probability, terminated) triples where the extra entries carry
        exactly that continuation mass, so the whole list sums to 1.
        """
        self._check_x(x)
        if max_len is None:
            max_len = self.max_len
        max_len = min(max_len, self.max_len)
        n_regular = len(self.tgt_vocab) - 4  # minus PAD/BOS/EOS/UNK
        total = sum(n_regular ** m for m in range(max_len + 1))
        if total > 10 ** 6:
            raise ValueError(f"enumeration budget exceeded: {total} sequences")

        m = self._build_m(x.ids, max_len + 1)
        t_table = self._t_table()
        extend = [i for i in range(len(self.tgt_vocab)) if i not in (PAD, BOS, UNK, EOS)]
        out = []

        def logsoftmax(step, prev):
            row = m[step] + t_table[prev]
            shifted = row - row.max()
            return shifted - np.log(np.exp(shifted).sum())

        def walk(prefix, prev, lp):
            step = len(prefix)
            logp = logsoftmax(step, prev)
            out.append((self._finish(prefix), float(np.exp(lp + logp[EOS])), True))
            if step == max_len:
                if include_unterminated:
                    mass = float(np.exp(lp) * -np.expm1(logp[EOS]))
                    out.append((self._finish(prefix), mass, False))
                return
            for v in extend:
                walk(prefix + [v], v, lp + logp[v])

        walk([], BOS, 0.0)
        if include_unterminated:
            return out
        return [(seq, p) for seq, p, term in out if term]

    def _finish(self, ids):
        seq = TokenSeq(ids)
        return seq.reversed() if self.orientation == "R2L" else seq
