"""Shared surface of the two conditional sequence-model families.

Conventions that every family obeys:

- Sequences never contain EOS; `terminated=True` adds the EOS factor to
  the score. Terminated sequences run up to max_len tokens. Generation
  that still refuses EOS at the cap yields the unterminated outcome,
  scored as the prefix mass times 1 - p(EOS), so terminated sequences
  plus capped unterminated ones form a complete probability space.
- PAD, BOS and UNK are never emitted: their next-token probability is
  exactly zero. The output alphabet is the regular tokens plus EOS.
- R2L orientation reverses targets internally. Every public method
  accepts and returns sequences in natural order.
"""

import numpy as np

from ..corpus import BOS, EOS, PAD, UNK, TokenSeq

MASK_NEG = -1e30


def emission_mask(vocab_size):
    """Additive logit mask zeroing PAD/BOS/UNK."""
    mask = np.zeros(vocab_size)
    mask[[PAD, BOS, UNK]] = MASK_NEG
    return mask


class Seq2SeqModel:
    family = None

    def __init__(self, src_vocab, tgt_vocab, direction="S2T", orientation="L2R",
                 max_len=8):
        if direction not in ("S2T", "T2S"):
            raise ValueError(f"bad direction {direction!r}")
        if orientation not in ("L2R", "R2L"):
            raise ValueError(f"bad orientation {orientation!r}")
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.direction = direction
        self.orientation = orientation
        self.max_len = max_len
        self.mask = emission_mask(len(tgt_vocab))
        self.params = None  # set by subclasses

    @staticmethod
    def build(family, src_vocab, tgt_vocab, **kwargs):
        from . import attention, tabular

        if family == "tabular":
            return tabular.TabularModel(src_vocab, tgt_vocab, **kwargs)
        if family == "micro-attention":
            return attention.AttentionModel(src_vocab, tgt_vocab, **kwargs)
        raise ValueError(f"unknown model family {family!r}")

    # ---- orientation -------------------------------------------------

    def _orient(self, y):
        return y.reversed() if self.orientation == "R2L" else y

    def _check_x(self, x):
        if len(x) and x.ids.max() >= len(self.src_vocab):
            raise ValueError("source token id out of vocabulary")

    def _check_y(self, y):
        if len(y) == 0:
            return
        if y.ids.max() >= len(self.tgt_vocab):
            raise ValueError("target token id out of vocabulary")
        if np.any(np.isin(y.ids, (PAD, BOS, UNK))):
            raise ValueError("target contains a non-emittable token id")

    # ---- scoring ------------------------------------------------------

    def logprob(self, x, y, terminated=True):
        """log p(y | x), summed per-step conditionals, EOS included."""
        self._check_x(x)
        self._check_y(y)
        if not terminated and len(y) != self.max_len:
            raise ValueError("unterminated sequences exist only at the length cap")
        return self._logprob_nat(x.ids, self._orient(y).ids, terminated)

    def accumulate_grad(self, x, y, weight, grads, terminated=True):
        """Add weight * d logprob / d params into grads; returns logprob."""
        self._check_x(x)
        self._check_y(y)
        return self._grad_nat(x.ids, self._orient(y).ids, weight, grads, terminated)

    def grad_logprob(self, x, y, terminated=True):
        grads = self.params.zeros_like()
        self.accumulate_grad(x, y, 1.0, grads, terminated=terminated)
        return grads.flatten()

    # ---- generation ---------------------------------------------------

    def sample(self, x, temperature=1.0, seed=None):
        seq, _ = self.sample_full(x, temperature=temperature, seed=seed)
        return seq

    def sample_full(self, x, temperature=1.0, seed=None, rng=None):
        """Ancestral sample; returns (sequence, terminated)."""
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self._check_x(x)
        if rng is None:
            rng = np.random.default_rng(seed)
        ids, terminated = self._sample_nat(x.ids, temperature, rng)
        seq = TokenSeq(ids)
        if self.orientation == "R2L":
            seq = seq.reversed()
        return seq, terminated

    def beam_search(self, x, beam_size, alpha=1.0):
        from .decoding import beam_search

        return beam_search(self, x, beam_size, alpha)

    # ---- family hooks ---------------------------------------------------

    def _logprob_nat(self, x_ids, y_ids, terminated):
        raise NotImplementedError

    def _grad_nat(self, x_ids, y_ids, weight, grads, terminated):
        raise NotImplementedError

    def _sample_nat(self, x_ids, temperature, rng):
        """Default path: ancestral sampling over _next_logprobs."""
        ctx = self._start(x_ids)
        ids = []
        for step in range(self.max_len + 1):
            logp = self._next_logprobs(ctx, ids) / temperature
            p = np.exp(logp - logp.max())
            p /= p.sum()
            tok = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
            tok = min(tok, p.shape[0] - 1)
            if tok == EOS:
                return ids, True
            if step == self.max_len:
                return ids, False
            ids.append(tok)
        return ids, False

    def _start(self, x_ids):
        """Per-source decode context consumed by _next_logprobs."""
        raise NotImplementedError

    def _next_logprobs(self, ctx, prefix_ids):
        """Log p(next token | prefix) as a dense [V_out] vector."""
        raise NotImplementedError

    def encode(self, x):
        raise NotImplementedError

    # ---- parameter plumbing ----------------------------------------------

    def get_flat(self):
        return self.params.flatten()

    def set_flat(self, vec):
        self.params.set_flat(vec)

    def zero_grads(self):
        return self.params.zeros_like()

    def enumerate_translations(self, x, max_len=None, include_unterminated=False):
        raise NotImplementedError("exhaustive enumeration requires the tabular family")
