"""Corpus refinement: rule filters, n-gram LMs, relevance and noise scoring.

Text-level rules operate on raw string pairs before tokenization;
vector and alignment filters operate on encoded corpora. All filters
keep input order and are idempotent.
"""

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, fields

import numpy as np

from .corpus import EOS, PAD, BOS, ParallelCorpus


# ---------------------------------------------------------------------------
# n-gram language model


class NGramLM:
    """Interpolated additive-smoothed n-gram model over token ids.

    Event space is every vocab id except PAD and BOS, plus the EOS
    event that terminates each sentence. The conditional p(w | h)
    uniformly interpolates the additive-smoothed estimates of orders
    1..order, so it sums to 1 over events for any history.
    """

    def __init__(self, order, alpha, vocab):
        if order < 1:
            raise ValueError("order must be >= 1")
        if alpha <= 0:
            raise ValueError("smoothing alpha must be positive")
        self.order = order
        self.alpha = alpha
        self.vocab = vocab
        self.events = [i for i in range(len(vocab)) if i not in (PAD, BOS)]
        self.n_events = len(self.events)
        # context counts and (context, word) counts per order
        self.ctx = [Counter() for _ in range(order)]
        self.cnt = [Counter() for _ in range(order)]

    def _fit(self, sentences):
        for seq in sentences:
            ids = list(seq.ids) + [EOS]
            history = [BOS] * (self.order - 1)
            for w in ids:
                for k in range(self.order):
                    h = tuple(history[len(history) - k:])
                    self.ctx[k][h] += 1
                    self.cnt[k][(h, w)] += 1
                history = (history + [w])[1:] if self.order > 1 else history
        return self

    def prob(self, w, history):
        """p(w | history), interpolated over orders.

        Each order's estimate smooths the conditional count ratio,
        (c(h,w)/c(h) + alpha) / (1 + alpha*V), so probabilities are
        invariant to duplicating the whole training corpus; an unseen
        history backs off to uniform.
        """
        if self.order > 1:
            history = tuple(history)[-(self.order - 1):]
            history = (BOS,) * (self.order - 1 - len(history)) + history
        else:
            history = ()
        total = 0.0
        for k in range(self.order):
            h = history[len(history) - k:]
            c_h = self.ctx[k][h]
            if c_h == 0:
                total += 1.0 / self.n_events
            else:
                ratio = self.cnt[k][(h, w)] / c_h
                total += (ratio + self.alpha) / (1.0 + self.alpha * self.n_events)
        return total / self.order

    def logprob(self, seq, include_eos=True):
        """Sentence log-probability in nats, EOS event included."""
        ids = list(seq.ids) + ([EOS] if include_eos else [])
        if not ids:
            raise ValueError("empty sentence")
        history = [BOS] * max(self.order - 1, 1)
        total = 0.0
        for w in ids:
            total += math.log(self.prob(w, history))
            history = (history + [w])[1:]
        return total


def lm_train(corpus, order=5, alpha=0.1, vocab=None):
    """Train an NGramLM on a MonoCorpus or an iterable of TokenSeq."""
    sentences = getattr(corpus, "sentences", corpus)
    if vocab is None:
        raise ValueError("vocab is required")
    return NGramLM(order, alpha, vocab)._fit(sentences)


def lm_xent(lm, sentence):
    """Per-token cross-entropy in nats, EOS event excluded."""
    if len(sentence) == 0:
        raise ValueError("empty sentence")
    return -lm.logprob(sentence, include_eos=False) / len(sentence)


def ced_score(sentence, in_domain_lm, general_lm):
    """Cross-entropy difference; lower = more in-domain."""
    return lm_xent(in_domain_lm, sentence) - lm_xent(general_lm, sentence)


# ---------------------------------------------------------------------------
# text-level rule filtering


@dataclass
class FilterRules:
    min_tokens: int = 3
    max_tokens: int = 70
    max_ratio: float = 1.3
    require_source_script: bool = True
    foreign_run: int = 3

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name}={getattr(self, f.name)}\n")

    @classmethod
    def load(cls, path):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in types:
                    raise ValueError(f"unknown filter rule {key!r}")
                if types[key] is bool:
                    kwargs[key] = value.strip() in ("True", "true", "1")
                elif types[key] is int:
                    kwargs[key] = int(value)
                else:
                    kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass
class FilterReport:
    counts: dict      # rule name -> removed count
    kept: int
    removed: int
    details: dict = None  # fitted artifacts (e.g. alignment threshold)


_URL = re.compile(r"(https?://|www\.)\S+", re.IGNORECASE)
_CJK = re.compile(r"[一-鿿]")
# characters outside the two working scripts, digits, punctuation, space
_ALLOWED = re.compile(r"[一-鿿A-Za-z0-9\s!-/:-@\[-`{-~“”‘’·—…、。，！？；：（）《》「」]")


def _has_foreign_run(text, run):
    streak = 0
    for ch in text:
        if _ALLOWED.match(ch):
            streak = 0
        else:
            streak += 1
            if streak >= run:
                return True
    return False


def rule_filter(pairs, rules=None):
    """Apply text-level rules in a fixed order; first hit wins.

    pairs: list of (source text, target text). Order: token-count
    bounds, length ratio, illegal characters (URLs or foreign-script
    runs), source-script requirement, exact-duplicate removal.
    """
    rules = rules if rules is not None else FilterRules()
    counts = {"length": 0, "ratio": 0, "illegal": 0, "script": 0, "duplicate": 0}
    kept = []
    seen = set()
    for src, tgt in pairs:
        n_src = len(src.split())
        n_tgt = len(tgt.split())
        if not (rules.min_tokens <= n_src <= rules.max_tokens
                and rules.min_tokens <= n_tgt <= rules.max_tokens):
            counts["length"] += 1
            continue
        if n_src > rules.max_ratio * n_tgt or n_tgt > rules.max_ratio * n_src:
            counts["ratio"] += 1
            continue
        if (_URL.search(src) or _URL.search(tgt)
                or _has_foreign_run(src, rules.foreign_run)
                or _has_foreign_run(tgt, rules.foreign_run)):
            counts["illegal"] += 1
            continue
        if rules.require_source_script and not _CJK.search(src):
            counts["script"] += 1
            continue
        if (src, tgt) in seen:
            counts["duplicate"] += 1
            continue
        seen.add((src, tgt))
        kept.append((src, tgt))
    return kept, FilterReport(counts, len(kept), len(pairs) - len(kept))


# ---------------------------------------------------------------------------
# sentence vectors


def sentvec(model, sentence):
    """Mean of the top-layer encoder states; a fixed-dimension vector."""
    states = model.encode(sentence)
    return np.asarray(states, dtype=np.float64).mean(axis=0)


def sim(s, t):
    """Cosine similarity in [-1, 1]."""
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError("dimension mismatch")
    ns, nt = np.linalg.norm(s), np.linalg.norm(t)
    if ns == 0.0 or nt == 0.0:
        raise ValueError("zero-norm vector")
    return float(np.clip(s @ t / (ns * nt), -1.0, 1.0))


def sentvec_filter(corpus, model, threshold=0.2):
    """Keep pairs whose source/target sentence vectors agree.

    The model must share one vocabulary across both sides so that both
    sentences can be encoded by the same encoder.
    """
    if not -1.0 <= threshold <= 1.0:
        raise ValueError("threshold outside [-1, 1]")
    kept = []
    removed = 0
    for x, y in corpus.pairs:
        if sim(sentvec(model, x), sentvec(model, y)) >= threshold:
            kept.append((x, y))
        else:
            removed += 1
    report = FilterReport({"sentvec": removed}, len(kept), removed)
    return ParallelCorpus(kept), report


# ---------------------------------------------------------------------------
# alignment-score filtering

NULL_TOKEN = -1


def ibm1_train(corpus, iterations=5):
    """Lexical translation table t(target | source) by EM, NULL included."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    t = defaultdict(dict)
    tgt_types = set()
    for x, y in corpus.pairs:
        for f in y.ids:
            tgt_types.add(int(f))
    uniform = 1.0 / max(len(tgt_types), 1)
    for x, y in corpus.pairs:
        for e in list(x.ids) + [NULL_TOKEN]:
            for f in y.ids:
                t[int(e)].setdefault(int(f), uniform)
    for _ in range(iterations):
        count = defaultdict(lambda: defaultdict(float))
        total = defaultdict(float)
        for x, y in corpus.pairs:
            src = [int(e) for e in x.ids] + [NULL_TOKEN]
            for f in (int(v) for v in y.ids):
                denom = sum(t[e][f] for e in src)
                for e in src:
                    frac = t[e][f] / denom
                    count[e][f] += frac
                    total[e] += frac
        for e, row in count.items():
            for f, c in row.items():
                t[e][f] = c / total[e]
    return {e: dict(row) for e, row in t.items()}


def align_score(table, x, y):
    """Per-target-token alignment log-score under a lexical table."""
    src = [int(e) for e in x.ids] + [NULL_TOKEN]
    total = 0.0
    floor = 1e-12
    for f in (int(v) for v in y.ids):
        inner = sum(table.get(e, {}).get(f, 0.0) for e in src)
        total += math.log(max(inner / len(src), floor))
    return total / len(y)


def align_filter(corpus, iterations=5, cutoff=0.10, table=None, threshold=None):
    """Drop pairs in the bottom score fraction of a lexical-alignment model.

    Fits the table and the percentile threshold on the input unless
    both are supplied; the fitted pair travels in report.details, and
    re-filtering with it removes nothing (the fitted filter is
    idempotent; the percentile itself would re-trim any input).
    """
    if not 0.0 <= cutoff < 1.0:
        raise ValueError("cutoff outside [0, 1)")
    if table is None:
        table = ibm1_train(corpus, iterations)
    scores = [align_score(table, x, y) for x, y in corpus.pairs]
    if threshold is None:
        threshold = float(np.quantile(scores, cutoff))
    kept = []
    removed = 0
    for (x, y), score in zip(corpus.pairs, scores):
        if score < threshold:
            removed += 1
        else:
            kept.append((x, y))
    report = FilterReport({"align": removed}, len(kept), removed,
                          details={"table": table, "threshold": threshold})
    return ParallelCorpus(kept), report


def save_scores_tsv(path, rows):
    """Rows of (index, rule flag string, ced, sim, align score)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index\trules\tced\tsim\talign\n")
        for idx, flags, ced, cos, align in rows:
            fh.write(f"{idx}\t{flags}\t{ced:.6g}\t{cos:.6g}\t{align:.6g}\n")
