"""N-best merging, reranking features, and k-best MIRA weight tuning.

Candidates from several systems are pooled per segment, deduplicated,
and scored by a learned linear model over a fixed feature set: the
originating system's score plus a one-hot system identifier, a
per-token language-model score, forward scores from right-to-left and
target-to-source models, and three sentence-vector similarities
(source/candidate, R2L-best/candidate, and source against a round-trip
back-translation of the candidate). Weights come from batch k-best
MIRA driven by sentence-level BLEU against the tuning references.

The candidate files use the n-best line format of the model module;
weights persist as feature_name<TAB>value lines.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import TokenSeq
from .datasel import lm_xent, sentvec, sim
from .model import beam_search

NGRAM_ORDER = 4

_SCALAR_FEATURES = ("LM_Score", "R2L_score", "E2Z_score",
                    "ST_SV", "R2L_SV", "E2Z_SV")


def feature_names(n_systems):
    """Fixed feature order: system score, one-hot block, then scorers."""
    if n_systems < 1:
        raise ValueError("need at least one system")
    return ("SYS_Score",) + tuple(f"SYS_{i}" for i in range(n_systems)) \
        + _SCALAR_FEATURES


@dataclass(frozen=True)
class Scorers:
    """The models behind the non-system features."""

    lm: object
    r2l: object
    e2z: object
    sv: object
    beam_size: int = 4

    def __post_init__(self):
        for name in ("lm", "r2l", "e2z", "sv"):
            if getattr(self, name) is None:
                raise ValueError(f"missing scorer: {name}")


@dataclass(frozen=True)
class Candidate:
    seq: TokenSeq
    system: int
    features: dict
    quality: float = 0.0


@dataclass
class CombinedNBest:
    """Merged per-segment candidate lists; hypotheses unique per segment."""

    segments: list

    def __post_init__(self):
        for seg in self.segments:
            seen = set()
            for cand in seg:
                key = tuple(cand.seq.ids)
                if key in seen:
                    raise ValueError("duplicate hypothesis in segment")
                seen.add(key)
                for name, value in cand.features.items():
                    if not math.isfinite(value):
                        raise ValueError(f"non-finite feature {name}")

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)


def extract_features(candidate, source, system, sys_score, n_systems,
                     scorers, r2l_best):
    """Feature dict for one candidate, in the fixed feature order.

    An empty candidate scores 0.0 on the per-token LM feature and on
    every similarity feature; the model logprob features stay exact.
    """
    feats = {"SYS_Score": float(sys_score)}
    for i in range(n_systems):
        feats[f"SYS_{i}"] = 1.0 if i == system else 0.0

    empty = len(candidate) == 0
    feats["LM_Score"] = 0.0 if empty else -lm_xent(scorers.lm, candidate)
    feats["R2L_score"] = scorers.r2l.logprob(source, candidate)
    feats["E2Z_score"] = scorers.e2z.logprob(candidate, source)

    roundtrip = beam_search(scorers.e2z, candidate,
                            scorers.beam_size).best().seq
    sv_src = sentvec(scorers.sv, source)
    feats["ST_SV"] = 0.0 if empty else sim(sv_src, sentvec(scorers.sv,
                                                           candidate))
    if empty or len(r2l_best) == 0:
        feats["R2L_SV"] = 0.0
    else:
        feats["R2L_SV"] = sim(sentvec(scorers.sv, r2l_best),
                              sentvec(scorers.sv, candidate))
    if len(roundtrip) == 0:
        feats["E2Z_SV"] = 0.0
    else:
        feats["E2Z_SV"] = sim(sv_src, sentvec(scorers.sv, roundtrip))
    return feats


def featurize_nbest(nbest, source, system, n_systems, scorers):
    """Candidates for one segment of one system's n-best list."""
    r2l_best = beam_search(scorers.r2l, source, scorers.beam_size).best().seq
    out = []
    for item in nbest:
        feats = extract_features(item.seq, source, system, item.score,
                                 n_systems, scorers, r2l_best)
        out.append(Candidate(item.seq, system, feats))
    return out


def merge_nbests(systems_segments):
    """Pool candidates per segment across systems and deduplicate.

    systems_segments: per system, a list of per-segment candidate
    lists, all aligned. A hypothesis produced by several systems keeps
    the entry with the highest SYS_Score (lowest system id on ties).
    """
    counts = {len(segs) for segs in systems_segments}
    if len(counts) != 1:
        raise ValueError("systems disagree on segment count")
    merged = []
    for seg_idx in range(counts.pop()):
        by_seq = {}
        for segs in systems_segments:
            for cand in segs[seg_idx]:
                key = tuple(cand.seq.ids)
                best = by_seq.get(key)
                if best is None or _dedup_rank(cand) > _dedup_rank(best):
                    by_seq[key] = cand
        merged.append(sorted(by_seq.values(), key=_candidate_order))
    return CombinedNBest(merged)


def _dedup_rank(cand):
    return (cand.features["SYS_Score"], -cand.system)


def _candidate_order(cand):
    return (cand.system, tuple(cand.seq.ids))


@dataclass(frozen=True)
class RerankConfig:
    C: float = 0.01
    epochs: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.C < 0.0:
            raise ValueError("C must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class RerankWeights:
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.weights.items():
            if not math.isfinite(value):
                raise ValueError(f"non-finite weight {name}")

    def score(self, features):
        return sum(w * features.get(name, 0.0)
                   for name, w in self.weights.items())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for name in sorted(self.weights):
                fh.write(f"{name}\t{self.weights[name]:.10g}\n")

    @classmethod
    def load(cls, path):
        weights = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    name, value = line.rstrip("\n").split("\t")
                    weights[name] = float(value)
        return cls(weights)


def kbmira_train(combined, config=None):
    """Batch k-best MIRA over quality-scored candidate segments.

    Per segment the hope candidate maximizes model+quality and the fear
    candidate model-quality; a violated margin moves the weights along
    the feature difference with step min(C, loss/|dphi|^2). Weights are
    averaged over epoch-end snapshots. Single-candidate segments carry
    no margin information and are skipped.
    """
    cfg = config or RerankConfig()
    segments = [seg for seg in combined if len(seg) >= 2]
    names = sorted({name for seg in segments for cand in seg
                    for name in cand.features})

    # updates run on standardized features so the clipped step treats
    # raw log-scores and bounded similarities alike; the returned
    # weights fold the scaling back in, which reproduces the learner's
    # per-segment ranking on the raw features exactly (the mean shift
    # is constant within a segment)
    pool = [cand.features for seg in segments for cand in seg]
    mu, sd = {}, {}
    for k in names:
        column = np.array([f.get(k, 0.0) for f in pool])
        mu[k] = float(column.mean())
        sd[k] = float(column.std())

    def phi(cand):
        return {k: 0.0 if sd[k] == 0.0 else
                (cand.features.get(k, 0.0) - mu[k]) / sd[k] for k in names}

    w = {name: 0.0 for name in names}
    rng = np.random.default_rng(cfg.seed)
    snapshots = []
    for _ in range(cfg.epochs):
        for seg_idx in rng.permutation(len(segments)):
            seg = segments[seg_idx]
            feats = [phi(c) for c in seg]
            scores = [sum(w[k] * f[k] for k in names) for f in feats]
            # BLEU percentages rescaled so margins are commensurate
            # with the clipped step size
            quality = [c.quality / 100.0 for c in seg]
            hope = max(range(len(seg)),
                       key=lambda i: (scores[i] + quality[i], -i))
            fear = max(range(len(seg)),
                       key=lambda i: (scores[i] - quality[i], -i))
            loss = (quality[hope] - quality[fear]) \
                - (scores[hope] - scores[fear])
            if loss <= 0.0:
                continue
            dphi = {k: feats[hope][k] - feats[fear][k] for k in names}
            norm2 = sum(v * v for v in dphi.values())
            if norm2 == 0.0:
                continue
            step = min(cfg.C, loss / norm2)
            for k in names:
                w[k] += step * dphi[k]
        snapshots.append(dict(w))
    avg = {k: sum(s[k] for s in snapshots) / len(snapshots) for k in names}
    return RerankWeights({k: 0.0 if sd[k] == 0.0 else avg[k] / sd[k]
                          for k in names})


def combine(systems_segments, weights):
    """Best pooled hypothesis per segment under the learned weights.

    Ties break toward the lowest system id, then the lexicographically
    smallest token sequence, which makes the result independent of the
    order the systems are listed in.
    """
    merged = systems_segments if isinstance(systems_segments, CombinedNBest) \
        else merge_nbests(systems_segments)
    picks = []
    for seg in merged:
        if not seg:
            raise ValueError("empty segment")
        best = min(seg, key=lambda c: (-weights.score(c.features),
                                       c.system, tuple(c.seq.ids)))
        picks.append(best.seq)
    return picks


def with_quality(combined, reference_sets, eps=1e-3):
    """Attach sentence-level BLEU against the references per candidate.

    An empty hypothesis matches nothing and scores 0.0.
    """
    if len(reference_sets) != len(combined):
        raise ValueError("segment count mismatch")
    segments = []
    for seg, refs in zip(combined, reference_sets):
        segments.append([
            replace(cand, quality=0.0 if len(cand.seq) == 0 else
                    sentence_bleu(cand.seq, refs, eps=eps))
            for cand in seg])
    return CombinedNBest(segments)


def _tokens(text_or_seq):
    if isinstance(text_or_seq, str):
        return text_or_seq.split()
    return list(text_or_seq.ids if isinstance(text_or_seq, TokenSeq)
                else text_or_seq)


def sentence_bleu(candidate, references, eps=1e-3):
    """Sentence-level BLEU with additive smoothing of zero counts.

    Accepts token sequences or whitespace-separated strings. N-gram
    orders the candidate is too short to contain are dropped; an
    n-gram count of zero is replaced by eps, so disjoint sentences
    score above zero but below one point.
    """
    cand = _tokens(candidate)
    if not cand:
        raise ValueError("empty candidate")
    if not references:
        raise ValueError("need at least one reference")
    refs = [_tokens(r) for r in references]

    log_sum = 0.0
    orders = 0
    for n in range(1, NGRAM_ORDER + 1):
        total = len(cand) - n + 1
        if total < 1:
            break
        clipped = {}
        for ref in refs:
            counts = {}
            for i in range(len(ref) - n + 1):
                ng = tuple(ref[i:i + n])
                counts[ng] = counts.get(ng, 0) + 1
            for ng, c in counts.items():
                clipped[ng] = max(clipped.get(ng, 0), c)
        correct = 0
        seen = {}
        for i in range(total):
            ng = tuple(cand[i:i + n])
            seen[ng] = seen.get(ng, 0) + 1
        for ng, c in seen.items():
            correct += min(c, clipped.get(ng, 0))
        log_sum += math.log(max(correct, eps) / total)
        orders += 1

    closest = min(refs, key=lambda r: (abs(len(cand) - len(r)), len(r)))
    bp = 1.0 if len(cand) >= len(closest) \
        else math.exp(1.0 - len(closest) / len(cand))
    return 100.0 * bp * math.exp(log_sum / orders)
