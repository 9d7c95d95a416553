"""Corpus BLEU and direct-assessment statistics.

The BLEU half reproduces the classic international-evaluation scorer:
13a tokenization (punctuation and digit-boundary splitting), modified
n-gram precision up to 4-grams clipped against the per-segment maximum
over references, effective reference length chosen closest to the
hypothesis (ties to the shorter), exponential smoothing for zero
counts. Scores are bit-comparable with the widely used reference
implementation at matching settings.

The statistics half covers z-standardization per annotator,
Mann-Whitney significance (exact for small samples), walk-down cluster
ranking, paired annotator reliability, and multi-campaign aggregation.
"""

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

NGRAM_ORDER = 4

# ---------------------------------------------------------------------------
# BLEU


def tokenize_13a(line):
    """Punctuation/digit-boundary tokenization, then whitespace split."""
    norm = line
    norm = norm.replace("<skipped>", "")
    norm = norm.replace("-\n", "")
    norm = norm.replace("\n", " ")
    norm = norm.replace("&quot;", '"')
    norm = norm.replace("&amp;", "&")
    norm = norm.replace("&lt;", "<")
    norm = norm.replace("&gt;", ">")
    norm = f" {norm} "
    norm = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", norm)
    norm = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", norm)
    norm = re.sub(r"([\.,])([^0-9])", r" \1 \2", norm)
    norm = re.sub(r"([0-9])(-)", r"\1 \2 ", norm)
    norm = re.sub(r"\s+", " ", norm)
    return norm.strip()


TOKENIZERS = {
    "13a": tokenize_13a,
    "none": lambda line: line,
}


@dataclass
class BleuReport:
    score: float
    precisions: list
    bp: float
    sys_len: int
    ref_len: int
    signature: str

    def __str__(self):
        precs = "/".join(f"{p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f} {precs} "
                f"(BP = {self.bp:.3f} ratio = {self.sys_len / max(self.ref_len, 1):.3f} "
                f"hyp_len = {self.sys_len} ref_len = {self.ref_len})\n{self.signature}")


def _extract_ngrams(tokens):
    counts = Counter()
    for n in range(1, NGRAM_ORDER + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


def bleu(hypotheses, reference_sets, tokenization="13a", use_effective_order=False):
    """Corpus BLEU.

    hypotheses: list of strings. reference_sets: per-segment list of
    1..R reference strings. Effective reference length per segment is
    the reference closest in length to the hypothesis, shorter on ties.
    """
    if tokenization not in TOKENIZERS:
        raise ValueError(f"unknown tokenization {tokenization!r}")
    if len(hypotheses) != len(reference_sets):
        raise ValueError("hypothesis/reference segment count mismatch")
    if not hypotheses:
        raise ValueError("empty corpus")
    tok = TOKENIZERS[tokenization]
    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    sys_len = 0
    ref_len = 0
    max_refs = 0
    for hyp, refs in zip(hypotheses, reference_sets):
        if not refs:
            raise ValueError("segment with no references")
        max_refs = max(max_refs, len(refs))
        hyp_toks = tok(hyp).split()
        sys_len += len(hyp_toks)
        ref_toklists = [tok(r).split() for r in refs]
        closest = min(ref_toklists,
                      key=lambda r: (abs(len(hyp_toks) - len(r)), len(r)))
        ref_len += len(closest)
        clipped = Counter()
        for r in ref_toklists:
            r_counts = _extract_ngrams(r)
            for ng, c in r_counts.items():
                clipped[ng] = max(clipped[ng], c)
        hyp_counts = _extract_ngrams(hyp_toks)
        for ng, c in hyp_counts.items():
            n = len(ng) - 1
            total[n] += c
            correct[n] += min(c, clipped.get(ng, 0))

    precisions = [0.0] * NGRAM_ORDER
    smooth = 1.0
    effective_order = NGRAM_ORDER
    for n in range(NGRAM_ORDER):
        if total[n] == 0:
            break
        if use_effective_order:
            effective_order = n + 1
        if correct[n] == 0:
            smooth *= 2
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]

    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0
    else:
        bp = 1.0

    def safe_log(p):
        return math.log(p) if p > 0 else -9999999999.0

    score = bp * math.exp(
        sum(safe_log(p) for p in precisions[:effective_order]) / effective_order
    )
    signature = (f"BLEU+case.mixed+numrefs.{max_refs}+smooth.exp"
                 f"+tok.{tokenization}+version.desk")
    return BleuReport(score, precisions, bp, sys_len, ref_len, signature)


# ---------------------------------------------------------------------------
# Direct-assessment statistics


@dataclass
class SegmentScore:
    annotator: str
    segment: str
    system: str
    item_type: str  # TGT | CHK | BAD
    raw: float
    z: float = None
    start: float = 0.0
    end: float = 0.0

    def __post_init__(self):
        if self.item_type not in ("TGT", "CHK", "BAD"):
            raise ValueError(f"bad item type {self.item_type!r}")
        if not 0.0 <= self.raw <= 100.0:
            raise ValueError("raw score out of [0, 100]")


def zscore_standardize(scores, ddof=1, exclude_bad=True):
    """Fill z per annotator; returns (standardized scores, flagged set).

    BAD items are excluded from each annotator's mean/SD by default but
    still receive z values. Annotators whose reference pool has fewer
    than 2 scores or zero variance are flagged and their scores dropped.
    """
    by_annotator = {}
    for s in scores:
        by_annotator.setdefault(s.annotator, []).append(s)
    out = []
    flagged = set()
    for annotator, items in by_annotator.items():
        pool = [s.raw for s in items
                if not (exclude_bad and s.item_type == "BAD")]
        if len(pool) < 2:
            flagged.add(annotator)
            continue
        mean = float(np.mean(pool))
        sd = float(np.std(pool, ddof=ddof))
        if sd == 0.0:
            flagged.add(annotator)
            continue
        for s in items:
            out.append(SegmentScore(s.annotator, s.segment, s.system,
                                    s.item_type, s.raw,
                                    z=(s.raw - mean) / sd,
                                    start=s.start, end=s.end))
    return out, flagged


def _phi(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def _average_ranks(pooled):
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    ranks = [0.0] * len(pooled)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


EXACT_MW_MAX = 20  # combined size bound for exhaustive enumeration


def mann_whitney(a, b):
    """Two-sided Mann-Whitney p with average ranks and tie correction.

    Exact permutation enumeration when len(a)+len(b) <= 20; normal
    approximation with tie correction and continuity correction above.
    """
    a = list(a)
    b = list(b)
    if not a or not b:
        raise ValueError("empty sample")
    n1, n2 = len(a), len(b)
    pooled = a + b
    ranks = _average_ranks(pooled)
    r1 = sum(ranks[:n1])
    u_obs = r1 - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0

    if n1 + n2 <= EXACT_MW_MAX:
        dev_obs = abs(u_obs - mu)
        count = 0
        total = 0
        min_sum = n1 * (n1 + 1) / 2.0
        for combo in combinations(range(n1 + n2), n1):
            u = sum(ranks[i] for i in combo) - min_sum
            total += 1
            if abs(u - mu) >= dev_obs - 1e-12:
                count += 1
        return count / total

    n = n1 + n2
    tie_counts = Counter(pooled).values()
    tie_term = sum(t ** 3 - t for t in tie_counts) / (n * (n - 1))
    sigma2 = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if sigma2 <= 0:
        return 1.0
    z = (abs(u_obs - mu) - 0.5) / math.sqrt(sigma2)
    z = max(z, 0.0)
    return min(1.0, 2.0 * (1.0 - _phi(z)))


@dataclass
class ClusterRanking:
    clusters: list  # list of lists of (system, avg_raw, avg_z)

    def membership(self):
        return [frozenset(sys for sys, _, _ in cluster) for cluster in self.clusters]

    def flat(self):
        return [entry for cluster in self.clusters for entry in cluster]


def cluster_systems(scores, p_threshold=0.05, rule="every", ddof=1,
                    standardized=False):
    """Walk-down clustering of systems by standardized score.

    scores: SegmentScore list (TGT items are used for system scoring).
    Systems are sorted by mean z; walking down, a new cluster starts
    when the candidate is significantly worse (two-sided Mann-Whitney
    p <= p_threshold and lower mean) than every member of the current
    cluster ("every"), or than its best member ("best").
    """
    if rule not in ("every", "best"):
        raise ValueError(f"unknown cluster rule {rule!r}")
    if not standardized:
        scores, _ = zscore_standardize(scores, ddof=ddof)
    z_by_system = {}
    raw_by_system = {}
    for s in scores:
        if s.item_type != "TGT":
            continue
        z_by_system.setdefault(s.system, []).append(s.z)
        raw_by_system.setdefault(s.system, []).append(s.raw)
    for system, zs in z_by_system.items():
        if len(zs) < 2:
            raise ValueError(f"system {system!r} has fewer than 2 scores")

    ordered = sorted(z_by_system,
                     key=lambda sysid: (-float(np.mean(z_by_system[sysid])), sysid))

    def significantly_worse(candidate, member):
        cz, mz = z_by_system[candidate], z_by_system[member]
        if np.mean(cz) >= np.mean(mz):
            return False
        return mann_whitney(cz, mz) <= p_threshold

    clusters = []
    current = []
    for system in ordered:
        if current:
            members = current if rule == "every" else [current[0]]
            if all(significantly_worse(system, m) for m in members):
                clusters.append(current)
                current = []
        current.append(system)
    if current:
        clusters.append(current)

    return ClusterRanking([
        [(sysid,
          float(np.mean(raw_by_system[sysid])),
          float(np.mean(z_by_system[sysid])))
         for sysid in cluster]
        for cluster in clusters
    ])


EXACT_PAIRS_MAX = 12


def reliability_check(pairs, p_threshold=0.05):
    """One-sided paired test that BAD scores sit below TGT scores.

    pairs: list of (tgt_raw, bad_raw). Returns "pass", "fail", or
    "indeterminate" (fewer than 5 pairs). Sign-flip permutation test on
    the mean difference, exact up to 12 pairs.
    """
    if len(pairs) < 5:
        return "indeterminate"
    d = np.array([t - b for t, b in pairs], dtype=float)
    t_obs = d.sum()
    if np.all(d == 0):
        return "fail"
    n = len(d)
    if n <= EXACT_PAIRS_MAX:
        signs = np.array([[1 if (m >> i) & 1 else -1 for i in range(n)]
                          for m in range(2 ** n)])
        sums = signs @ np.abs(d)
        p = float(np.mean(sums >= t_obs - 1e-9))
    else:
        z = t_obs / math.sqrt(float((d ** 2).sum()))
        p = 1.0 - _phi(z)
    return "pass" if p <= p_threshold else "fail"


def aggregate_meta(campaign_score_sets):
    """Concatenate campaigns over an identical segment/system grid.

    Standardization is recomputed over the combined pool with annotators
    namespaced per campaign. Campaigns whose TGT grids differ are
    refused.
    """
    if not campaign_score_sets:
        raise ValueError("no campaigns to aggregate")
    grids = []
    for scores in campaign_score_sets:
        grids.append({(s.segment, s.system) for s in scores if s.item_type == "TGT"})
    for grid in grids[1:]:
        if grid != grids[0]:
            raise ValueError("campaigns cover different segment/system grids")
    combined = []
    for i, scores in enumerate(campaign_score_sets):
        for s in scores:
            combined.append(SegmentScore(f"c{i}:{s.annotator}", s.segment,
                                         s.system, s.item_type, s.raw,
                                         start=s.start, end=s.end))
    standardized, _ = zscore_standardize(combined)
    return standardized


def load_scores_tsv(path):
    """Release-format TSV: annotator, segment, system, type, raw, start, end."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            annotator, segment, system, item_type, raw, start, end = line.split("\t")
            out.append(SegmentScore(annotator, segment, system, item_type,
                                    float(raw), start=float(start), end=float(end)))
    return out


def save_scores_tsv(path, scores):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(f"{s.annotator}\t{s.segment}\t{s.system}\t{s.item_type}"
                     f"\t{s.raw:g}\t{s.start:g}\t{s.end:g}\n")
