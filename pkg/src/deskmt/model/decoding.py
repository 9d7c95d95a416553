"""Beam decoding and n-best lists.

The n-best text format, one hypothesis per line:

    segment_id ||| token sequence ||| name=value ... ||| total_score

Ranking uses the length-normalized score logprob / max(|y|, 1)^alpha;
alpha=0 disables the penalty. The raw model log probability always
travels along in the features as raw_logprob.
"""

from ..corpus import EOS, TokenSeq


class NBestItem:
    __slots__ = ("seq", "score", "features")

    def __init__(self, seq, score, features=None):
        self.seq = seq
        self.score = float(score)
        self.features = dict(features or {})

    def __repr__(self):
        return f"NBestItem({self.seq!r}, {self.score:.4f})"


class NBestList:
    """Hypotheses sorted by score descending, duplicates rejected."""

    def __init__(self, items):
        self.items = sorted(items, key=lambda it: -it.score)
        seen = set()
        for it in self.items:
            if it.seq in seen:
                raise ValueError("duplicate sequence in n-best list")
            seen.add(it.seq)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def best(self):
        return self.items[0]


def beam_search(model, x, beam_size, alpha=1.0):
    """Standard beam over terminated hypotheses.

    Every live prefix contributes its EOS close-off before pruning, so
    with beam_size at least the size of the enumerable space nothing is
    ever pruned and the top item is the exact argmax of the normalized
    score.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    model._check_x(x)
    ctx = model._start(x.ids)
    beams = [((), 0.0)]
    finished = []
    for step in range(model.max_len + 1):
        expansions = []
        for ids, lp in beams:
            logp = model._next_logprobs(ctx, list(ids))
            finished.append((ids, lp + float(logp[EOS])))
            if step == model.max_len:
                continue
            for v in range(logp.shape[0]):
                if v == EOS or logp[v] < -1e15:
                    continue
                expansions.append((ids + (v,), lp + float(logp[v])))
        if step == model.max_len or not expansions:
            break
        expansions.sort(key=lambda e: -e[1])
        beams = expansions[:beam_size]

    def norm(ids, lp):
        return lp / max(len(ids), 1) ** alpha

    ranked = sorted(finished, key=lambda f: -norm(*f))
    items = []
    for ids, lp in ranked[:beam_size]:
        seq = TokenSeq(ids)
        if model.orientation == "R2L":
            seq = seq.reversed()
        items.append(NBestItem(seq, norm(ids, lp), {"raw_logprob": lp}))
    return NBestList(items)


def decode_r2l(model, x, beam_size, alpha=1.0):
    """Beam decode with an R2L model; output is in natural order."""
    if model.orientation != "R2L":
        raise ValueError("decode_r2l requires a model with R2L orientation")
    return model.beam_search(x, beam_size, alpha)


def save_nbest(path, nbest_lists, vocab):
    """nbest_lists: mapping segment_id -> NBestList."""
    with open(path, "w", encoding="utf-8") as fh:
        for seg_id in sorted(nbest_lists):
            for it in nbest_lists[seg_id]:
                toks = " ".join(vocab.decode(it.seq))
                feats = " ".join(
                    f"{k}={it.features[k]:.10g}" for k in sorted(it.features)
                )
                fh.write(f"{seg_id} ||| {toks} ||| {feats} ||| {it.score:.10g}\n")


def load_nbest(path, vocab):
    lists = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            seg_s, toks_s, feats_s, score_s = (p.strip() for p in line.split("|||"))
            feats = {}
            for part in feats_s.split():
                k, v = part.split("=")
                feats[k] = float(v)
            item = NBestItem(vocab.encode(toks_s.split()), float(score_s), feats)
            lists.setdefault(int(seg_s), []).append(item)
    return {seg: NBestList(items) for seg, items in lists.items()}
