"""Text representation, vocabulary, BPE, and synthetic micro-tasks.

Corpora here are small enough to hold in memory as lists; file formats
are plain UTF-8 text, one sentence per line, so everything stays
inspectable with standard shell tools.
"""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

# standalone end-of-word symbol for BPE; never a character of real input
EOW = "▁"


def tokenize(text, mode="whitespace"):
    """Split text into token strings.

    whitespace mode splits on Unicode whitespace; char mode yields one
    token per non-whitespace character (the stand-in for ideographic
    scripts that ship without word boundaries).
    """
    if mode == "whitespace":
        return text.split()
    if mode == "char":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenize mode: {mode!r}")


class Vocab:
    """Bijective token<->id map with fixed reserved ids 0..3."""

    def __init__(self, tokens):
        self.tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_corpus(cls, sentences):
        seen = sorted({tok for sent in sentences for tok in sent})
        return cls(seen)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token):
        return self._index.get(token, UNK)

    def token(self, idx):
        return self.tokens[idx]

    def encode(self, tokens):
        return TokenSeq([self._index.get(t, UNK) for t in tokens], vocab=self)

    def decode(self, seq):
        return [self.tokens[i] for i in seq.ids]


class TokenSeq:
    """Immutable id sequence; no interior EOS, ids valid for the vocab."""

    __slots__ = ("ids",)

    def __init__(self, ids, vocab=None):
        arr = np.asarray(list(ids), dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("token ids must be one-dimensional")
        if arr.size and (arr.min() < 0 or (vocab is not None and arr.max() >= len(vocab))):
            raise ValueError("token id out of range")
        if np.any(arr == EOS):
            raise ValueError("interior EOS in token sequence")
        arr.setflags(write=False)
        object.__setattr__(self, "ids", arr)

    def __setattr__(self, name, value):
        raise AttributeError("TokenSeq is immutable")

    def __len__(self):
        return int(self.ids.size)

    def __iter__(self):
        return iter(self.ids.tolist())

    def __getitem__(self, i):
        return int(self.ids[i])

    def __eq__(self, other):
        return isinstance(other, TokenSeq) and np.array_equal(self.ids, other.ids)

    def __hash__(self):
        return hash(self.ids.tobytes())

    def __repr__(self):
        return f"TokenSeq({self.ids.tolist()})"

    def reversed(self):
        return TokenSeq(self.ids[::-1])


@dataclass
class ParallelCorpus:
    """Line-aligned sentence pairs; every side of every pair non-empty."""

    pairs: list

    def __post_init__(self):
        for src, tgt in self.pairs:
            if len(src) == 0 or len(tgt) == 0:
                raise ValueError("empty side in parallel pair")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


@dataclass
class MonoCorpus:
    sentences: list
    lang: str = ""

    def __post_init__(self):
        for sent in self.sentences:
            if len(sent) == 0:
                raise ValueError("empty sentence in monolingual corpus")

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)


class MergeTable:
    """Ordered BPE merges; order of application is the learned order."""

    def __init__(self, merges=()):
        self.merges = []
        seen = set()
        for pair in merges:
            pair = (str(pair[0]), str(pair[1]))
            if pair in seen:
                raise ValueError(f"duplicate merge pair {pair}")
            seen.add(pair)
            self.merges.append(pair)

    def __len__(self):
        return len(self.merges)

    def __iter__(self):
        return iter(self.merges)

    def __eq__(self, other):
        return isinstance(other, MergeTable) and self.merges == other.merges

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path):
        merges = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges)


def _word_counts(corpus):
    if isinstance(corpus, dict):
        return dict(corpus)
    return dict(Counter(corpus))


def _initial_segmentation(word):
    if EOW in word:
        raise ValueError("word contains the reserved end-of-word symbol")
    return tuple(word) + (EOW,)


def bpe_learn(corpus, num_merges):
    """Greedy most-frequent-pair merges; ties broken lexicographically.

    corpus: iterable of words, or mapping word -> count. Stops early
    once no adjacent pair occurs at least twice.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    words = {_initial_segmentation(w): c for w, c in _word_counts(corpus).items()}
    merges = []
    for _ in range(num_merges):
        pair_counts = Counter()
        for symbols, count in words.items():
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += count
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)
        merges.append(best)
        merged = best[0] + best[1]
        new_words = {}
        for symbols, count in words.items():
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            new_words[tuple(out)] = new_words.get(tuple(out), 0) + count
        words = new_words
    return MergeTable(merges)


def bpe_apply(word, merges):
    """Segment one word; concatenating the output reproduces the word."""
    symbols = list(_initial_segmentation(word))
    for a, b in merges:
        merged = a + b
        i = 0
        out = []
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                out.append(merged)
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    pieces = [s.replace(EOW, "") for s in symbols]
    return [p for p in pieces if p]


@dataclass
class TaskSpec:
    """Generator settings for a synthetic translation micro-task.

    kind: copy | reverse | cipher | noisy  (noisy = cipher plus
    per-token substitution noise at `noise` rate on the target side).
    vocab_size counts regular tokens per side; both sides share the
    alphabet, cipher tasks permute it with the task seed.
    """

    kind: str = "copy"
    vocab_size: int = 6
    max_len: int = 6
    min_len: int = 1
    noise: float = 0.0
    n_dev: int = 0  # 0 -> max(8, n // 5)
    n_test: int = 0
    n_mono: int = 0  # 0 -> n

    def __post_init__(self):
        if self.kind not in ("copy", "reverse", "cipher", "noisy"):
            raise ValueError(f"unknown task kind: {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_len < 1 or self.min_len < 1 or self.min_len > self.max_len:
            raise ValueError("invalid length bounds")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")
        if self.kind == "noisy" and self.noise == 0.0:
            self.noise = 0.1


_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


def _task_tokens(size):
    if size <= len(_ALPHABET):
        return [ch for ch in _ALPHABET[:size]]
    return [f"w{i}" for i in range(size)]


@dataclass
class SyntheticTask:
    spec: TaskSpec
    src_vocab: Vocab
    tgt_vocab: Vocab
    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus
    mono_src: MonoCorpus
    mono_tgt: MonoCorpus
    cipher: dict = field(default_factory=dict)  # src id -> tgt id


def gen_synthetic_task(spec, seed, n):
    """Deterministic micro-task; dev/test sources never occur in train."""
    rng = np.random.default_rng(seed)
    tokens = _task_tokens(spec.vocab_size)
    src_vocab = Vocab(tokens)
    tgt_vocab = Vocab(tokens)
    regular = np.arange(len(SPECIALS), len(SPECIALS) + spec.vocab_size)

    if spec.kind in ("cipher", "noisy"):
        perm = rng.permutation(spec.vocab_size)
        cipher = {int(regular[i]): int(regular[perm[i]]) for i in range(spec.vocab_size)}
    else:
        cipher = {int(i): int(i) for i in regular}

    def draw_src():
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        return TokenSeq(rng.choice(regular, size=length))

    def map_tgt(src):
        ids = [cipher[i] for i in src]
        if spec.kind == "reverse":
            ids = ids[::-1]
        if spec.kind == "noisy":
            for i in range(len(ids)):
                if rng.random() < spec.noise:
                    ids[i] = int(rng.choice(regular))
        return TokenSeq(ids)

    n_dev = spec.n_dev or max(8, n // 5)
    n_test = spec.n_test or max(8, n // 5)
    n_mono = spec.n_mono or n

    train_src, train_set = [], set()
    held_src, held_set = [], set()
    attempts = 0
    budget = 400 * (n + n_dev + n_test)
    while len(train_src) < n:
        attempts += 1
        if attempts > budget:
            raise ValueError("sequence space too small for requested corpus sizes")
        src = draw_src()
        if src in held_set:
            continue
        train_src.append(src)
        train_set.add(src)
    while len(held_src) < n_dev + n_test:
        attempts += 1
        if attempts > budget:
            raise ValueError("sequence space too small for disjoint dev/test split")
        src = draw_src()
        if src in train_set or src in held_set:
            continue
        held_src.append(src)
        held_set.add(src)

    def make_pairs(sources):
        return ParallelCorpus([(s, map_tgt(s)) for s in sources])

    train = make_pairs(train_src)
    dev = make_pairs(held_src[:n_dev])
    test = make_pairs(held_src[n_dev:])
    mono_src = MonoCorpus([draw_src() for _ in range(n_mono)], lang="src")
    mono_tgt = MonoCorpus([map_tgt(draw_src()) for _ in range(n_mono)], lang="tgt")
    return SyntheticTask(spec, src_vocab, tgt_vocab, train, dev, test,
                         mono_src, mono_tgt, cipher)


def _read_lines(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValueError(f"{path}: not valid UTF-8") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_parallel(path_src, path_tgt, src_vocab, tgt_vocab, mode="whitespace"):
    src_lines = _read_lines(path_src)
    tgt_lines = _read_lines(path_tgt)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"line-count mismatch: {path_src} has {len(src_lines)}, "
            f"{path_tgt} has {len(tgt_lines)}"
        )
    pairs = [
        (src_vocab.encode(tokenize(s, mode)), tgt_vocab.encode(tokenize(t, mode)))
        for s, t in zip(src_lines, tgt_lines)
    ]
    return ParallelCorpus(pairs)


def save_parallel(corpus, src_vocab, tgt_vocab, path_src, path_tgt):
    for path, vocab, side in ((path_src, src_vocab, 0), (path_tgt, tgt_vocab, 1)):
        with open(path, "w", encoding="utf-8") as fh:
            for pair in corpus:
                fh.write(" ".join(vocab.decode(pair[side])) + "\n")


def load_mono(path, vocab, lang="", mode="whitespace"):
    return MonoCorpus([vocab.encode(tokenize(ln, mode)) for ln in _read_lines(path)], lang=lang)


def save_mono(corpus, vocab, path):
    with open(path, "w", encoding="utf-8") as fh:
        for sent in corpus:
            fh.write(" ".join(vocab.decode(sent)) + "\n")
