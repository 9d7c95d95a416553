import numpy as np
import pytest

from deskmt import corpus
from deskmt.corpus import (
    EOS, MergeTable, MonoCorpus, ParallelCorpus, TaskSpec, TokenSeq, Vocab,
    bpe_apply, bpe_learn, gen_synthetic_task, load_parallel, save_parallel,
    tokenize,
)


def test_tokenize_whitespace():
    assert tokenize("a b  c") == ["a", "b", "c"]
    assert tokenize("") == []
    assert tokenize("  \t\n ") == []


def test_tokenize_char():
    assert tokenize("你好", mode="char") == ["你", "好"]
    assert tokenize("a b", mode="char") == ["a", "b"]


def test_tokenize_bad_mode():
    with pytest.raises(ValueError):
        tokenize("x", mode="words")


def test_vocab_bijection_and_specials():
    v = Vocab(["b", "a"])
    assert len(v) == 6
    assert v.token(corpus.PAD) == "<pad>"
    assert v.token(corpus.BOS) == "<s>"
    assert v.token(corpus.EOS) == "</s>"
    assert v.token(corpus.UNK) == "<unk>"
    for i, t in enumerate(v.tokens):
        assert v.id(t) == i
    assert v.id("zzz") == corpus.UNK


def test_vocab_encode_decode_roundtrip():
    v = Vocab(["a", "b", "c"])
    seq = v.encode(["c", "a", "b"])
    assert v.decode(seq) == ["c", "a", "b"]
    assert v.decode(v.encode(["a", "mystery"])) == ["a", "<unk>"]


def test_tokenseq_immutable_hashable():
    s = TokenSeq([4, 5, 4])
    assert len(s) == 3 and s[1] == 5
    assert s == TokenSeq([4, 5, 4])
    assert hash(s) == hash(TokenSeq([4, 5, 4]))
    assert s != TokenSeq([4, 5])
    with pytest.raises(AttributeError):
        s.ids = np.array([1])
    with pytest.raises(ValueError):
        s.ids[0] = 9


def test_tokenseq_rejects_eos_and_bad_ids():
    with pytest.raises(ValueError):
        TokenSeq([4, EOS, 5])
    with pytest.raises(ValueError):
        TokenSeq([-1])
    v = Vocab(["a"])
    with pytest.raises(ValueError):
        TokenSeq([99], vocab=v)


def test_parallel_corpus_rejects_empty_side():
    good = (TokenSeq([4]), TokenSeq([5]))
    with pytest.raises(ValueError):
        ParallelCorpus([good, (TokenSeq([]), TokenSeq([4]))])


def test_bpe_learn_basic():
    # pair (a, b) occurs 5 times, more than any pair touching the
    # end-of-word symbol (3) or (b, c) (2)
    table = bpe_learn({"ab": 3, "abc": 2}, 1)
    assert table.merges == [("a", "b")]


def test_bpe_learn_zero_merges():
    assert bpe_learn({"abc": 10}, 0).merges == []


def test_bpe_learn_exhausts_pairs():
    table = bpe_learn({"xy": 1}, 5)
    assert len(table) <= 1


def test_bpe_learn_tie_lexicographic():
    # every pair occurs twice; (a, b) is the lexicographic minimum
    table = bpe_learn({"ab": 2, "cd": 2}, 1)
    assert table.merges[0] == ("a", "b")


def test_bpe_apply_single_merge():
    assert bpe_apply("abc", MergeTable([("a", "b")])) == ["ab", "c"]


def test_bpe_apply_empty_table_identity():
    assert bpe_apply("abc", MergeTable()) == ["a", "b", "c"]


def test_bpe_roundtrip_many_words():
    rng = np.random.default_rng(11)
    words = {}
    for _ in range(300):
        n = rng.integers(1, 9)
        w = "".join(rng.choice(list("abcde"), size=n))
        words[w] = words.get(w, 0) + int(rng.integers(1, 5))
    table = bpe_learn(words, 40)
    for w in words:
        assert "".join(bpe_apply(w, table)) == w


def test_bpe_learn_deterministic():
    words = {"alpha": 3, "alps": 2, "beta": 4}
    assert bpe_learn(words, 10) == bpe_learn(words, 10)


def test_merge_table_io_roundtrip(tmp_path):
    table = bpe_learn({"abab": 4, "abc": 3}, 3)
    p = tmp_path / "merges.txt"
    table.save(p)
    assert MergeTable.load(p) == table


def test_merge_table_rejects_duplicates():
    with pytest.raises(ValueError):
        MergeTable([("a", "b"), ("a", "b")])


def test_gen_copy_task():
    task = gen_synthetic_task(TaskSpec(kind="copy", vocab_size=5), seed=7, n=100)
    assert len(task.train) == 100
    for src, tgt in task.train:
        assert src == tgt


def test_gen_reverse_task():
    task = gen_synthetic_task(TaskSpec(kind="reverse", vocab_size=5), seed=3, n=60)
    for src, tgt in task.train:
        assert list(tgt) == list(reversed(list(src)))


def test_gen_cipher_task_is_permutation():
    task = gen_synthetic_task(TaskSpec(kind="cipher", vocab_size=6), seed=5, n=50)
    assert sorted(task.cipher.values()) == sorted(task.cipher.keys())
    for src, tgt in task.train:
        assert list(tgt) == [task.cipher[i] for i in src]


def test_gen_deterministic():
    spec = TaskSpec(kind="noisy", vocab_size=6, max_len=5, noise=0.2)
    a = gen_synthetic_task(spec, seed=9, n=40)
    b = gen_synthetic_task(spec, seed=9, n=40)
    assert a.train.pairs == b.train.pairs
    assert a.dev.pairs == b.dev.pairs
    assert a.mono_tgt.sentences == b.mono_tgt.sentences


def test_gen_split_disjoint():
    task = gen_synthetic_task(TaskSpec(vocab_size=6, max_len=6), seed=1, n=120)
    train_srcs = {src for src, _ in task.train}
    for split in (task.dev, task.test):
        for src, _ in split:
            assert src not in train_srcs


def test_gen_rejects_tiny_space():
    with pytest.raises(ValueError):
        gen_synthetic_task(TaskSpec(vocab_size=2, max_len=1), seed=0, n=50)


def test_gen_rejects_bad_spec():
    with pytest.raises(ValueError):
        TaskSpec(vocab_size=1)
    with pytest.raises(ValueError):
        TaskSpec(max_len=0)
    with pytest.raises(ValueError):
        TaskSpec(kind="shuffle")


def test_parallel_io_roundtrip(tmp_path):
    task = gen_synthetic_task(TaskSpec(vocab_size=5), seed=2, n=20)
    ps, pt = tmp_path / "s.txt", tmp_path / "t.txt"
    save_parallel(task.train, task.src_vocab, task.tgt_vocab, ps, pt)
    loaded = load_parallel(ps, pt, task.src_vocab, task.tgt_vocab)
    assert loaded.pairs == task.train.pairs


def test_parallel_io_line_mismatch(tmp_path):
    v = Vocab(["a"])
    (tmp_path / "s.txt").write_text("a\na\n")
    (tmp_path / "t.txt").write_text("a\n")
    with pytest.raises(ValueError, match="mismatch"):
        load_parallel(tmp_path / "s.txt", tmp_path / "t.txt", v, v)


def test_parallel_io_bad_utf8(tmp_path):
    v = Vocab(["a"])
    (tmp_path / "s.txt").write_bytes(b"\xff\xfe\n")
    (tmp_path / "t.txt").write_text("a\n")
    with pytest.raises(ValueError, match="UTF-8"):
        load_parallel(tmp_path / "s.txt", tmp_path / "t.txt", v, v)


def test_mono_io_roundtrip(tmp_path):
    task = gen_synthetic_task(TaskSpec(vocab_size=5), seed=4, n=15)
    p = tmp_path / "m.txt"
    corpus.save_mono(task.mono_src, task.src_vocab, p)
    loaded = corpus.load_mono(p, task.src_vocab, lang="src")
    assert loaded.sentences == task.mono_src.sentences
    assert loaded.lang == "src"
