"""Reconstruction and consistency objectives over a model pair."""

from types import SimpleNamespace

import numpy as np
import pytest

from deskmt.corpus import EOS, MonoCorpus, TaskSpec, TokenSeq, gen_synthetic_task
from deskmt.datasel import lm_train
from deskmt.duality import (DualConfig, DualPair, dsl_loss, dul_grad_exact,
                            dul_grad_mc, train_dual)
from deskmt.model import base
from deskmt.train import TrainConfig, dev_bleu, train_mle


def tiny_task(seed=0):
    return gen_synthetic_task(
        TaskSpec(kind="cipher", vocab_size=3, max_len=2, min_len=1,
                 n_dev=2, n_test=2), seed=seed, n=6)


def tiny_pair(seed=0, init_scale=0.3):
    task = tiny_task(seed)
    primal = base.Seq2SeqModel.build(
        "tabular", task.src_vocab, task.tgt_vocab, max_len=2, radius=1,
        init_scale=init_scale, seed=seed)
    dual = base.Seq2SeqModel.build(
        "tabular", task.tgt_vocab, task.src_vocab, direction="T2S",
        max_len=2, radius=1, init_scale=init_scale, seed=seed + 100)
    src_lm = lm_train([x for x, _ in task.train.pairs], order=2,
                      vocab=task.src_vocab)
    tgt_lm = lm_train([y for _, y in task.train.pairs], order=2,
                      vocab=task.tgt_vocab)
    return DualPair(primal, dual, src_lm, tgt_lm), task


class RewardWrapper:
    """Stand-in dual model with a controlled reconstruction score."""

    def __init__(self, inner, constant=None, shift=0.0):
        self.inner = inner
        self.constant = constant
        self.shift = shift
        self.src_vocab = inner.src_vocab
        self.tgt_vocab = inner.tgt_vocab

    def logprob(self, y, x, terminated=True):
        if self.constant is not None:
            return self.constant
        return self.inner.logprob(y, x, terminated=terminated) + self.shift


# ---- pair and config validation ------------------------------------


def test_pair_rejects_mismatched_vocabs():
    task_a = tiny_task(0)
    wide = gen_synthetic_task(
        TaskSpec(kind="cipher", vocab_size=5, max_len=2, min_len=1,
                 n_dev=2, n_test=2), seed=0, n=6)
    primal = base.Seq2SeqModel.build(
        "tabular", task_a.src_vocab, task_a.tgt_vocab, max_len=2, radius=1)
    bad_dual = base.Seq2SeqModel.build(
        "tabular", wide.tgt_vocab, wide.src_vocab, direction="T2S",
        max_len=2, radius=1)
    lm = lm_train([x for x, _ in task_a.train.pairs], order=2,
                  vocab=task_a.src_vocab)
    with pytest.raises(ValueError, match="vocab"):
        DualPair(primal, bad_dual, lm, lm)


def test_pair_rejects_mismatched_lm_vocab():
    pair, task = tiny_pair()
    wide = gen_synthetic_task(
        TaskSpec(kind="cipher", vocab_size=5, max_len=2, min_len=1,
                 n_dev=2, n_test=2), seed=0, n=6)
    bad_lm = lm_train([x for x, _ in wide.train.pairs], order=2,
                      vocab=wide.src_vocab)
    with pytest.raises(ValueError, match="LM vocab"):
        DualPair(pair.primal, pair.dual, bad_lm, pair.tgt_lm)


def test_config_validation():
    with pytest.raises(ValueError):
        DualConfig(samples_per_sentence=0)
    with pytest.raises(ValueError):
        DualConfig(dsl_weight=-0.1)
    with pytest.raises(ValueError):
        DualConfig(n_mle=0, n_dul=0, n_dsl=0)
    with pytest.raises(ValueError):
        DualConfig(n_dul=-1)
    with pytest.raises(ValueError):
        DualConfig(warm_frac=1.0)
    DualConfig(warm_frac=0.0)  # no warm stage is legal


# ---- exact gradient -------------------------------------------------


def test_exact_constant_reward_is_zero():
    pair, task = tiny_pair()
    const = DualPair(pair.primal, RewardWrapper(pair.dual, constant=-1.5),
                     pair.src_lm, pair.tgt_lm)
    g = dul_grad_exact(const, task.train.pairs[0][0])
    assert np.abs(g).max() <= 1e-8


def test_exact_constant_shift_invariance():
    pair, _ = tiny_pair()
    x = TokenSeq([4, 6])
    g0 = dul_grad_exact(pair, x)
    shifted = DualPair(pair.primal, RewardWrapper(pair.dual, shift=7.25),
                       pair.src_lm, pair.tgt_lm)
    g1 = dul_grad_exact(shifted, x)
    assert np.abs(g1 - g0).max() <= 1e-8


def test_exact_matches_numeric_brute_force():
    # oracle: central differences of the expected reconstruction reward,
    # recomputed from a fresh enumeration at each perturbed point
    pair, _ = tiny_pair()
    primal, dual = pair.primal, pair.dual
    x = TokenSeq([4, 6])
    g = dul_grad_exact(pair, x)
    live = np.abs(g) > 1e-4
    assert live.sum() >= 20  # the probe point must exercise real coordinates

    def expected_reward():
        total = 0.0
        for y, p, terminated in primal.enumerate_translations(
                x, include_unterminated=True):
            if p == 0.0:
                continue
            total += p * dual.logprob(y, x)
        return total

    rng = np.random.default_rng(7)
    coords = list(np.argsort(-np.abs(g))[:16])
    coords += list(rng.choice(np.where(~live)[0], size=8, replace=False))
    flat = primal.get_flat()
    h = 1e-5
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        primal.set_flat(flat)
        up = expected_reward()
        flat[c] = orig - h
        primal.set_flat(flat)
        down = expected_reward()
        flat[c] = orig
        primal.set_flat(flat)
        fd = (up - down) / (2 * h)
        assert abs(fd - g[c]) <= 1e-4 * max(abs(fd), abs(g[c]), 1e-8)


# ---- Monte-Carlo estimator ------------------------------------------


def test_mc_matches_exact_within_standard_errors():
    pair, _ = tiny_pair()
    x = TokenSeq([4, 6])
    exact = dul_grad_exact(pair, x)
    runs = np.stack([dul_grad_mc(pair, x, 400, seed=1000 + r)
                     for r in range(50)])
    mean = runs.mean(axis=0)
    se = runs.std(axis=0, ddof=1) / np.sqrt(runs.shape[0])
    spread = se > 0
    assert spread.sum() >= 20
    z = np.abs(mean - exact)[spread] / se[spread]
    assert z.max() <= 4.0
    assert np.abs(mean - exact)[~spread].max() <= 1e-6


def test_mc_k1_is_single_reinforce_term():
    pair, _ = tiny_pair()
    x = TokenSeq([4, 6])
    rng = np.random.default_rng(42)
    y, terminated = pair.primal.sample_full(x, rng=rng)
    manual = (pair.dual.logprob(y, x)
              * pair.primal.grad_logprob(x, y, terminated=terminated))
    assert np.array_equal(dul_grad_mc(pair, x, 1, seed=42), manual)


def test_mc_equals_per_sample_average():
    # dedup before evaluation must not change the estimate
    pair, _ = tiny_pair()
    x = TokenSeq([4, 6])
    K = 64
    rng = np.random.default_rng(9)
    total = np.zeros(pair.primal.params.size)
    for _ in range(K):
        y, terminated = pair.primal.sample_full(x, rng=rng)
        total += (pair.dual.logprob(y, x)
                  * pair.primal.grad_logprob(x, y, terminated=terminated))
    np.testing.assert_allclose(dul_grad_mc(pair, x, K, seed=9), total / K,
                               rtol=0, atol=1e-12)


def test_mc_deterministic_given_seed():
    pair, _ = tiny_pair()
    x = TokenSeq([4, 6])
    a = dul_grad_mc(pair, x, 32, seed=5)
    b = dul_grad_mc(pair, x, 32, seed=5)
    c = dul_grad_mc(pair, x, 32, seed=6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_mc_degenerate_primal_equals_exact():
    pair, task = tiny_pair()
    det = base.Seq2SeqModel.build("tabular", task.src_vocab, task.tgt_vocab,
                                  max_len=2, radius=1)
    det.params["pos"][0, 4] = 60.0
    det.params["pos"][1, EOS] = 60.0
    dpair = DualPair(det, pair.dual, pair.src_lm, pair.tgt_lm)
    x = TokenSeq([4, 6])
    exact = dul_grad_exact(dpair, x)
    for K in (1, 3, 17):
        mc = dul_grad_mc(dpair, x, K, seed=K)
        assert np.abs(mc - exact).max() <= 1e-8


def test_mc_baseline_variant():
    pair, _ = tiny_pair()
    x = TokenSeq([4, 6])
    # sample-mean baseline: replay the draw and recenter by hand
    K = 50
    rng = np.random.default_rng(11)
    samples = [pair.primal.sample_full(x, rng=rng) for _ in range(K)]
    rewards = [pair.dual.logprob(y, x) for y, _ in samples]
    rbar = sum(rewards) / K
    total = np.zeros(pair.primal.params.size)
    for (y, terminated), r in zip(samples, rewards):
        total += (r - rbar) * pair.primal.grad_logprob(
            x, y, terminated=terminated)
    got = dul_grad_mc(pair, x, K, seed=11, baseline=True)
    np.testing.assert_allclose(got, total / K, rtol=0, atol=1e-12)
    # a single sample is its own mean, so the centered term vanishes
    assert np.abs(dul_grad_mc(pair, x, 1, seed=11, baseline=True)).max() == 0.0


def test_mc_rejects_bad_k():
    pair, _ = tiny_pair()
    with pytest.raises(ValueError, match="K"):
        dul_grad_mc(pair, TokenSeq([4]), 0, seed=0)


# ---- consistency loss -----------------------------------------------


def test_dsl_hand_value():
    fake = SimpleNamespace(
        src_lm=SimpleNamespace(logprob=lambda s: -1.0),
        primal=SimpleNamespace(logprob=lambda a, b: -2.0),
        tgt_lm=SimpleNamespace(logprob=lambda s: -1.5),
        dual=SimpleNamespace(logprob=lambda a, b: -1.0))
    x = TokenSeq([4])
    assert dsl_loss(fake, x, x) == pytest.approx(0.25, abs=1e-12)


def test_dsl_zero_at_consistency():
    lp = {"src": -1.25, "primal": -3.5}
    fake = SimpleNamespace(
        src_lm=SimpleNamespace(logprob=lambda s: lp["src"]),
        primal=SimpleNamespace(logprob=lambda a, b: lp["primal"]),
        tgt_lm=SimpleNamespace(logprob=lambda s: -2.0),
        dual=SimpleNamespace(logprob=lambda a, b: lp["src"] + lp["primal"] + 2.0))
    x = TokenSeq([4])
    assert dsl_loss(fake, x, x) == 0.0


def test_dsl_swap_symmetry_and_nonnegative():
    from deskmt.duality import _flip

    pair, task = tiny_pair()
    flipped = _flip(pair)
    for x, y in task.train.pairs[:4]:
        forward = dsl_loss(pair, x, y)
        backward = dsl_loss(flipped, y, x)
        assert forward >= 0.0
        assert forward == pytest.approx(backward, abs=1e-12)


# ---- joint training -------------------------------------------------


def train_task(seed=5):
    return gen_synthetic_task(
        TaskSpec(kind="cipher", vocab_size=6, max_len=6, min_len=2),
        seed=seed, n=40)


def fresh_models(task):
    primal = base.Seq2SeqModel.build(
        "tabular", task.src_vocab, task.tgt_vocab, max_len=6, radius=1)
    dual = base.Seq2SeqModel.build(
        "tabular", task.tgt_vocab, task.src_vocab, direction="T2S",
        max_len=6, radius=1)
    return primal, dual


def task_lms(task):
    src_lm = lm_train(task.mono_src, order=2, vocab=task.src_vocab)
    tgt_lm = lm_train(task.mono_tgt, order=2, vocab=task.tgt_vocab)
    return src_lm, tgt_lm


def test_reduces_to_plain_mle_bitwise():
    task = train_task()
    # 37 steps with interval 10 also exercises the final odd checkpoint
    tc = TrainConfig(steps=37, batch_tokens=32, checkpoint_interval=10)

    reference, _ = fresh_models(task)
    train_mle(reference, task.train, dev=task.dev, config=tc)

    primal, dual = fresh_models(task)
    pair = DualPair(primal, dual, *task_lms(task))
    out = train_dual(pair, task.train, None, None, dev=task.dev,
                     config=DualConfig(dsl_weight=0.0), train_config=tc)
    assert out is pair
    assert np.array_equal(reference.get_flat(), primal.get_flat())


def test_reduces_when_phases_disabled_by_counts():
    # mono data present but the phase counts gate it off
    task = train_task()
    tc = TrainConfig(steps=25, batch_tokens=32, checkpoint_interval=10)

    reference, _ = fresh_models(task)
    train_mle(reference, task.train, config=tc)

    primal, dual = fresh_models(task)
    pair = DualPair(primal, dual, *task_lms(task))
    train_dual(pair, task.train, task.mono_src, task.mono_tgt,
               config=DualConfig(n_dul=0, dsl_weight=0.0), train_config=tc)
    assert np.array_equal(reference.get_flat(), primal.get_flat())


def test_same_seed_identical():
    task = train_task()
    tc = TrainConfig(steps=30, batch_tokens=32, checkpoint_interval=10)
    results = []
    for _ in range(2):
        primal, dual = fresh_models(task)
        pair = DualPair(primal, dual, *task_lms(task))
        train_dual(pair, task.train, task.mono_src, task.mono_tgt,
                   dev=task.dev, config=DualConfig(), train_config=tc)
        results.append((primal.get_flat(), dual.get_flat()))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])


def test_empty_bilingual_raises():
    task = train_task()
    primal, dual = fresh_models(task)
    pair = DualPair(primal, dual, *task_lms(task))
    empty = SimpleNamespace(pairs=[])
    with pytest.raises(ValueError, match="empty"):
        train_dual(pair, empty, None, None)


def test_noisy_channel_beats_plain_mle():
    # bilingual pairs carry target-side noise; clean marginals enter only
    # through the mono corpora and the reconstruction/consistency phases
    wins = 0
    for seed in range(10):
        noisy = gen_synthetic_task(
            TaskSpec(kind="noisy", vocab_size=6, max_len=6, min_len=2,
                     noise=0.35), seed=seed, n=60)
        clean = gen_synthetic_task(
            TaskSpec(kind="cipher", vocab_size=6, max_len=6, min_len=2),
            seed=seed, n=60)
        assert noisy.cipher == clean.cipher  # same permutation, clean dev is valid
        tc = TrainConfig(steps=300, batch_tokens=64, seed=seed)

        def fresh(direction="S2T"):
            sv, tv = (noisy.src_vocab, noisy.tgt_vocab)
            if direction == "T2S":
                sv, tv = tv, sv
            return base.Seq2SeqModel.build(
                "tabular", sv, tv, direction=direction, max_len=6, radius=2)

        baseline = fresh()
        train_mle(baseline, noisy.train, dev=clean.dev, config=tc)

        primal, dual = fresh(), fresh("T2S")
        src_lm = lm_train(clean.mono_src, order=2, vocab=clean.src_vocab)
        tgt_lm = lm_train(clean.mono_tgt, order=2, vocab=clean.tgt_vocab)
        pair = DualPair(primal, dual, src_lm, tgt_lm)
        train_dual(pair, noisy.train, clean.mono_src, clean.mono_tgt,
                   dev=clean.dev,
                   config=DualConfig(samples_per_sentence=8, dsl_weight=1.0),
                   train_config=tc)
        wins += dev_bleu(primal, clean.dev) >= dev_bleu(baseline, clean.dev)
    assert wins >= 8
