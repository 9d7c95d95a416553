"""Two-pass models: draft with one decoder, revise with a second."""

import shutil
from collections import deque
from types import SimpleNamespace

import numpy as np
import pytest

import deskmt.deliberation as deliberation
import deskmt.duality as duality
from deskmt.corpus import ParallelCorpus, TaskSpec, TokenSeq, gen_synthetic_task
from deskmt.datasel import lm_train
from deskmt.deliberation import (DelibConfig, DelibModel, combined_training,
                                 delib_decode, delib_dev_bleu, delib_rerank,
                                 delib_train)
from deskmt.duality import DualConfig, DualPair
from deskmt.model import (AttentionModel, NBestItem, NBestList, Seq2SeqModel,
                          average_checkpoints, beam_search)
from deskmt.train import (Adam, TrainConfig, _make_batches, dev_bleu, noam_lr,
                          train_mle)

from fd import fd_gradient_check


def small_task(seed=0, kind="cipher", n=24, **kw):
    spec = dict(kind=kind, vocab_size=5, max_len=4, min_len=1,
                n_dev=6, n_test=8)
    spec.update(kw)
    return gen_synthetic_task(TaskSpec(**spec), seed=seed, n=n)


def attn(task, seed=0, dim=12, layers=1, direction="S2T", draft=False):
    sv, tv = task.src_vocab, task.tgt_vocab
    if direction == "T2S":
        sv, tv = tv, sv
    return AttentionModel(sv, tv, direction=direction,
                          max_len=task.spec.max_len, dim=dim, n_heads=2,
                          n_layers=layers, seed=seed,
                          with_draft_attention=draft)


def zero_draft_blocks(model):
    for layer in range(model.n_layers):
        for part in "qkvo":
            name = f"dec{layer}_c{part}"
            model.params[name] = np.zeros_like(model.params[name])


def test_config_validation():
    cfg = DelibConfig()
    assert cfg.drafts == "sample" and cfg.baseline
    with pytest.raises(ValueError, match="drafts"):
        DelibConfig(drafts="greedy")
    with pytest.raises(ValueError, match="temperature"):
        DelibConfig(temperature=0.0)


def test_pair_validation():
    task = small_task()
    first = attn(task, seed=1)
    second = attn(task, seed=2, draft=True)
    DelibModel(first, second)

    tabular = Seq2SeqModel.build("tabular", task.src_vocab, task.tgt_vocab,
                                 max_len=task.spec.max_len, radius=1)
    with pytest.raises(ValueError, match="micro-attention"):
        DelibModel(tabular, second)
    with pytest.raises(ValueError, match="draft attention"):
        DelibModel(first, attn(task, seed=2))
    with pytest.raises(ValueError, match="must not"):
        DelibModel(attn(task, seed=1, draft=True), second)

    other = small_task(seed=3, vocab_size=6)
    mixed = AttentionModel(other.src_vocab, task.tgt_vocab,
                           max_len=task.spec.max_len, dim=12, n_heads=2,
                           n_layers=1, seed=1)
    with pytest.raises(ValueError, match="target vocab"):
        DelibModel(attn(other, seed=1), second)
    with pytest.raises(ValueError, match="source vocab"):
        DelibModel(mixed, second)
    with pytest.raises(ValueError, match="dim"):
        DelibModel(first, attn(task, seed=2, dim=16, draft=True))


def test_from_single_pass_structure():
    task = small_task()
    single = attn(task, seed=5)
    model = DelibModel.from_single_pass(single, seed=9)
    assert model.second.with_draft_attention
    assert np.array_equal(model.first.get_flat(), single.get_flat())
    for name in single.params.names():
        if name.startswith(("emb_src", "pos_src", "enc")):
            assert np.array_equal(model.second.params[name],
                                  single.params[name]), name
        elif not name.startswith(("dec0_b", "b_")):
            # decoder weights are reseeded; zero-init biases match anyway
            assert not np.array_equal(model.second.params[name],
                                      single.params[name]), name

    copied = DelibModel.from_single_pass(single, seed=9, copy_decoder=True)
    for name in single.params.names():
        assert np.array_equal(copied.second.params[name],
                              single.params[name]), name

    tabular = Seq2SeqModel.build("tabular", task.src_vocab, task.tgt_vocab,
                                 max_len=task.spec.max_len, radius=1)
    with pytest.raises(ValueError, match="micro-attention"):
        DelibModel.from_single_pass(tabular)


def test_zeroed_draft_attention_reduces_to_single_pass():
    # with the draft-attention blocks zeroed and the decoder copied, the
    # second pass must reproduce the single-pass model token for token
    task = small_task()
    single = attn(task, seed=5)
    model = DelibModel.from_single_pass(single, seed=9, copy_decoder=True)
    zero_draft_blocks(model.second)
    for x, y in task.train.pairs[:8]:
        states = model.draft_states(x, y)
        lp_two = model.second._logprob_nat(x.ids, y.ids, True,
                                           draft_mat=states)
        assert lp_two == pytest.approx(single.logprob(x, y), abs=1e-12)
        out = delib_decode(model, x, beam_size=4)
        ref = single.beam_search(x, 4).best()
        assert np.array_equal(out.final.ids, ref.seq.ids)
        assert out.final_score == pytest.approx(ref.score, abs=1e-12)


def test_draft_is_the_first_pass_beam_output():
    task = small_task()
    model = DelibModel.from_single_pass(attn(task, seed=11), seed=3)
    for x, _ in task.train.pairs[:8]:
        out = delib_decode(model, x, beam_size=4)
        ref = model.first.beam_search(x, 4).best()
        assert np.array_equal(out.draft.ids, ref.seq.ids)
        assert out.draft_score == ref.score


def test_second_pass_gradient_finite_difference():
    task = small_task()
    model = DelibModel.from_single_pass(attn(task, seed=11), seed=3)
    second = model.second
    x, y = task.train.pairs[0]
    draft = model.first.beam_search(x, 4).best().seq
    states = model.draft_states(x, draft)

    def get_value():
        return second._logprob_nat(x.ids, y.ids, True, draft_mat=states)

    def get_grad():
        grads = second.zero_grads()
        second._grad_nat(x.ids, y.ids, 1.0, grads, True, draft_mat=states)
        return grads.flatten()

    rng = np.random.default_rng(7)
    fd_gradient_check(get_value, get_grad, second.get_flat(),
                      second.set_flat, rng)

    # probe one coordinate inside every draft-attention block explicitly
    offsets, off = {}, 0
    for name in second.params.names():
        offsets[name] = off
        off += second.params[name].size
    grad = get_grad()
    flat0 = second.get_flat()
    eps = 1e-5
    for layer in range(second.n_layers):
        for part in "qkvo":
            i = offsets[f"dec{layer}_c{part}"] + 3
            bump = np.zeros_like(flat0)
            bump[i] = eps
            second.set_flat(flat0 + bump)
            lp_p = get_value()
            second.set_flat(flat0 - bump)
            lp_m = get_value()
            second.set_flat(flat0)
            fd = (lp_p - lp_m) / (2 * eps)
            assert abs(fd - grad[i]) <= 1e-4 * max(abs(fd), abs(grad[i]), 1e-8)


def test_draft_ids_and_matrix_agree_but_route_differently():
    # same forward value either way; the matrix path treats the draft as
    # a constant, so only the id path reaches the target embeddings
    task = small_task()
    second = DelibModel.from_single_pass(attn(task, seed=11), seed=3).second
    x, y = task.train.pairs[0]
    draft_ids = np.array([4, 5, 6], dtype=np.int64)
    mat = second._embed_draft(draft_ids)

    g_ids = second.zero_grads()
    lp_ids = second._grad_nat(x.ids, y.ids, 1.0, g_ids, True,
                              draft_ids=draft_ids)
    g_mat = second.zero_grads()
    lp_mat = second._grad_nat(x.ids, y.ids, 1.0, g_mat, True, draft_mat=mat)
    assert lp_ids == lp_mat
    diff = {name for name in second.params.names()
            if not np.array_equal(g_ids[name], g_mat[name])}
    assert diff == {"emb_tgt", "pos_tgt"}

    with pytest.raises(ValueError, match="not both"):
        second._logprob_nat(x.ids, y.ids, True, draft_ids=draft_ids,
                            draft_mat=mat)


def test_empty_draft_states():
    task = small_task()
    model = DelibModel.from_single_pass(attn(task, seed=11), seed=3)
    x, _ = task.train.pairs[0]
    assert model.draft_states(x, TokenSeq([])).shape == (0, model.second.dim)


def test_rerank_single_mode_matches_decode():
    task = small_task()
    model = DelibModel.from_single_pass(attn(task, seed=11), seed=3)
    for x, _ in task.train.pairs[:6]:
        picked = delib_rerank(model, x, beam_size=4)
        decoded = delib_decode(model, x, beam_size=4).final
        assert np.array_equal(picked.ids, decoded.ids)


def test_rerank_modes_agree_when_passes_agree():
    # identical weights and dead draft attention make both passes score
    # every candidate the same, so adding the first pass changes nothing
    task = small_task()
    model = DelibModel.from_single_pass(attn(task, seed=5), seed=9,
                                        copy_decoder=True)
    zero_draft_blocks(model.second)
    for x, _ in task.train.pairs[:6]:
        both = delib_rerank(model, x, beam_size=4, use_both=True)
        alone = delib_rerank(model, x, beam_size=4, use_both=False)
        assert np.array_equal(both.ids, alone.ids)


def test_rerank_combined_score_flips_the_winner(monkeypatch):
    # second pass alone prefers A; adding the first pass's score flips
    # the pick to B: A -1.0 - 5.0/1 = -6.0 vs B -1.1 - 0.2/2 = -1.2
    seq_a, seq_b = TokenSeq([4]), TokenSeq([5, 6])
    finals = NBestList([NBestItem(seq_a, -1.0), NBestItem(seq_b, -1.1)])
    draft = NBestItem(seq_a, -1.0)
    monkeypatch.setattr(deliberation, "_second_pass_nbest",
                        lambda model, x, beam_size, alpha: (draft, finals))
    first_scores = {seq_a: -5.0, seq_b: -0.2}
    stub = SimpleNamespace(first=SimpleNamespace(
        logprob=lambda x, y: first_scores[y]))

    x = TokenSeq([4])
    assert delib_rerank(stub, x, beam_size=2) is seq_a
    assert delib_rerank(stub, x, beam_size=2, use_both=True) is seq_b


def oracle_mle_with_fixed_drafts(model, corpus, tc):
    """Conditional MLE on the second pass, drafts from a frozen first."""
    first, second = model.first, model.second
    entries = [(x, y, 1.0) for x, y in corpus.pairs]
    batches = _make_batches(entries, tc.batch_tokens)
    rng = np.random.default_rng(tc.seed)
    adam = Adam(second.params.size, tc.beta1, tc.beta2, tc.eps)
    checkpoints = deque(maxlen=tc.n_average)
    order = []
    for step in range(1, tc.steps + 1):
        if not order:
            order = list(rng.permutation(len(batches)))
        batch = batches[order.pop(0)]
        grads = second.zero_grads()
        token_sum = 0.0
        for x, y, w in batch:
            token_sum += w * len(y)
            draft = beam_search(first, x, 1).best().seq
            states = model.draft_states(x, draft)
            second._grad_nat(x.ids, second._orient(y).ids, w, grads, True,
                             draft_mat=states if len(states) else None)
        if token_sum > 0.0:
            grad = -grads.flatten() / token_sum
            lr = noam_lr(step, tc.warmup, second.dim, tc.lr_scale)
            second.set_flat(adam.step(second.get_flat(), grad, lr))
        if step % tc.checkpoint_interval == 0 or step == tc.steps:
            checkpoints.append(second.params.copy())
    second.set_flat(average_checkpoints(list(checkpoints)).flatten())


def test_frozen_single_draft_training_is_conditional_mle():
    # one beam draft from a frozen first pass turns the trainer into
    # plain conditional MLE; both routes must agree to the last bit
    task = small_task()
    tc = TrainConfig(steps=23, batch_tokens=16, checkpoint_interval=7)
    trained = DelibModel.from_single_pass(attn(task, seed=21), seed=4)
    oracle = DelibModel.from_single_pass(attn(task, seed=21), seed=4)
    first_before = trained.first.get_flat().copy()

    delib_train(trained, task.train, k_drafts=1,
                config=DelibConfig(drafts="beam", freeze_first=True),
                train_config=tc)
    oracle_mle_with_fixed_drafts(oracle, task.train, tc)

    assert np.array_equal(trained.first.get_flat(), first_before)
    assert np.array_equal(trained.second.get_flat(),
                          oracle.second.get_flat())


def test_train_input_validation():
    task = small_task()
    model = DelibModel.from_single_pass(attn(task), seed=1)
    with pytest.raises(ValueError, match="k_drafts"):
        delib_train(model, task.train, k_drafts=0)
    with pytest.raises(ValueError, match="empty"):
        delib_train(model, ParallelCorpus([]))


def test_divergence_aborts():
    task = small_task()
    model = DelibModel.from_single_pass(attn(task, seed=5), seed=3)
    model.second.params["emb_tgt"][4, 0] = np.nan
    with pytest.raises(RuntimeError, match="diverged"):
        delib_train(model, task.train, k_drafts=1,
                    train_config=TrainConfig(steps=8, batch_tokens=64))


def test_training_improves_over_the_draft_model():
    task = small_task(seed=1, n=40)
    base = attn(task, seed=2)
    train_mle(base, task.train, dev=task.dev,
              config=TrainConfig(steps=200, batch_tokens=64, lr_scale=0.4))
    base_bleu = dev_bleu(base, task.dev)

    model = DelibModel.from_single_pass(base, seed=7, copy_decoder=True)
    delib_train(model, task.train, k_drafts=2, config=DelibConfig(seed=1),
                train_config=TrainConfig(steps=100, batch_tokens=64,
                                         lr_scale=0.2))
    # the policy term moves the first pass too unless frozen
    assert not np.array_equal(model.first.get_flat(), base.get_flat())
    assert delib_dev_bleu(model, task.dev) >= base_bleu


def noisy_clean_pair(seed, n, dim):
    noisy = gen_synthetic_task(
        TaskSpec(kind="noisy", vocab_size=5, max_len=4, min_len=2,
                 noise=0.35), seed=seed, n=n)
    clean = gen_synthetic_task(
        TaskSpec(kind="cipher", vocab_size=5, max_len=4, min_len=2),
        seed=seed, n=n)
    assert noisy.cipher == clean.cipher
    primal = attn(noisy, seed=seed + 20, dim=dim)
    dual = attn(noisy, seed=seed + 40, dim=dim, direction="T2S")
    pair = DualPair(primal, dual,
                    lm_train(clean.mono_src, order=2, vocab=clean.src_vocab),
                    lm_train(clean.mono_tgt, order=2, vocab=clean.tgt_vocab))
    return noisy, clean, pair


def test_combined_training_resumes_at_stage_boundaries(tmp_path, monkeypatch):
    calls = {"dual": 0, "delib": 0}
    real_dual, real_delib = duality.train_dual, deliberation.delib_train

    def spy_dual(*args, **kw):
        calls["dual"] += 1
        return real_dual(*args, **kw)

    def spy_delib(*args, **kw):
        calls["delib"] += 1
        return real_delib(*args, **kw)

    monkeypatch.setattr(duality, "train_dual", spy_dual)
    monkeypatch.setattr(deliberation, "delib_train", spy_delib)

    noisy, clean, _ = noisy_clean_pair(0, n=40, dim=12)
    workdir = str(tmp_path / "stages")
    kw = dict(dev=clean.dev, k_drafts=2, copy_decoder=True,
              dual_config=DualConfig(samples_per_sentence=2, seed=0),
              dual_train_config=TrainConfig(steps=40, batch_tokens=64,
                                            seed=0),
              delib_config=DelibConfig(seed=0),
              delib_train_config=TrainConfig(steps=30, batch_tokens=64,
                                             seed=0))

    cold = combined_training(workdir, noisy_clean_pair(0, 40, 12)[2],
                             noisy.train, clean.mono_src, clean.mono_tgt,
                             **kw)
    assert calls == {"dual": 1, "delib": 1}
    for name in ("stage1_primal", "stage1_primal.manifest", "stage1_dual",
                 "stage2_pseudo.tsv", "stage3_first", "stage3_second",
                 "stage1.ok", "stage2.ok", "stage3.ok"):
        assert (tmp_path / "stages" / name).exists(), name

    # a finished workdir only loads artifacts
    warm = combined_training(workdir, noisy_clean_pair(0, 40, 12)[2],
                             noisy.train, clean.mono_src, clean.mono_tgt,
                             **kw)
    assert calls == {"dual": 1, "delib": 1}
    assert np.array_equal(cold.first.get_flat(), warm.first.get_flat())
    assert np.array_equal(cold.second.get_flat(), warm.second.get_flat())

    # wiping the last stage reruns only that stage
    for name in ("stage3_first", "stage3_first.manifest", "stage3_second",
                 "stage3_second.manifest", "stage3.ok"):
        (tmp_path / "stages" / name).unlink()
    redone = combined_training(workdir, noisy_clean_pair(0, 40, 12)[2],
                               noisy.train, clean.mono_src, clean.mono_tgt,
                               **kw)
    assert calls == {"dual": 1, "delib": 2}
    assert np.array_equal(cold.second.get_flat(), redone.second.get_flat())


def last_token_acc(outs, refs):
    hits = sum(1 for o, r in zip(outs, refs)
               if len(o) and o.ids[-1] == r.ids[-1])
    return hits / len(refs)


def test_second_pass_repairs_planted_tail_corruption():
    # the draft model is trained on pairs whose last target token is
    # cyclically shifted; a second pass trained on clean pairs over the
    # frozen drafts must fix the tail far more often than it breaks it
    for seed in (1, 3):
        task = small_task(seed=seed, n=64, min_len=2, n_test=16)
        regular = 5

        def corrupt_tail(y):
            ids = list(y.ids)
            ids[-1] = 4 + ((ids[-1] - 4 + 1) % regular)
            return TokenSeq(ids)

        corrupted = ParallelCorpus([(x, corrupt_tail(y))
                                    for x, y in task.train.pairs])
        draft_model = attn(task, seed=seed + 30, dim=16)
        train_mle(draft_model, corrupted,
                  config=TrainConfig(steps=500, batch_tokens=64,
                                     lr_scale=0.4, seed=seed))
        model = DelibModel.from_single_pass(draft_model, seed=seed + 7,
                                            copy_decoder=True)
        delib_train(model, task.train, k_drafts=1,
                    config=DelibConfig(drafts="beam", freeze_first=True),
                    train_config=TrainConfig(steps=300, batch_tokens=64,
                                             lr_scale=0.25, seed=seed))
        outs = [delib_decode(model, x, beam_size=4) for x, _ in
                task.test.pairs]
        refs = [y for _, y in task.test.pairs]
        draft_acc = last_token_acc([o.draft for o in outs], refs)
        final_acc = last_token_acc([o.final for o in outs], refs)
        assert final_acc >= draft_acc + 0.2, (seed, draft_acc, final_acc)


def test_full_pipeline_beats_dual_learning_alone(tmp_path):
    # end of the combined schedule against its own stage-1 model: the
    # deliberation pass should not lose what dual learning gained
    wins = 0
    for seed in range(10):
        noisy, clean, pair = noisy_clean_pair(seed, n=60, dim=16)
        workdir = str(tmp_path / f"seed{seed}")
        model = combined_training(
            workdir, pair, noisy.train, clean.mono_src, clean.mono_tgt,
            dev=clean.dev, k_drafts=2, n_best=2, delib_seed=seed + 7,
            copy_decoder=True,
            dual_config=DualConfig(samples_per_sentence=8, dsl_weight=1.0,
                                   warm_frac=0.25, seed=seed),
            dual_train_config=TrainConfig(steps=400, batch_tokens=64,
                                          lr_scale=0.4, seed=seed,
                                          patience=50),
            delib_config=DelibConfig(seed=seed),
            delib_train_config=TrainConfig(steps=250, batch_tokens=64,
                                           lr_scale=0.2, seed=seed,
                                           patience=5))
        shutil.rmtree(workdir)
        wins += delib_dev_bleu(model, clean.dev) >= dev_bleu(pair.primal,
                                                             clean.dev)
    assert wins >= 8, f"only {wins}/10 seeds improved"
