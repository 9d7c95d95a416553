"""Two-pass decoding with a draft-conditioned refinement model.

A DelibModel pairs a single-pass drafting model with a second decoder
whose layers attend to the source encoding and to the drafting
decoder's top-layer states, the pre-softmax rows that emitted each
draft token. Decoding runs two beams: the first produces the draft,
the second writes the final output while looking at both the source
and the draft states.

Training samples drafts from the first pass and raises the second
pass's log-likelihood of the reference given each draft. Unless
frozen, the first pass follows the score-function direction with that
same log-likelihood as reward; the draft states it hands over are
treated as constants, so no pathwise gradient leaks back through them.

combined_training chains the full schedule (dual learning in both
directions, back-translation of target mono text, deliberation on the
joined corpus) with each stage checkpointed to disk and resumable.
"""

import math
import os
from collections import deque
from dataclasses import dataclass

import numpy as np

from .corpus import TokenSeq
from .evalstats import bleu
from .model import AttentionModel, average_checkpoints, beam_search
from .train import Adam, TrainConfig, _as_weighted, _make_batches, noam_lr


@dataclass
class DelibConfig:
    drafts: str = "sample"      # "sample" (ancestral) or "beam" (n-best)
    temperature: float = 1.0
    baseline: bool = True       # mean-center rewards across a sentence's drafts
    freeze_first: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.drafts not in ("sample", "beam"):
            raise ValueError('drafts must be "sample" or "beam"')
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class DelibOutput:
    draft: TokenSeq
    final: TokenSeq
    draft_score: float
    final_score: float


class DelibModel:
    """A drafting model plus a refinement model that attends to its states."""

    def __init__(self, first, second):
        for name, m in (("first", first), ("second", second)):
            if getattr(m, "family", None) != "micro-attention":
                raise ValueError(f"{name} pass must be a micro-attention model")
        if not second.with_draft_attention:
            raise ValueError("second pass must be built with draft attention")
        if first.with_draft_attention:
            raise ValueError("first pass must not have draft attention")
        if first.tgt_vocab.tokens != second.tgt_vocab.tokens:
            raise ValueError("passes disagree on the target vocab")
        if first.src_vocab.tokens != second.src_vocab.tokens:
            raise ValueError("passes disagree on the source vocab")
        for attr in ("direction", "orientation", "max_len", "dim"):
            if getattr(first, attr) != getattr(second, attr):
                raise ValueError(f"passes disagree on {attr}")
        self.first = first
        self.second = second

    @classmethod
    def from_single_pass(cls, single, seed=0, copy_decoder=False):
        """Build a two-pass model around a trained single-pass one.

        The first pass is a weight-for-weight copy. The second pass
        starts from the same encoder (and, with copy_decoder, the same
        decoder) with freshly initialized draft attention blocks.
        """
        if getattr(single, "family", None) != "micro-attention":
            raise ValueError("from_single_pass needs a micro-attention model")
        kw = dict(direction=single.direction, orientation=single.orientation,
                  max_len=single.max_len, dim=single.dim,
                  n_heads=single.n_heads, n_layers=single.n_layers)
        first = AttentionModel(single.src_vocab, single.tgt_vocab, **kw)
        first.set_flat(single.get_flat())
        second = AttentionModel(single.src_vocab, single.tgt_vocab, seed=seed,
                                with_draft_attention=True, **kw)
        names = single.params.names()
        if not copy_decoder:
            names = [k for k in names
                     if k.startswith(("emb_src", "pos_src", "enc"))]
        for k in names:
            second.params[k] = single.params[k].copy()
        return cls(first, second)

    def draft_states(self, x, draft):
        """Top decoder states of the first pass run over its own draft.

        Row t is the pre-softmax state that emitted draft token t, so
        the matrix has one row per draft token and none for EOS.
        """
        self.first._check_x(x)
        self.first._check_y(draft)
        ids = self.first._orient(draft).ids
        _, cache = self.first._logits_for(x.ids, ids)
        s_top = cache[3][0]
        return s_top[: len(ids)]


class _DraftedSecond:
    """Beam-protocol view of the second pass bound to one draft context."""

    def __init__(self, model, context):
        self._model = model
        self._context = context
        self.max_len = model.max_len
        self.orientation = model.orientation

    def _check_x(self, x):
        self._model._check_x(x)

    def _start(self, x_ids):
        h_enc, _ = self._model._encoder_forward(x_ids)
        return (h_enc, self._context)

    def _next_logprobs(self, ctx, prefix_ids):
        return self._model._next_logprobs(ctx, prefix_ids)


def _second_pass_nbest(model, x, beam_size, alpha):
    """Best draft plus the n-best list of the second pass given it."""
    draft_item = beam_search(model.first, x, beam_size, alpha).best()
    states = model.draft_states(x, draft_item.seq)
    # an empty draft leaves nothing to attend to
    view = _DraftedSecond(model.second, states if len(states) else None)
    return draft_item, beam_search(view, x, beam_size, alpha)


def delib_decode(model, x, beam_size, alpha=1.0):
    """Two-pass beam decode: draft, then refine attending to its states."""
    draft_item, finals = _second_pass_nbest(model, x, beam_size, alpha)
    best = finals.best()
    return DelibOutput(draft_item.seq, best.seq, draft_item.score, best.score)


def delib_rerank(model, x, beam_size, alpha=1.0, use_both=False):
    """Pick among second-pass candidates, optionally adding first-pass scores.

    With use_both the candidates are rescored by the sum of both
    passes' length-normalized log-scores; otherwise the second pass
    alone decides and the result equals delib_decode's final output.
    """
    draft_item, finals = _second_pass_nbest(model, x, beam_size, alpha)
    if not use_both:
        return finals.best().seq
    best_seq, best_total = None, -math.inf
    for it in finals:
        lp = model.first.logprob(x, it.seq)
        total = it.score + lp / max(len(it.seq), 1) ** alpha
        if total > best_total:
            best_seq, best_total = it.seq, total
    return best_seq


def delib_dev_bleu(model, dev, beam_size=4, alpha=1.0):
    """Corpus BLEU of the final pass against the dev references."""
    hyps, refs = [], []
    for x, y in dev.pairs:
        out = delib_decode(model, x, beam_size, alpha)
        hyps.append(" ".join(model.second.tgt_vocab.decode(out.final)))
        refs.append([" ".join(model.second.tgt_vocab.decode(y))])
    return bleu(hyps, refs, tokenization="none").score


def _propose(first, x, k, cfg, rng):
    """k drafts as (sequence, terminated) pairs; beam mode may yield fewer."""
    if cfg.drafts == "beam":
        items = beam_search(first, x, k)
        return [(it.seq, True) for it in items]
    return [first.sample_full(x, cfg.temperature, rng=rng) for _ in range(k)]


def delib_train(model, corpus, k_drafts=1, dev=None, config=None,
                train_config=None):
    """Train the second pass on references given first-pass drafts.

    Per sentence the first pass proposes k_drafts drafts and the second
    pass's objective is the mean reference log-likelihood given each.
    Unless frozen, the first pass gets the score-function update with
    that log-likelihood as reward, mean-centered across the sentence's
    drafts when there are several. Batch losses are normalized by
    reference tokens as in plain MLE; a non-finite gradient aborts.
    """
    cfg = config if config is not None else DelibConfig()
    tc = train_config if train_config is not None else TrainConfig()
    if k_drafts < 1:
        raise ValueError("k_drafts must be >= 1")
    first, second = model.first, model.second

    entries = _as_weighted(corpus)
    if not entries:
        raise ValueError("empty corpus")
    batches = _make_batches(entries, tc.batch_tokens)
    rng_order = np.random.default_rng(tc.seed)
    rng_draft = np.random.default_rng([tc.seed, cfg.seed])
    adams = (Adam(first.params.size, tc.beta1, tc.beta2, tc.eps),
             Adam(second.params.size, tc.beta1, tc.beta2, tc.eps))
    checkpoints = (deque(maxlen=tc.n_average), deque(maxlen=tc.n_average))
    best = -math.inf
    stale = 0
    order = []

    for step in range(1, tc.steps + 1):
        if not order:
            order = list(rng_order.permutation(len(batches)))
        batch = batches[order.pop(0)]

        g1 = first.zero_grads()
        g2 = second.zero_grads()
        token_sum = 0.0
        for x, y, w in batch:
            if w == 0.0:
                continue
            token_sum += w * len(y)
            drafts = _propose(first, x, k_drafts, cfg, rng_draft)
            y_nat = second._orient(y).ids
            rewards = []
            for d_seq, _ in drafts:
                states = model.draft_states(x, d_seq)
                mat = states if len(states) else None
                lp = second._grad_nat(x.ids, y_nat, w / len(drafts), g2,
                                      True, draft_mat=mat)
                rewards.append(lp)
            if not cfg.freeze_first:
                center = (float(np.mean(rewards))
                          if cfg.baseline and len(rewards) > 1 else 0.0)
                for (d_seq, d_term), r in zip(drafts, rewards):
                    coef = w * (r - center) / len(drafts)
                    if coef != 0.0:
                        first.accumulate_grad(x, d_seq, coef, g1,
                                              terminated=d_term)

        if token_sum > 0.0:
            updates = [(second, g2, adams[1])]
            if not cfg.freeze_first:
                updates.append((first, g1, adams[0]))
            for m, g, adam in updates:
                grad = -g.flatten() / token_sum
                if not np.all(np.isfinite(grad)):
                    raise RuntimeError(
                        f"deliberation training diverged at step {step}")
                lr = noam_lr(step, tc.warmup, m.dim, tc.lr_scale)
                m.set_flat(adam.step(m.get_flat(), grad, lr))

        if step % tc.checkpoint_interval == 0 or step == tc.steps:
            checkpoints[0].append(first.params.copy())
            checkpoints[1].append(second.params.copy())
            if dev is not None:
                score = delib_dev_bleu(model, dev)
                if score > best:
                    best = score
                    stale = 0
                else:
                    stale += 1
                    if stale >= tc.patience:
                        break

    first.set_flat(average_checkpoints(list(checkpoints[0])).flatten())
    second.set_flat(average_checkpoints(list(checkpoints[1])).flatten())
    return model


def _stage_done(workdir, stage):
    return os.path.exists(os.path.join(workdir, f"{stage}.ok"))


def _stage_mark(workdir, stage):
    with open(os.path.join(workdir, f"{stage}.ok"), "w", encoding="utf-8"):
        pass


def combined_training(workdir, pair, bilingual, mono_src, mono_tgt, dev=None,
                      k_drafts=1, n_best=1, delib_seed=0, copy_decoder=False,
                      dual_config=None, dual_train_config=None,
                      delib_config=None, delib_train_config=None):
    """Dual learning, back-translation, then deliberation, checkpointed.

    Stage 1 trains the pair in both directions with the reconstruction
    and consistency terms. Stage 2 back-translates the target-side mono
    corpus with the trained reverse model into weighted pseudo pairs.
    Stage 3 trains a two-pass model initialized from the stage-1 forward
    model on the bilingual corpus joined with the pseudo pairs. Each
    completed stage leaves its artifacts plus an .ok marker in workdir;
    a rerun loads finished stages instead of recomputing them, so a
    crashed run resumes at the last stage boundary. Model checkpoints
    use the shared parameter file format, pseudo pairs the weighted TSV.
    """
    from .duality import train_dual
    from .jointtrain import WeightedParallelCorpus, _join, back_translate
    from .model import ModelParams

    os.makedirs(workdir, exist_ok=True)
    paths = {name: os.path.join(workdir, name) for name in
             ("stage1_primal", "stage1_dual", "stage2_pseudo.tsv",
              "stage3_first", "stage3_second")}

    if _stage_done(workdir, "stage1"):
        pair.primal.set_flat(ModelParams.load(paths["stage1_primal"]).flatten())
        pair.dual.set_flat(ModelParams.load(paths["stage1_dual"]).flatten())
    else:
        train_dual(pair, bilingual, mono_src, mono_tgt, dev=dev,
                   config=dual_config, train_config=dual_train_config)
        pair.primal.params.save(paths["stage1_primal"])
        pair.dual.params.save(paths["stage1_dual"])
        _stage_mark(workdir, "stage1")

    src_vocab = pair.primal.src_vocab
    tgt_vocab = pair.primal.tgt_vocab
    if _stage_done(workdir, "stage2"):
        pseudo = WeightedParallelCorpus.load_tsv(paths["stage2_pseudo.tsv"],
                                                 src_vocab, tgt_vocab)
    else:
        pseudo = back_translate(pair.dual, mono_tgt, n=n_best)
        pseudo.save_tsv(paths["stage2_pseudo.tsv"], src_vocab, tgt_vocab)
        _stage_mark(workdir, "stage2")

    model = DelibModel.from_single_pass(pair.primal, seed=delib_seed,
                                        copy_decoder=copy_decoder)
    if _stage_done(workdir, "stage3"):
        model.first.set_flat(ModelParams.load(paths["stage3_first"]).flatten())
        model.second.set_flat(ModelParams.load(paths["stage3_second"]).flatten())
    else:
        delib_train(model, _join(bilingual, pseudo), k_drafts=k_drafts,
                    dev=dev, config=delib_config,
                    train_config=delib_train_config)
        model.first.params.save(paths["stage3_first"])
        model.second.params.save(paths["stage3_second"])
        _stage_mark(workdir, "stage3")
    return model
