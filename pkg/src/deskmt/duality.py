"""Dual objectives over a primal/dual model pair.

The reconstruction objective rewards primal translations by how well
the dual model maps them back to the original sentence; its gradient
is a score-function estimator taken over the primal's full outcome
space (terminated sequences plus the capped unterminated outcome), so
constant reward shifts cancel exactly. The consistency objective
penalizes squared disagreement between the two factorizations of the
joint probability, with marginals supplied by n-gram models.
"""

import math
from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

from .train import Adam, TrainConfig, dev_bleu, noam_lr, _make_batches


@dataclass
class DualPair:
    primal: object   # source -> target model
    dual: object     # target -> source model
    src_lm: object   # marginal over source sentences
    tgt_lm: object   # marginal over target sentences

    def __post_init__(self):
        if self.primal.src_vocab.tokens != self.dual.tgt_vocab.tokens:
            raise ValueError("primal source vocab differs from dual target vocab")
        if self.primal.tgt_vocab.tokens != self.dual.src_vocab.tokens:
            raise ValueError("primal target vocab differs from dual source vocab")
        for lm, vocab, side in ((self.src_lm, self.primal.src_vocab, "source"),
                                (self.tgt_lm, self.primal.tgt_vocab, "target")):
            held = getattr(lm, "vocab", None)
            if held is not None and held.tokens != vocab.tokens:
                raise ValueError(f"{side} LM vocab differs from model vocab")


@dataclass
class DualConfig:
    samples_per_sentence: int = 1
    dsl_weight: float = 1.0
    n_mle: int = 1    # batch-phase cycle counts, MLE : reconstruction : consistency
    n_dul: int = 1
    n_dsl: int = 1
    warm_frac: float = 0.5  # leading fraction of the step budget run as pure MLE
    seed: int = 0
    use_baseline: bool = False  # off by default: plain score-function estimator

    def __post_init__(self):
        if self.samples_per_sentence < 1:
            raise ValueError("samples_per_sentence must be >= 1")
        if self.dsl_weight < 0:
            raise ValueError("dsl_weight must be >= 0")
        for name in ("n_mle", "n_dul", "n_dsl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_mle + self.n_dul + self.n_dsl == 0:
            raise ValueError("at least one phase must be active")
        if not 0.0 <= self.warm_frac < 1.0:
            raise ValueError("warm_frac must be in [0, 1)")


def dul_grad_exact(pair, x):
    """Exact reconstruction gradient for the primal parameters.

    Sum over the primal's entire outcome space of
    p(y|x) * grad log p(y|x) * log p(x|y; dual). Unterminated capped
    outcomes carry their probability mass and a reconstruction reward
    like any other outcome, keeping the expectation over a true
    probability distribution (so constant rewards cancel).
    """
    primal = pair.primal
    total = np.zeros(primal.params.size)
    for y, p, terminated in primal.enumerate_translations(
            x, include_unterminated=True):
        if p == 0.0:
            continue
        reward = pair.dual.logprob(y, x)
        grad = primal.grad_logprob(x, y, terminated=terminated)
        total += p * reward * grad
    return total


def dul_grad_mc(pair, x, K, seed, baseline=False):
    """Monte-Carlo estimate of the reconstruction gradient.

    Averages K score-function terms over primal samples. Sampled
    outcomes are deduplicated before the gradient evaluation; the
    estimate is identical to the per-sample average, term for term.
    With `baseline` the mean sampled reward is subtracted from every
    term (variance reduction; biased toward zero at K=1).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    primal = pair.primal
    rng = np.random.default_rng(seed)
    outcomes = Counter()
    for _ in range(K):
        y, terminated = primal.sample_full(x, rng=rng)
        outcomes[(y, terminated)] += 1
    rewards = {key: pair.dual.logprob(key[0], x) for key in outcomes}
    shift = 0.0
    if baseline:
        shift = sum(count * rewards[key]
                    for key, count in outcomes.items()) / K
    total = np.zeros(primal.params.size)
    for (y, terminated), count in outcomes.items():
        grad = primal.grad_logprob(x, y, terminated=terminated)
        total += count * (rewards[(y, terminated)] - shift) * grad
    return total / K


def _dsl_delta(pair, x, y):
    return (pair.src_lm.logprob(x) + pair.primal.logprob(x, y)
            - pair.tgt_lm.logprob(y) - pair.dual.logprob(y, x))


def dsl_loss(pair, x, y):
    """Squared disagreement of the two joint-probability factorizations."""
    delta = _dsl_delta(pair, x, y)
    return delta * delta


def train_dual(pair, bilingual, mono_src, mono_tgt, dev=None,
               config=None, train_config=None):
    """Alternate MLE, reconstruction, and consistency phases.

    Phase cycle per config counts (default 1:1:1). With no mono data
    and zero consistency weight the loop degenerates to the plain MLE
    schedule and reproduces train_mle bit for bit. Early stopping and
    checkpoint cadence follow the shared training config; the primal
    model's dev score drives the stop.
    """
    from collections import deque
    from .model import average_checkpoints

    cfg = config if config is not None else DualConfig()
    tc = train_config if train_config is not None else TrainConfig()
    primal, dual = pair.primal, pair.dual

    entries = [(x, y, 1.0) for x, y in bilingual.pairs]
    if not entries:
        raise ValueError("empty bilingual corpus")
    batches = _make_batches(entries, tc.batch_tokens)
    rng_order = np.random.default_rng(tc.seed)
    rng_phase = np.random.default_rng([tc.seed, cfg.seed])

    mono_src_sents = list(mono_src.sentences) if mono_src is not None else []
    mono_tgt_sents = list(mono_tgt.sentences) if mono_tgt is not None else []
    dul_active = cfg.n_dul > 0 and (mono_src_sents or mono_tgt_sents)
    dsl_active = cfg.n_dsl > 0 and cfg.dsl_weight > 0.0

    phases = ["mle"] * cfg.n_mle
    if dul_active:
        phases += ["dul"] * cfg.n_dul
    if dsl_active:
        phases += ["dsl"] * cfg.n_dsl
    if not phases:
        phases = ["mle"]

    adam_p = Adam(primal.params.size, tc.beta1, tc.beta2, tc.eps)
    adam_d = Adam(dual.params.size, tc.beta1, tc.beta2, tc.eps)
    step_p = 0
    step_d = 0
    checkpoints = deque(maxlen=tc.n_average)
    losses = []
    best = -math.inf
    stale = 0
    order = []
    mono_pos = [0, 0]
    dim_p = getattr(primal, "dim", 1)
    dim_d = getattr(dual, "dim", 1)

    def mle_update(batch):
        nonlocal step_p, step_d
        for model, optimizer, forward, dm in (
                (primal, adam_p, lambda x, y: (x, y), dim_p),
                (dual, adam_d, lambda x, y: (y, x), dim_d)):
            grads = model.zero_grads()
            loss_sum = 0.0
            token_sum = 0.0
            for x, y, w in batch:
                if w == 0.0:
                    continue
                src, tgt = forward(x, y)
                lp = model.accumulate_grad(src, tgt, w, grads)
                loss_sum -= w * lp
                token_sum += w * len(tgt)
            if model is primal:
                step_p += 1
                step = step_p
            else:
                step_d += 1
                step = step_d
            lr = noam_lr(step, tc.warmup, dm, tc.lr_scale)
            if token_sum > 0.0:
                loss = loss_sum / token_sum
                if not math.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged in MLE phase: loss={loss}")
                grad = -grads.flatten() / token_sum
                model.set_flat(optimizer.step(model.get_flat(), grad, lr))
            else:
                loss = 0.0
            if model is primal:
                losses.append(loss)

    def dul_update():
        nonlocal step_p, step_d
        # each direction reconstructs its own monolingual side
        for sents, fwd_pair, model, optimizer, pos_i, dm in (
                (mono_src_sents, pair, primal, adam_p, 0, dim_p),
                (mono_tgt_sents, _flip(pair), dual, adam_d, 1, dim_d)):
            if not sents:
                continue
            sent = sents[mono_pos[pos_i] % len(sents)]
            mono_pos[pos_i] += 1
            seed = int(rng_phase.integers(2 ** 31))
            grad = dul_grad_mc(fwd_pair, sent, cfg.samples_per_sentence, seed,
                               baseline=cfg.use_baseline)
            # rewards are sentence log-likelihoods; per-token scaling keeps
            # this update commensurate with the token-normalized MLE losses
            grad /= len(sent)
            if not np.all(np.isfinite(grad)):
                raise RuntimeError("training diverged in reconstruction phase")
            if model is primal:
                step_p += 1
                lr = noam_lr(step_p, tc.warmup, dm, tc.lr_scale)
            else:
                step_d += 1
                lr = noam_lr(step_d, tc.warmup, dm, tc.lr_scale)
            model.set_flat(optimizer.step(model.get_flat(), -grad, lr))

    def dsl_update(batch):
        nonlocal step_p, step_d
        g_p = np.zeros(primal.params.size)
        g_d = np.zeros(dual.params.size)
        loss = 0.0
        for x, y, w in batch:
            delta = _dsl_delta(pair, x, y)
            loss += w * delta * delta
            g_p += w * 2.0 * delta * primal.grad_logprob(x, y)
            g_d -= w * 2.0 * delta * dual.grad_logprob(y, x)
        if not math.isfinite(loss):
            raise RuntimeError(f"training diverged in consistency phase: loss={loss}")
        scale = cfg.dsl_weight / max(len(batch), 1)
        step_p += 1
        model_lr = noam_lr(step_p, tc.warmup, dim_p, tc.lr_scale)
        primal.set_flat(adam_p.step(primal.get_flat(), scale * g_p, model_lr))
        step_d += 1
        dual_lr = noam_lr(step_d, tc.warmup, dim_d, tc.lr_scale)
        dual.set_flat(adam_d.step(dual.get_flat(), scale * g_d, dual_lr))

    warm_steps = int(cfg.warm_frac * tc.steps)
    cycles = 0
    while step_p < tc.steps:
        active = ["mle"] if step_p < warm_steps else phases
        for phase in active:
            if step_p >= tc.steps:
                break
            if phase == "mle" or phase == "dsl":
                if not order:
                    order = list(rng_order.permutation(len(batches)))
                batch = batches[order.pop(0)]
                if phase == "mle":
                    mle_update(batch)
                else:
                    dsl_update(batch)
            else:
                dul_update()
        cycles += 1

        interval = max(tc.checkpoint_interval // len(phases), 1)
        if cycles % interval == 0 or step_p >= tc.steps:
            checkpoints.append(primal.params.copy())
            if dev is not None:
                score = dev_bleu(primal, dev)
                if score > best:
                    best = score
                    stale = 0
                else:
                    stale += 1
                    if stale >= tc.patience:
                        break

    if checkpoints:
        primal.set_flat(average_checkpoints(list(checkpoints)).flatten())
    return pair


def _flip(pair):
    """View of the pair with roles swapped, for the dual's own updates."""
    flipped = DualPair.__new__(DualPair)
    flipped.primal = pair.dual
    flipped.dual = pair.primal
    flipped.src_lm = pair.tgt_lm
    flipped.tgt_lm = pair.src_lm
    return flipped
