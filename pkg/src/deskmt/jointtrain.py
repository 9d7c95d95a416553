"""Pseudo-parallel data and multi-model joint training.

Two families of objectives share this module. Back-translation builds
weighted pseudo corpora from monolingual text and retrains each
direction on real plus synthetic pairs, alternating directions so the
models lift each other. Agreement regularization couples a
left-to-right and a right-to-left model over the same direction with
two KL penalties; its gradient has three parts (real-data likelihood,
likelihood of the partner's samples, and self-samples weighted by the
log probability ratio). The four-model loop composes both.

Weighted corpora keep domain order: entries are (source sentence,
target sentence, weight) regardless of which model produced them.
"""

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import average_checkpoints, beam_search
from .train import Adam, TrainConfig, _make_batches, dev_bleu, noam_lr


@dataclass
class WeightedParallelCorpus:
    entries: list  # (source TokenSeq, target TokenSeq, weight)

    def __post_init__(self):
        self.entries = [(x, y, float(w)) for x, y, w in self.entries]
        for _, _, w in self.entries:
            if not math.isfinite(w) or w < 0.0:
                raise ValueError(f"weights must be finite and >= 0, got {w}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def swapped(self):
        """Same data viewed from the other direction."""
        return WeightedParallelCorpus([(y, x, w) for x, y, w in self.entries])

    def save_tsv(self, path, src_vocab, tgt_vocab):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("source\ttarget\tweight\n")
            for x, y, w in self.entries:
                src = " ".join(src_vocab.decode(x))
                tgt = " ".join(tgt_vocab.decode(y))
                fh.write(f"{src}\t{tgt}\t{w!r}\n")

    @classmethod
    def load_tsv(cls, path, src_vocab, tgt_vocab):
        entries = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != "source\ttarget\tweight":
                raise ValueError(f"unexpected header {header!r}")
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                src, tgt, w = line.split("\t")
                entries.append((src_vocab.encode(src.split()),
                                tgt_vocab.encode(tgt.split()), float(w)))
        return cls(entries)


@dataclass
class QuadModels:
    s2t_l2r: object
    s2t_r2l: object
    t2s_l2r: object
    t2s_r2l: object

    def __post_init__(self):
        wanted = {"s2t_l2r": ("S2T", "L2R"), "s2t_r2l": ("S2T", "R2L"),
                  "t2s_l2r": ("T2S", "L2R"), "t2s_r2l": ("T2S", "R2L")}
        for name, (direction, orientation) in wanted.items():
            model = getattr(self, name)
            if (model.direction, model.orientation) != (direction, orientation):
                raise ValueError(
                    f"{name} must be a {direction} {orientation} model, got "
                    f"{model.direction} {model.orientation}")


@dataclass
class AgreementConfig:
    lam: float = 0.1       # weight of the two KL penalties
    samples: int = 4       # per side, when estimating by sampling
    iterations: int = 2    # outer loop cap
    n_best: int = 1        # pseudo translations kept per mono sentence
    beam_size: int = 4
    alpha: float = 1.0     # length penalty for pseudo-data decoding
    patience: int = 2      # outer iterations without dev improvement
    seed: int = 0
    method: str = "sample"  # KL route inside training; exact is O(space)

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0.0:
            raise ValueError("lam must be finite and >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.n_best < 1 or self.beam_size < 1:
            raise ValueError("n_best and beam_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.method not in ("auto", "exact", "sample"):
            raise ValueError(f"unknown method {self.method!r}")


# ---- pseudo-parallel data -------------------------------------------


def _nbest_pseudo(model, mono, n, beam_size, alpha):
    """(mono sentence, translation, weight) triples in model order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for sent in mono:
        items = beam_search(model, sent, beam_size=max(beam_size, n),
                            alpha=alpha)[:n]
        scores = np.array([it.score for it in items])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        out.extend((sent, it.seq, float(w)) for it, w in zip(items, weights))
    return out


def back_translate(model, mono, n=1, beam_size=4, alpha=1.0):
    """Pseudo pairs from a target-to-source model over target mono text.

    Each sentence contributes its n-best source translations, weighted
    by a softmax of the length-normalized beam scores; weights within
    one sentence's group sum to 1. A beam can return fewer than n
    distinct hypotheses on tiny outcome spaces; the group just shrinks.
    """
    triples = _nbest_pseudo(model, mono, n, beam_size, alpha)
    return WeightedParallelCorpus([(x, y, w) for y, x, w in triples])


def forward_translate(model, mono, n=1, beam_size=4, alpha=1.0):
    """Pseudo pairs from a source-to-target model over source mono text."""
    return WeightedParallelCorpus(
        _nbest_pseudo(model, mono, n, beam_size, alpha))


# ---- EM-style alternation over directions ---------------------------


def _join(bilingual, pseudo):
    entries = [(x, y, 1.0) for x, y in bilingual.pairs]
    if pseudo is not None:
        entries.extend(pseudo.entries)
    return WeightedParallelCorpus(entries)


def joint_train_iteration(s2t, t2s, bilingual, mono_src, mono_tgt,
                          config=None, train_config=None,
                          dev_s2t=None, dev_t2s=None):
    """One alternation: retrain each direction on real plus pseudo pairs.

    The target-side mono corpus is back-translated by the current t2s
    model to extend s2t's training data; the freshly updated s2t then
    forward-translates the source-side mono corpus to extend t2s's.
    Empty mono corpora reduce both halves to plain MLE on the bilingual
    data. Training continues from the models' current parameters.
    """
    from .train import train_mle

    cfg = config if config is not None else AgreementConfig()
    tc = train_config if train_config is not None else TrainConfig()

    pseudo_tgt = None
    if mono_tgt is not None and len(mono_tgt) > 0:
        pseudo_tgt = back_translate(t2s, mono_tgt, cfg.n_best,
                                    cfg.beam_size, cfg.alpha)
    train_mle(s2t, _join(bilingual, pseudo_tgt), dev=dev_s2t, config=tc)

    pseudo_src = None
    if mono_src is not None and len(mono_src) > 0:
        pseudo_src = forward_translate(s2t, mono_src, cfg.n_best,
                                       cfg.beam_size, cfg.alpha)
    train_mle(t2s, _join(bilingual, pseudo_src).swapped(), dev=dev_t2s,
              config=tc)
    return s2t, t2s


# ---- agreement regularization ---------------------------------------


def _entries(batch):
    out = []
    for item in batch:
        if len(item) == 2:
            x, y = item
            out.append((x, y, 1.0))
        else:
            x, y, w = item
            out.append((x, y, float(w)))
    return out


def _check_agreement_pair(a, b):
    if a.src_vocab.tokens != b.src_vocab.tokens \
            or a.tgt_vocab.tokens != b.tgt_vocab.tokens:
        raise ValueError("agreement models must share vocabularies")
    if a.max_len != b.max_len:
        raise ValueError("agreement models must share max_len")
    if a.orientation == b.orientation:
        raise ValueError("agreement models must decode in opposite orders")


def _can_enumerate(model):
    from .model import Seq2SeqModel

    base = Seq2SeqModel.enumerate_translations
    return type(model).enumerate_translations is not base


def _kl_exact(p_model, q_model, x):
    kl = 0.0
    for y, p, terminated in p_model.enumerate_translations(
            x, include_unterminated=True):
        if p == 0.0:
            continue
        kl += p * (math.log(p) - q_model.logprob(x, y, terminated=terminated))
    return kl


def _kl_sampled(p_model, q_model, x, samples, rng):
    total = 0.0
    for _ in range(samples):
        y, terminated = p_model.sample_full(x, rng=rng)
        total += (p_model.logprob(x, y, terminated=terminated)
                  - q_model.logprob(x, y, terminated=terminated))
    return total / samples


def _use_exact(l2r, r2l, method):
    if method == "exact":
        return True
    if method == "sample":
        return False
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    return _can_enumerate(l2r) and _can_enumerate(r2l)


def agreement_loss(l2r, r2l, batch, lam, samples=4, seed=0, method="auto"):
    """Objective value: data log-likelihood minus the two KL penalties.

    Higher is better. KL terms are enumerated exactly when both models
    support it (method "auto"), otherwise estimated from `samples`
    draws per side; "exact"/"sample" force a route. lam=0 returns the
    plain weighted log-likelihood and draws nothing.
    """
    _check_agreement_pair(l2r, r2l)
    entries = [(x, y, w) for x, y, w in _entries(batch) if w != 0.0]
    total = sum(w * l2r.logprob(x, y) for x, y, w in entries)
    if lam == 0.0:
        return total
    exact = _use_exact(l2r, r2l, method)
    rng = np.random.default_rng(seed)
    for x, _, w in entries:
        if exact:
            kl = _kl_exact(r2l, l2r, x) + _kl_exact(l2r, r2l, x)
        else:
            kl = (_kl_sampled(r2l, l2r, x, samples, rng)
                  + _kl_sampled(l2r, r2l, x, samples, rng))
        total -= lam * w * kl
    return total


def _agreement_grad(main, aux, batch, lam, samples, seed, method):
    """Ascent gradient of the agreement objective for `main`.

    Three parts: likelihood of the batch pairs; likelihood of the
    partner model's translations; self-translations weighted by
    log(p_aux / p_main), which vanishes wherever the models agree.
    """
    _check_agreement_pair(main, aux)
    entries = [(x, y, w) for x, y, w in _entries(batch) if w != 0.0]
    acc = main.zero_grads()
    for x, y, w in entries:
        main.accumulate_grad(x, y, w, acc)
    grad = acc.flatten()
    if lam == 0.0:
        return grad

    exact = _use_exact(main, aux, method)
    rng = np.random.default_rng(seed)
    for x, _, w in entries:
        if exact:
            for y, p, terminated in aux.enumerate_translations(
                    x, include_unterminated=True):
                if p == 0.0:
                    continue
                grad += (w * lam * p
                         * main.grad_logprob(x, y, terminated=terminated))
            for y, p, terminated in main.enumerate_translations(
                    x, include_unterminated=True):
                if p == 0.0:
                    continue
                ratio = (aux.logprob(x, y, terminated=terminated)
                         - math.log(p))
                grad += (w * lam * p * ratio
                         * main.grad_logprob(x, y, terminated=terminated))
        else:
            scale = w * lam / samples
            for _ in range(samples):
                y, terminated = aux.sample_full(x, rng=rng)
                grad += scale * main.grad_logprob(x, y, terminated=terminated)
            for _ in range(samples):
                y, terminated = main.sample_full(x, rng=rng)
                ratio = (aux.logprob(x, y, terminated=terminated)
                         - main.logprob(x, y, terminated=terminated))
                grad += (scale * ratio
                         * main.grad_logprob(x, y, terminated=terminated))
    return grad


def agreement_grad_l2r(l2r, r2l, batch, lam, samples=4, seed=0,
                       method="auto"):
    if l2r.orientation != "L2R":
        raise ValueError("first model must decode left to right")
    return _agreement_grad(l2r, r2l, batch, lam, samples, seed, method)


def agreement_grad_r2l(l2r, r2l, batch, lam, samples=4, seed=0,
                       method="auto"):
    if l2r.orientation != "L2R":
        raise ValueError("first model must decode left to right")
    return _agreement_grad(r2l, l2r, batch, lam, samples, seed, method)


def r2l_sample_augment(r2l, mono_src, n, seed=0):
    """Unit-weight pairs (x, y) with y drawn from the R2L model."""
    if r2l.orientation != "R2L":
        raise ValueError("model must decode right to left")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    entries = []
    for x in mono_src:
        for _ in range(n):
            y, _ = r2l.sample_full(x, rng=rng)
            entries.append((x, y, 1.0))
    return WeightedParallelCorpus(entries)


# ---- unified four-model loop ----------------------------------------


def _agreement_train_pair(l2r, r2l, corpus, cfg, tc, dev=None):
    """Joint run over one direction's L2R/R2L pair.

    Per step, the L2R model takes an agreement-gradient update using
    the current R2L model, then the R2L model updates against the
    freshly moved L2R. Batching, schedule, optimizer state, checkpoint
    averaging, and dev early stopping mirror the MLE trainer; with
    lam=0 the L2R trajectory is bit-identical to it.
    """
    entries = list(corpus.entries)
    if not entries:
        raise ValueError("empty corpus")
    batches = _make_batches(entries, tc.batch_tokens)
    rng_order = np.random.default_rng(tc.seed)
    rng_samples = np.random.default_rng([tc.seed, cfg.seed])

    models = (l2r, r2l)
    adams = tuple(Adam(m.params.size, tc.beta1, tc.beta2, tc.eps)
                  for m in models)
    dims = tuple(getattr(m, "dim", 1) for m in models)
    checkpoints = tuple(deque(maxlen=tc.n_average) for _ in models)

    best = -math.inf
    stale = 0
    order = []
    for step in range(1, tc.steps + 1):
        if not order:
            order = list(rng_order.permutation(len(batches)))
        batch = batches[order.pop(0)]
        token_sum = sum(w * len(y) for _, y, w in batch if w != 0.0)
        for i, (model, aux) in enumerate(((l2r, r2l), (r2l, l2r))):
            lr = noam_lr(step, tc.warmup, dims[i], tc.lr_scale)
            if token_sum == 0.0:
                continue
            seed = int(rng_samples.integers(2 ** 31)) if cfg.lam > 0 else 0
            gain = _agreement_grad(model, aux, batch, cfg.lam, cfg.samples,
                                   seed, method=cfg.method)
            grad = -gain / token_sum
            if not np.all(np.isfinite(grad)):
                raise RuntimeError(f"training diverged at step {step}")
            model.set_flat(adams[i].step(model.get_flat(), grad, lr))

        if step % tc.checkpoint_interval == 0 or step == tc.steps:
            for i, model in enumerate(models):
                checkpoints[i].append(model.params.copy())
            if dev is not None:
                score = dev_bleu(l2r, dev)
                if score > best:
                    best = score
                    stale = 0
                else:
                    stale += 1
                    if stale >= tc.patience:
                        break

    for i, model in enumerate(models):
        if checkpoints[i]:
            model.set_flat(average_checkpoints(list(checkpoints[i])).flatten())


def unified_joint_training(quad, bilingual, mono_src, mono_tgt, config=None,
                           train_config=None, dev_s2t=None, dev_t2s=None):
    """Alternating four-model training with agreement regularization.

    Pre-trains all four models on the bilingual data, then loops:
    back-translate the target mono corpus with the T2S-L2R model and
    update both S2T models under agreement; forward-translate the
    source mono corpus with the updated S2T-L2R model and update both
    T2S models likewise. Stops after `iterations` rounds or once
    neither direction's dev score improves for `patience` rounds.
    """
    from .train import train_mle

    cfg = config if config is not None else AgreementConfig()
    tc = train_config if train_config is not None else TrainConfig()

    fwd = _join(bilingual, None)
    rev = fwd.swapped()
    train_mle(quad.s2t_l2r, fwd, dev=dev_s2t, config=tc)
    train_mle(quad.s2t_r2l, fwd, dev=dev_s2t, config=tc)
    train_mle(quad.t2s_l2r, rev, dev=dev_t2s, config=tc)
    train_mle(quad.t2s_r2l, rev, dev=dev_t2s, config=tc)

    best_s2t = dev_bleu(quad.s2t_l2r, dev_s2t) if dev_s2t is not None else None
    best_t2s = dev_bleu(quad.t2s_l2r, dev_t2s) if dev_t2s is not None else None
    stale = 0
    for _ in range(cfg.iterations):
        pseudo_tgt = None
        if mono_tgt is not None and len(mono_tgt) > 0:
            pseudo_tgt = back_translate(quad.t2s_l2r, mono_tgt, cfg.n_best,
                                        cfg.beam_size, cfg.alpha)
        _agreement_train_pair(quad.s2t_l2r, quad.s2t_r2l,
                              _join(bilingual, pseudo_tgt), cfg, tc, dev_s2t)

        pseudo_src = None
        if mono_src is not None and len(mono_src) > 0:
            pseudo_src = forward_translate(quad.s2t_l2r, mono_src, cfg.n_best,
                                           cfg.beam_size, cfg.alpha)
        _agreement_train_pair(quad.t2s_l2r, quad.t2s_r2l,
                              _join(bilingual, pseudo_src).swapped(),
                              cfg, tc, dev_t2s)

        if dev_s2t is None and dev_t2s is None:
            continue
        improved = False
        if dev_s2t is not None:
            score = dev_bleu(quad.s2t_l2r, dev_s2t)
            if score > best_s2t:
                best_s2t = score
                improved = True
        if dev_t2s is not None:
            score = dev_bleu(quad.t2s_l2r, dev_t2s)
            if score > best_t2s:
                best_t2s = score
                improved = True
        if improved:
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return quad
