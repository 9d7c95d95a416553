"""Maximum-likelihood training: optimizer, schedule, checkpointing.

One training run owns its model exclusively. Batches are bucketed by
target length, then batch order is shuffled per epoch from the run
seed, so a given (corpus, config, seed) triple replays bit-for-bit.
"""

import math
from collections import deque
from dataclasses import dataclass, fields

import numpy as np

from .evalstats import bleu
from .model import average_checkpoints, beam_search


def noam_lr(step, warmup, dim, scale):
    """Inverse-sqrt schedule with linear warmup; peak at step == warmup."""
    if step < 1 or warmup < 1:
        raise ValueError("step and warmup must be >= 1")
    return scale * dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def early_stop(dev_trace, patience):
    """Index of the evaluation at which patience runs out, else None.

    An evaluation "improves" when it strictly exceeds the best value
    seen so far; `patience` consecutive non-improving evaluations stop
    the run.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = -math.inf
    stale = 0
    for i, value in enumerate(dev_trace):
        if value > best:
            best = value
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                return i
    return None


@dataclass
class TrainConfig:
    steps: int = 200
    batch_tokens: int = 128
    lr_scale: float = 0.3
    warmup: int = 40
    checkpoint_interval: int = 20
    n_average: int = 3
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name}={getattr(self, f.name)}\n")

    @classmethod
    def load(cls, path):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in types:
                    raise ValueError(f"unknown config key {key!r}")
                kwargs[key] = int(value) if types[key] is int else float(value)
        return cls(**kwargs)


@dataclass
class TrainReport:
    steps: list          # step indices, increasing
    losses: list
    lrs: list
    dev_steps: list
    dev_scores: list
    params: object       # averaged final ModelParams
    stopped_step: int = None

    def save_log(self, path):
        dev_at = dict(zip(self.dev_steps, self.dev_scores))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step\tloss\tlr\tdev\n")
            for step, loss, lr in zip(self.steps, self.losses, self.lrs):
                dev = f"{dev_at[step]:.6f}" if step in dev_at else ""
                fh.write(f"{step}\t{loss:.10g}\t{lr:.10g}\t{dev}\n")


class Adam:
    """Adaptive-moment optimizer on a flat parameter vector."""

    def __init__(self, size, beta1=0.9, beta2=0.98, eps=1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return flat - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _as_weighted(corpus):
    if hasattr(corpus, "entries"):
        return [(x, y, float(w)) for x, y, w in corpus.entries]
    return [(x, y, 1.0) for x, y in corpus.pairs]


def _make_batches(entries, batch_tokens):
    order = sorted(range(len(entries)),
                   key=lambda i: (len(entries[i][1]), len(entries[i][0]), i))
    batches = []
    current = []
    current_tokens = 0
    for i in order:
        n_tok = max(len(entries[i][1]), 1)
        if current and current_tokens + n_tok > batch_tokens:
            batches.append(current)
            current = []
            current_tokens = 0
        current.append(entries[i])
        current_tokens += n_tok
    if current:
        batches.append(current)
    return batches


def dev_bleu(model, dev, beam_size=4, alpha=1.0):
    """Corpus BLEU of beam decodes against the dev references."""
    hyps = []
    refs = []
    for x, y in dev.pairs:
        best = beam_search(model, x, beam_size=beam_size, alpha=alpha).best()
        hyps.append(" ".join(model.tgt_vocab.decode(best.seq)))
        refs.append([" ".join(model.tgt_vocab.decode(y))])
    return bleu(hyps, refs, tokenization="none").score


def train_mle(model, corpus, dev=None, config=None):
    """Weighted MLE with checkpoint averaging and dev early stopping.

    The per-step loss is the weighted negative log-likelihood divided
    by the batch's weighted target-token count. A batch of all-zero
    weights contributes no update. Non-finite loss aborts.
    """
    cfg = config if config is not None else TrainConfig()
    entries = _as_weighted(corpus)
    if not entries:
        raise ValueError("empty corpus")
    batches = _make_batches(entries, cfg.batch_tokens)
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(model.params.size, cfg.beta1, cfg.beta2, cfg.eps)
    checkpoints = deque(maxlen=cfg.n_average)
    dim = getattr(model, "dim", 1)

    steps, losses, lrs = [], [], []
    dev_steps, dev_scores = [], []
    best = -math.inf
    stale = 0
    stopped = None
    order = []

    for step in range(1, cfg.steps + 1):
        if not order:
            order = list(rng.permutation(len(batches)))
        batch = batches[order.pop(0)]

        grads = model.zero_grads()
        loss_sum = 0.0
        token_sum = 0.0
        for x, y, w in batch:
            if w == 0.0:
                continue
            lp = model.accumulate_grad(x, y, w, grads)
            loss_sum -= w * lp
            token_sum += w * len(y)

        lr = noam_lr(step, cfg.warmup, dim, cfg.lr_scale)
        if token_sum > 0.0:
            loss = loss_sum / token_sum
            if not math.isfinite(loss):
                raise RuntimeError(f"training diverged at step {step}: loss={loss}")
            grad = -grads.flatten() / token_sum
            model.set_flat(adam.step(model.get_flat(), grad, lr))
        else:
            loss = 0.0

        steps.append(step)
        losses.append(loss)
        lrs.append(lr)

        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            checkpoints.append(model.params.copy())
            if dev is not None:
                score = dev_bleu(model, dev)
                dev_steps.append(step)
                dev_scores.append(score)
                if score > best:
                    best = score
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        stopped = step
                        break

    averaged = average_checkpoints(list(checkpoints))
    model.set_flat(averaged.flatten())
    return TrainReport(steps, losses, lrs, dev_steps, dev_scores,
                       model.params.copy(), stopped_step=stopped)
