"""NumPy reference backend for the tabular-model kernels.

The compiled backend in kernels.pyx mirrors these signatures exactly.
Step logits for a target sequence are always

    logits[t] = M[t] + T[prev_token]

where M packs every context-independent contribution (output bias,
step-position row, and the two shift-bucketed source-token tables) and
T is the previous-token table. Sequences are token ids without BOS/EOS;
`terminated` says whether the EOS step is part of the score. A
non-terminated sequence is only meaningful at the model's length cap,
where generation stops without an EOS factor so that the outcome space
sums to one.
"""

import numpy as np


def build_m(bias, pos, s1, s2, x, n_steps):
    """Context-independent step logits for source sentence x.

    bias: [V], pos: [Pmax+1, V], s1/s2: [2R+1, Vs, V], x: int64 [Ts].
    Returns float64 [n_steps, V]. Row t of s1 buckets the offset
    (i - t) of each source position i, clipped to +-R; s2 does the same
    for the distance from the source end, which is what lets a model
    express reversal as cheaply as copying.
    """
    radius = (s1.shape[0] - 1) // 2
    p_max = pos.shape[0] - 1
    ts = np.arange(n_steps)
    m = bias[None, :] + pos[np.minimum(ts, p_max)]
    if x.size:
        src_len = x.size
        i = np.arange(src_len)
        sh1 = np.clip(i[None, :] - ts[:, None], -radius, radius) + radius
        sh2 = np.clip((src_len - 1 - i)[None, :] - ts[:, None], -radius, radius) + radius
        m = m + s1[sh1, x[None, :], :].sum(axis=1)
        m = m + s2[sh2, x[None, :], :].sum(axis=1)
    return np.ascontiguousarray(m)


def scatter_shift(d_m, x, radius, d_s1, d_s2):
    """Push step-logit gradients d_m back onto the source tables."""
    if x.size == 0:
        return
    n_steps = d_m.shape[0]
    src_len = x.size
    ts = np.arange(n_steps)
    i = np.arange(src_len)
    sh1 = np.clip(i[None, :] - ts[:, None], -radius, radius) + radius
    sh2 = np.clip((src_len - 1 - i)[None, :] - ts[:, None], -radius, radius) + radius
    n_src = d_s1.shape[1]
    n_out = d_s1.shape[2]
    rep = np.repeat(d_m, src_len, axis=0)
    np.add.at(d_s1.reshape(-1, n_out), (sh1 * n_src + x[None, :]).ravel(), rep)
    np.add.at(d_s2.reshape(-1, n_out), (sh2 * n_src + x[None, :]).ravel(), rep)


def _log_softmax_at(row, idx):
    shifted = row - row.max()
    return shifted[idx] - np.log(np.exp(shifted).sum())


def step_logprob(m, t_table, ys, bos, eos, terminated):
    """Log probability of the sequence under the step logits."""
    lp = 0.0
    prev = bos
    for step, y in enumerate(ys):
        lp += _log_softmax_at(m[step] + t_table[prev], y)
        prev = y
    if terminated:
        lp += _log_softmax_at(m[len(ys)] + t_table[prev], eos)
    return float(lp)


def step_grad(m, t_table, ys, bos, eos, terminated, weight, d_m, d_t):
    """Accumulate weight * d(logprob)/d(logits) into d_m and d_t.

    Returns the log probability so callers get score and gradient from
    one pass.
    """
    lp = 0.0
    prev = bos
    n_steps = len(ys) + (1 if terminated else 0)
    for step in range(n_steps):
        target = ys[step] if step < len(ys) else eos
        row = m[step] + t_table[prev]
        shifted = row - row.max()
        p = np.exp(shifted)
        p /= p.sum()
        lp += np.log(p[target])
        g = (-weight) * p
        g[target] += weight
        d_m[step] += g
        d_t[prev] += g
        prev = target
    return float(lp)


def sample_steps(m, t_table, bos, eos, max_len, uniforms):
    """Ancestral sample; uniforms supplies max_len + 1 draws.

    Returns (ids, terminated). Terminated sequences may reach max_len
    tokens (EOS drawn at the final step); drawing anything else there
    yields the capped unterminated outcome, whose probability is the
    prefix mass times 1 - p(EOS).
    """
    ys = []
    prev = bos
    for step in range(max_len + 1):
        row = m[step] + t_table[prev]
        shifted = row - row.max()
        p = np.exp(shifted)
        p /= p.sum()
        tok = int(np.searchsorted(np.cumsum(p), uniforms[step], side="right"))
        if tok >= p.shape[0]:
            tok = p.shape[0] - 1
        if tok == eos:
            return ys, True
        if step == max_len:
            return ys, False
        ys.append(tok)
        prev = tok
    return ys, False
