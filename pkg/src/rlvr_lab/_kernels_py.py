"""Pure-numpy implementations of the hot loops.

Every function here has a twin in ``_kernels.pyx`` with an identical
signature; :mod:`rlvr_lab.kernels` picks one at import time.

Array conventions shared by both backends:

params   float64 (S, d, V)   one d x V weight block per prefix state
feats    float64 (B, d)      feature vector of the problem behind each row
tokens   int64   (B, T)      padded with -1 after ``lengths[b]``
offsets  int64   (T + 1,)    first state index of each prefix depth
base     int                 branching factor of the prefix tree
term     int                 terminator token, or -1 if there is none
"""

import numpy as np


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _logits(params, feats, states):
    return np.einsum("bd,bdv->bv", feats, params[states])


def sample(params, feats, uniforms, inv_temp, offsets, base, term):
    """Ancestral sampling driven by pre-drawn uniforms of shape (B, T).

    Returns (tokens, lengths, logp) where ``logp`` holds per-token log
    probabilities at temperature 1.
    """
    n, max_len = uniforms.shape
    tokens = np.full((n, max_len), -1, dtype=np.int64)
    logp = np.zeros((n, max_len))
    lengths = np.zeros(n, dtype=np.int64)
    code = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(max_len):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        z = _logits(params, feats[rows], offsets[t] + code[rows])
        probs = _softmax_rows(z * inv_temp)
        cdf = np.cumsum(probs, axis=1)
        tok = (cdf <= uniforms[rows, t][:, None]).sum(axis=1)
        tok = np.minimum(tok, z.shape[1] - 1)
        tokens[rows, t] = tok
        logp[rows, t] = _log_softmax_rows(z)[np.arange(rows.size), tok]
        lengths[rows] = t + 1
        code[rows] = code[rows] * base + tok
        alive[rows] = tok != term
    return tokens, lengths, logp


def greedy(params, feats, max_len, offsets, base, term):
    n = feats.shape[0]
    tokens = np.full((n, max_len), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    code = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(max_len):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        z = _logits(params, feats[rows], offsets[t] + code[rows])
        tok = np.argmax(z, axis=1)
        tokens[rows, t] = tok
        lengths[rows] = t + 1
        code[rows] = code[rows] * base + tok
        alive[rows] = tok != term
    return tokens, lengths


def token_logprobs(params, feats, tokens, lengths, offsets, base):
    """Per-token log-probabilities (B, T) at temperature 1; padding is 0."""
    n, max_len = tokens.shape
    out = np.zeros((n, max_len))
    code = np.zeros(n, dtype=np.int64)
    for t in range(max_len):
        rows = np.flatnonzero(lengths > t)
        if rows.size == 0:
            break
        tok = tokens[rows, t]
        z = _logits(params, feats[rows], offsets[t] + code[rows])
        out[rows, t] = _log_softmax_rows(z)[np.arange(rows.size), tok]
        code[rows] = code[rows] * base + tok
    return out


def accumulate_grad(params, feats, tokens, lengths, weights, offsets, base):
    """Sum over tokens of ``weights[b, t] * d log pi(y_t | s_t) / d params``."""
    n, max_len = tokens.shape
    n_states, dim, vocab = params.shape
    grad = np.zeros((n_states, dim * vocab))
    code = np.zeros(n, dtype=np.int64)
    for t in range(max_len):
        rows = np.flatnonzero(lengths > t)
        if rows.size == 0:
            break
        tok = tokens[rows, t]
        states = offsets[t] + code[rows]
        code[rows] = code[rows] * base + tok
        w = weights[rows, t]
        keep = w != 0.0
        if not keep.any():
            continue
        rows, tok, states, w = rows[keep], tok[keep], states[keep], w[keep]
        g = -_softmax_rows(_logits(params, feats[rows], states))
        g[np.arange(rows.size), tok] += 1.0
        g *= w[:, None]
        outer = feats[rows][:, :, None] * g[:, None, :]
        np.add.at(grad, states, outer.reshape(rows.size, -1))
    return grad.reshape(n_states, dim, vocab)
