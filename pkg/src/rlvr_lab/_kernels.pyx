# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the loops in ``_kernels_py``; same signatures and array conventions."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef inline void _logits_row(const double[:, :, ::1] params, const double[:, ::1] feats,
                             Py_ssize_t b, Py_ssize_t s, double[::1] z) noexcept nogil:
    cdef Py_ssize_t d, v
    cdef Py_ssize_t dim = params.shape[1]
    cdef Py_ssize_t vocab = params.shape[2]
    cdef double f
    for v in range(vocab):
        z[v] = 0.0
    for d in range(dim):
        f = feats[b, d]
        if f == 0.0:
            continue
        for v in range(vocab):
            z[v] += f * params[s, d, v]


cdef inline double _max(double[::1] z) noexcept nogil:
    cdef Py_ssize_t v
    cdef double m = z[0]
    for v in range(1, z.shape[0]):
        if z[v] > m:
            m = z[v]
    return m


cdef inline double _logsumexp(double[::1] z) noexcept nogil:
    cdef Py_ssize_t v
    cdef double m = _max(z)
    cdef double acc = 0.0
    for v in range(z.shape[0]):
        acc += exp(z[v] - m)
    return m + log(acc)


def sample(const double[:, :, ::1] params, const double[:, ::1] feats, const double[:, ::1] uniforms,
           double inv_temp, const cnp.int64_t[::1] offsets, long base, long term):
    cdef Py_ssize_t n = uniforms.shape[0]
    cdef Py_ssize_t max_len = uniforms.shape[1]
    cdef Py_ssize_t vocab = params.shape[2]
    tokens_arr = np.full((n, max_len), -1, dtype=np.int64)
    logp_arr = np.zeros((n, max_len))
    lengths_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] tokens = tokens_arr
    cdef double[:, ::1] logp = logp_arr
    cdef cnp.int64_t[::1] lengths = lengths_arr
    cdef double[::1] z = np.empty(vocab)
    cdef double[::1] p = np.empty(vocab)
    cdef Py_ssize_t b, t, v, tok
    cdef cnp.int64_t code
    cdef double m, total, cdf, u, lse
    with nogil:
        for b in range(n):
            code = 0
            for t in range(max_len):
                _logits_row(params, feats, b, offsets[t] + code, z)
                m = _max(z)
                total = 0.0
                for v in range(vocab):
                    p[v] = exp((z[v] - m) * inv_temp)
                    total += p[v]
                # first index whose cumulative probability exceeds u
                u = uniforms[b, t]
                cdf = 0.0
                tok = vocab - 1
                for v in range(vocab):
                    cdf += p[v] / total
                    if cdf > u:
                        tok = v
                        break
                lse = _logsumexp(z)
                tokens[b, t] = tok
                logp[b, t] = z[tok] - lse
                lengths[b] = t + 1
                if tok == term:
                    break
                code = code * base + tok
    return tokens_arr, lengths_arr, logp_arr


def greedy(const double[:, :, ::1] params, const double[:, ::1] feats, long max_len,
           const cnp.int64_t[::1] offsets, long base, long term):
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t vocab = params.shape[2]
    tokens_arr = np.full((n, max_len), -1, dtype=np.int64)
    lengths_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] tokens = tokens_arr
    cdef cnp.int64_t[::1] lengths = lengths_arr
    cdef double[::1] z = np.empty(vocab)
    cdef Py_ssize_t b, t, v, tok
    cdef cnp.int64_t code
    with nogil:
        for b in range(n):
            code = 0
            for t in range(max_len):
                _logits_row(params, feats, b, offsets[t] + code, z)
                tok = 0
                for v in range(1, vocab):
                    if z[v] > z[tok]:
                        tok = v
                tokens[b, t] = tok
                lengths[b] = t + 1
                if tok == term:
                    break
                code = code * base + tok
    return tokens_arr, lengths_arr


def token_logprobs(const double[:, :, ::1] params, const double[:, ::1] feats, const cnp.int64_t[:, ::1] tokens,
                   const cnp.int64_t[::1] lengths, const cnp.int64_t[::1] offsets, long base):
    cdef Py_ssize_t n = tokens.shape[0]
    cdef Py_ssize_t max_len = tokens.shape[1]
    cdef Py_ssize_t vocab = params.shape[2]
    out_arr = np.zeros((n, max_len))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] z = np.empty(vocab)
    cdef Py_ssize_t b, t, tok
    cdef cnp.int64_t code
    with nogil:
        for b in range(n):
            code = 0
            for t in range(lengths[b]):
                tok = tokens[b, t]
                _logits_row(params, feats, b, offsets[t] + code, z)
                out[b, t] = z[tok] - _logsumexp(z)
                code = code * base + tok
    return out_arr


def accumulate_grad(const double[:, :, ::1] params, const double[:, ::1] feats, const cnp.int64_t[:, ::1] tokens,
                    const cnp.int64_t[::1] lengths, const double[:, ::1] weights,
                    const cnp.int64_t[::1] offsets, long base):
    cdef Py_ssize_t n = tokens.shape[0]
    cdef Py_ssize_t dim = params.shape[1]
    cdef Py_ssize_t vocab = params.shape[2]
    grad_arr = np.zeros((params.shape[0], dim, vocab))
    cdef double[:, :, ::1] grad = grad_arr
    cdef double[::1] z = np.empty(vocab)
    cdef Py_ssize_t b, t, d, v, tok, s
    cdef cnp.int64_t code
    cdef double w, lse, f
    with nogil:
        for b in range(n):
            code = 0
            for t in range(lengths[b]):
                tok = tokens[b, t]
                s = offsets[t] + code
                code = code * base + tok
                w = weights[b, t]
                if w == 0.0:
                    continue
                _logits_row(params, feats, b, s, z)
                lse = _logsumexp(z)
                # z <- w * (onehot(tok) - softmax)
                for v in range(vocab):
                    z[v] = -w * exp(z[v] - lse)
                z[tok] += w
                for d in range(dim):
                    f = feats[b, d]
                    if f == 0.0:
                        continue
                    for v in range(vocab):
                        grad[s, d, v] += f * z[v]
    return grad_arr
