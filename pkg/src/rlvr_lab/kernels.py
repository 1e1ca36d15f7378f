"""Backend dispatch for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``RLVR_LAB_KERNELS=python`` forces the fallback.
"""

import os
from contextlib import contextmanager

import numpy as np

from rlvr_lab import _kernels_py

try:
    from rlvr_lab import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["cython"] = _kernels_c

if os.environ.get("RLVR_LAB_KERNELS", "").lower() == "python" or _kernels_c is None:
    _active = "python"
else:
    _active = "cython"


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active = name


@contextmanager
def using(name):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def sample(params, feats, uniforms, inv_temp, offsets, base, term):
    return _BACKENDS[_active].sample(_f64(params), _f64(feats), _f64(uniforms), float(inv_temp), _i64(offsets), int(base), int(term))


def greedy(params, feats, max_len, offsets, base, term):
    return _BACKENDS[_active].greedy(_f64(params), _f64(feats), int(max_len), _i64(offsets), int(base), int(term))


def token_logprobs(params, feats, tokens, lengths, offsets, base):
    return _BACKENDS[_active].token_logprobs(_f64(params), _f64(feats), _i64(tokens), _i64(lengths), _i64(offsets), int(base))


def accumulate_grad(params, feats, tokens, lengths, weights, offsets, base):
    return _BACKENDS[_active].accumulate_grad(
        _f64(params), _f64(feats), _i64(tokens), _i64(lengths), _f64(weights), _i64(offsets), int(base)
    )
