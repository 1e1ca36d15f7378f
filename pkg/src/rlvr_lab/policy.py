"""Exact-likelihood softmax policies.

Two heads share one parameterisation. Every prefix state ``s`` owns a
``d x V`` weight block and the next-token logits for a problem with
feature vector ``phi`` are ``phi @ params[s]``:

* ``bandit``: a single state, one action per episode (``max_len == 1``).
* ``sequence``: one state per prefix of non-terminator tokens shorter than
  ``max_len``. With one-hot features this is exactly a table over
  ``(problem id, prefix)``; with dense features the blocks are shared and
  updates for one problem move the logits of every other problem.

Likelihoods and gradients are always taken at temperature 1; the
temperature only reshapes sampling.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from rlvr_lab import kernels

BANDIT = "bandit"
SEQUENCE = "sequence"


class PolicyError(ValueError):
    """Raised for out-of-range tokens or malformed sequences."""


@dataclass(frozen=True)
class Rollout:
    problem_id: int
    tokens: tuple
    token_logp: tuple  # per token, temperature 1, under the sampling policy
    reward: float = 0.0

    @property
    def logp(self):
        return float(sum(self.token_logp))

    def __len__(self):
        return len(self.tokens)


@dataclass(eq=False)
class SoftmaxPolicy:
    kind: str
    feature_dim: int
    vocab_size: int
    max_len: int = 1
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (BANDIT, SEQUENCE):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.feature_dim < 1 or self.vocab_size < 2 or self.max_len < 1:
            raise PolicyError("feature_dim >= 1, vocab_size >= 2 and max_len >= 1 required")
        if self.kind == BANDIT:
            if self.max_len != 1:
                raise PolicyError("bandit policies have max_len 1")
            self.base = self.vocab_size
        else:
            self.base = self.vocab_size - 1
        level = [self.base**t for t in range(self.max_len)]
        self.offsets = np.concatenate([[0], np.cumsum(level)]).astype(np.int64)
        self.n_states = int(self.offsets[-1])
        shape = (self.n_states, self.feature_dim, self.vocab_size)
        if self.params is None:
            self.params = np.zeros(shape)
        else:
            self.params = np.ascontiguousarray(self.params, dtype=np.float64)
            if self.params.shape != shape:
                raise PolicyError(f"params shape {self.params.shape} != {shape}")

    @classmethod
    def bandit(cls, feature_dim, vocab_size, params=None):
        return cls(BANDIT, feature_dim, vocab_size, 1, params)

    @classmethod
    def sequence(cls, feature_dim, vocab_size, max_len, params=None):
        return cls(SEQUENCE, feature_dim, vocab_size, max_len, params)

    @property
    def terminator(self):
        """Token that ends an episode; -1 for bandits."""
        return self.vocab_size - 1 if self.kind == SEQUENCE else -1

    @property
    def n_params(self):
        return self.params.size

    def copy(self):
        return SoftmaxPolicy(self.kind, self.feature_dim, self.vocab_size, self.max_len, self.params.copy())

    def with_params(self, params):
        return SoftmaxPolicy(self.kind, self.feature_dim, self.vocab_size, self.max_len, params)

    def same_shape(self, other):
        return (self.kind, self.feature_dim, self.vocab_size, self.max_len) == (
            other.kind,
            other.feature_dim,
            other.vocab_size,
            other.max_len,
        )

    def state_index(self, prefix):
        prefix = tuple(int(t) for t in prefix)
        if len(prefix) >= self.max_len:
            raise PolicyError(f"prefix of length {len(prefix)} has no successor state (max_len={self.max_len})")
        code = 0
        for tok in prefix:
            if not 0 <= tok < self.base:
                raise PolicyError(f"token {tok} cannot appear inside a prefix")
            code = code * self.base + tok
        return int(self.offsets[len(prefix)] + code)

    def next_logits(self, x, prefix=()):
        return features_of(x, self) @ self.params[self.state_index(prefix)]

    def next_probs(self, x, prefix=(), temperature=1.0):
        z = self.next_logits(x, prefix) / temperature
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def enumerate_sequences(self):
        """Every complete sequence the sampler can emit, in lexicographic order."""
        if self.kind == BANDIT:
            return [(a,) for a in range(self.vocab_size)]
        out = []
        for length in range(1, self.max_len + 1):
            for body in product(range(self.base), repeat=length - 1):
                out.append(body + (self.terminator,))
                if length == self.max_len:
                    out.extend(body + (tok,) for tok in range(self.base))
        return sorted(out)


def features_of(x, policy=None):
    """Feature vector of a problem reference (an object with ``features`` or an array)."""
    feats = getattr(x, "features", x)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 1:
        raise PolicyError("problem features must be a vector")
    if policy is not None and feats.shape[0] != policy.feature_dim:
        raise PolicyError(f"feature length {feats.shape[0]} != policy feature_dim {policy.feature_dim}")
    return feats


def check_tokens(policy, y):
    y = tuple(int(t) for t in y)
    if not y:
        raise PolicyError("empty token sequence")
    if len(y) > policy.max_len:
        raise PolicyError(f"sequence length {len(y)} exceeds max_len {policy.max_len}")
    for tok in y:
        if not 0 <= tok < policy.vocab_size:
            raise PolicyError(f"token {tok} outside [0, {policy.vocab_size})")
    if policy.kind == SEQUENCE and policy.terminator in y[:-1]:
        raise PolicyError("terminator may only appear as the last token")
    return y


def pack(policy, seqs):
    """Pad a list of sequences into (tokens, lengths) arrays."""
    tokens = np.full((len(seqs), policy.max_len), -1, dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, y in enumerate(seqs):
        y = check_tokens(policy, y)
        tokens[i, : len(y)] = y
        lengths[i] = len(y)
    return tokens, lengths


def unpack(tokens, lengths):
    return [tuple(int(t) for t in row[:n]) for row, n in zip(tokens, lengths)]


def batch_token_logp(policy, feats, tokens, lengths):
    """Per-token log-probabilities for a padded batch; ``feats`` is (B, d)."""
    return kernels.token_logprobs(policy.params, feats, tokens, lengths, policy.offsets, policy.base)


def batch_logp(policy, feats, tokens, lengths):
    return batch_token_logp(policy, feats, tokens, lengths).sum(axis=1)


def batch_grad(policy, feats, tokens, lengths, weights):
    """``sum_b sum_t weights[b, t] * grad log pi(y_bt | s_bt)`` as a params-shaped array.

    ``weights`` may be (B,) for one weight per sequence.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = np.repeat(weights[:, None], tokens.shape[1], axis=1)
    return kernels.accumulate_grad(policy.params, feats, tokens, lengths, weights, policy.offsets, policy.base)


def sample_batch(policy, feats, rng, temperature=1.0):
    """Draw one sequence per row of ``feats``. Returns (tokens, lengths, token_logp)."""
    if temperature <= 0:
        raise PolicyError("temperature must be positive")
    uniforms = rng.random((feats.shape[0], policy.max_len))
    return kernels.sample(policy.params, feats, uniforms, 1.0 / temperature, policy.offsets, policy.base, policy.terminator)


def greedy_batch(policy, feats):
    return kernels.greedy(policy.params, feats, policy.max_len, policy.offsets, policy.base, policy.terminator)


# single-pair operations


def log_prob(policy, x, y):
    feats = features_of(x, policy)[None, :]
    tokens, lengths = pack(policy, [y])
    return float(batch_logp(policy, feats, tokens, lengths)[0])


def sample(policy, x, rng, temperature=1.0, problem_id=-1):
    feats = features_of(x, policy)[None, :]
    tokens, lengths, logp = sample_batch(policy, feats, rng, temperature)
    n = int(lengths[0])
    pid = getattr(x, "id", problem_id)
    return Rollout(pid, tuple(int(t) for t in tokens[0, :n]), tuple(float(v) for v in logp[0, :n]))


def greedy_decode(policy, x):
    feats = features_of(x, policy)[None, :]
    tokens, lengths = greedy_batch(policy, feats)
    return tuple(int(t) for t in tokens[0, : lengths[0]])


def grad_log_prob(policy, x, y):
    """Flat gradient of log pi(y|x); ascending it raises log pi(y|x)."""
    feats = features_of(x, policy)[None, :]
    tokens, lengths = pack(policy, [y])
    return batch_grad(policy, feats, tokens, lengths, np.ones(1)).ravel()


def kernel(policy, pair_a, pair_b):
    """Gradient dot product between two (problem, sequence) pairs."""
    return float(grad_log_prob(policy, *pair_a) @ grad_log_prob(policy, *pair_b))


def gram_matrix(policy, pairs):
    grads = np.stack([grad_log_prob(policy, x, y) for x, y in pairs])
    return grads @ grads.T


def token_entropy(policy, x, prefix=()):
    prefix = tuple(prefix)
    if prefix:
        check_tokens(policy, prefix)
    p = policy.next_probs(x, prefix)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
