"""Measurement machinery: probe sets, per-step influence, interference,
perplexity, accuracy deltas, Pass@k, clip violations and strategy mix.

Most metrics compare two policy snapshots on a frozen set of
(problem, sequence) pairs drawn once from the base model.
"""

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from rlvr_lab import envs, kernels
from rlvr_lab import policy as pol

PROBE_STREAM = 1
STRATEGY_STREAM = 2
MC_STREAM = 3


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbeSet:
    problem_ids: np.ndarray  # (n,)
    tokens: np.ndarray  # (n, T)
    lengths: np.ndarray  # (n,)
    rewards: np.ndarray  # (n,) binary
    base_logp: np.ndarray  # (n,)
    samples_per_problem: int
    temperature: float

    def __post_init__(self):
        for arr in (self.problem_ids, self.tokens, self.lengths, self.rewards, self.base_logp):
            arr.setflags(write=False)

    def __len__(self):
        return self.problem_ids.shape[0]

    @property
    def entries(self):
        return [
            (int(i), tuple(int(t) for t in row[:n]), float(r), float(lp))
            for i, row, n, r, lp in zip(self.problem_ids, self.tokens, self.lengths, self.rewards, self.base_logp)
        ]

    @property
    def correct(self):
        return self.rewards > 0

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.problem_ids, self.tokens, self.lengths, self.rewards, self.base_logp):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_probe(base_policy, suite, k=4, temperature=0.9, seed=0, ids=None):
    """Draw ``k`` responses per problem from the base model; cache rewards and
    base log-likelihoods (temperature 1)."""
    if k < 1:
        raise MetricError("k must be >= 1")
    ids = suite.ids(envs.TRAIN) if ids is None else [int(i) for i in ids]
    uniforms = np.concatenate([np.random.default_rng([seed, PROBE_STREAM, pid]).random((k, base_policy.max_len)) for pid in ids])
    pids = np.repeat(np.array(ids, dtype=np.int64), k)
    feats = suite.features(pids)
    tokens, lengths, logp = kernels.sample(
        base_policy.params, feats, uniforms, 1.0 / temperature, base_policy.offsets, base_policy.base, base_policy.terminator
    )
    rewards = envs.batch_verify(suite, pids, tokens, lengths)
    base_logp = pol.batch_logp(base_policy, feats, tokens, lengths)
    return ProbeSet(pids, tokens, lengths, rewards, base_logp, k, float(temperature))


def probe_logp(policy, probe, suite, mask=None):
    ids, tokens, lengths = probe.problem_ids, probe.tokens, probe.lengths
    if mask is not None:
        ids, tokens, lengths = ids[mask], tokens[mask], lengths[mask]
    return pol.batch_logp(policy, suite.features(ids), tokens, lengths)


def per_step_influence(policy_old, policy_new, x, y):
    return pol.log_prob(policy_new, x, y) - pol.log_prob(policy_old, x, y)


def first_order_prediction(policy, applied_gradient, eta, x, y):
    """``eta * <applied_gradient, grad log pi(y|x)>``: the linearised change in
    log pi(y|x) after ``params += eta * applied_gradient``."""
    g = np.asarray(applied_gradient, dtype=np.float64).ravel()
    if g.shape[0] != policy.n_params:
        raise MetricError(f"gradient length {g.shape[0]} != parameter count {policy.n_params}")
    return float(eta * (g @ pol.grad_log_prob(policy, x, y)))


def influence_deltas(policy_old, policy_new, probe, suite):
    """Per-pair change in log-likelihood over the whole probe."""
    return probe_logp(policy_new, probe, suite) - probe_logp(policy_old, probe, suite)


def interference_delta_plus(policy_old, policy_new, probe, suite):
    """Mean change of log-likelihood over the probe's correct pairs.

    Negative values are negative interference. Returns ``None`` when the
    probe holds no correct pair.
    """
    mask = probe.correct
    if not mask.any():
        return None
    return float(np.mean(probe_logp(policy_new, probe, suite, mask) - probe_logp(policy_old, probe, suite, mask)))


def influence_magnitude(policy_old, policy_new, probe, suite):
    """Mean squared change of log-likelihood over all probe pairs."""
    if len(probe) == 0:
        return 0.0
    d = influence_deltas(policy_old, policy_new, probe, suite)
    return float(np.mean(d * d))


def perplexity(policy, pairs=None, *, feats=None, tokens=None, lengths=None):
    """Mean over pairs of ``exp(-log pi(y|x) / |y|)``.

    Pass either ``pairs`` (a list of (problem, sequence)) or padded arrays.
    """
    if pairs is not None:
        if not pairs:
            raise MetricError("perplexity of an empty pair set")
        feats = np.stack([pol.features_of(x, policy) for x, _ in pairs])
        tokens, lengths = pol.pack(policy, [y for _, y in pairs])
    if tokens is None or tokens.shape[0] == 0:
        raise MetricError("perplexity of an empty pair set")
    logp = pol.batch_logp(policy, feats, tokens, lengths)
    return float(np.mean(np.exp(-logp / lengths)))


def probe_perplexity(policy, probe, suite, mask=None):
    ids, tokens, lengths = probe.problem_ids, probe.tokens, probe.lengths
    if mask is not None:
        ids, tokens, lengths = ids[mask], tokens[mask], lengths[mask]
    if ids.shape[0] == 0:
        return None
    return perplexity(policy, feats=suite.features(ids), tokens=tokens, lengths=lengths)


# accuracy


def tempered(policy, temperature):
    """Policy whose temperature-1 distribution equals ``policy`` at ``temperature``."""
    if temperature <= 0:
        raise MetricError("temperature must be positive")
    if temperature == 1.0:
        return policy
    return policy.with_params(policy.params / temperature)


def correct_mass(policy, problems, temperature=1.0):
    """Exact probability of sampling a correct sequence, per problem."""
    problems = list(problems)
    if not problems:
        return np.zeros(0)
    p = tempered(policy, temperature)
    seqs = [y for prob in problems for y in prob.correct_set]
    owner = np.concatenate([[i] * len(prob.correct_set) for i, prob in enumerate(problems)]).astype(np.int64)
    feats = np.stack([problems[i].features for i in owner])
    tokens, lengths = pol.pack(p, seqs)
    probs = np.exp(pol.batch_logp(p, feats, tokens, lengths))
    return np.bincount(owner, weights=probs, minlength=len(problems))


def mc_accuracy(policy, problem, n_samples, seed=0, temperature=1.0):
    """Monte Carlo success rate; returns ``(mean, n_correct)``. ``seed`` may be
    an int or a tuple of ints."""
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), MC_STREAM, problem.id])
    feats = np.repeat(problem.features[None, :], n_samples, axis=0)
    tokens, lengths, _ = pol.sample_batch(policy, feats, rng, temperature)
    hits = sum(problem.is_correct(row[:n]) for row, n in zip(tokens, lengths))
    return hits / n_samples, hits


def delta_r(problem, policy, base_policy, n_samples=None, seed=0, temperature=1.0):
    """Change in expected reward from ``base_policy`` to ``policy``; exact when
    ``n_samples`` is None."""
    if n_samples is None:
        return float(correct_mass(policy, [problem], temperature)[0] - correct_mass(base_policy, [problem], temperature)[0])
    if n_samples < 1:
        raise MetricError("n_samples must be >= 1")
    a, _ = mc_accuracy(policy, problem, n_samples, seed, temperature)
    b, _ = mc_accuracy(base_policy, problem, n_samples, seed + 1, temperature)
    return float(a - b)


def partition_by_delta_r(deltas):
    """Split ``{problem_id: delta_r}`` into (improved, regressed) id lists."""
    up = sorted(i for i, d in deltas.items() if d > 0)
    down = sorted(i for i, d in deltas.items() if d < 0)
    return up, down


# Pass@k


def pass_at_k_single(n, c, k):
    """Unbiased ``1 - C(n-c, k) / C(n, k)`` in exact rational arithmetic."""
    if not (0 <= c <= n):
        raise MetricError(f"need 0 <= c <= n, got n={n}, c={c}")
    if k < 1 or k > n:
        raise MetricError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    return float(1 - Fraction(math.comb(n - c, k), math.comb(n, k)))


def pass_at_k(outcomes, k):
    """Mean unbiased Pass@k over per-problem ``(n, c)`` outcomes."""
    outcomes = list(outcomes)
    if not outcomes:
        raise MetricError("no outcomes")
    return float(np.mean([pass_at_k_single(n, c, k) for n, c in outcomes]))


def pass_at_k_exact(success_probs, k):
    """Pass@k from exact per-problem success probabilities: mean of ``1-(1-p)^k``."""
    p = np.clip(np.asarray(success_probs, dtype=np.float64), 0.0, 1.0)
    if p.size == 0:
        return 0.0
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.expm1(k * np.log1p(-p))))


# trust region


def clip_violation_rate(policy, old_policy, feats, tokens, lengths, eps=0.2):
    """Fraction of tokens whose probability ratio leaves ``(1-eps, 1+eps)``."""
    if not 0.0 < eps < 1.0:
        raise MetricError("eps must lie in (0, 1)")
    new = pol.batch_token_logp(policy, feats, tokens, lengths)
    old = pol.batch_token_logp(old_policy, feats, tokens, lengths)
    mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
    if not mask.any():
        return 0.0
    ratio = np.exp(new - old)[mask]
    return float(np.mean((ratio <= 1.0 - eps) | (ratio >= 1.0 + eps)))


def pair_clip_violation_rate(policy, old_policy, pairs, eps=0.2):
    feats = np.stack([pol.features_of(x, policy) for x, _ in pairs])
    tokens, lengths = pol.pack(policy, [y for _, y in pairs])
    return clip_violation_rate(policy, old_policy, feats, tokens, lengths, eps)


def probe_clip_violation_rate(policy, old_policy, probe, suite, eps=0.2):
    return clip_violation_rate(policy, old_policy, suite.features(probe.problem_ids), probe.tokens, probe.lengths, eps)


def mean_token_entropy(policy, feats, tokens, lengths):
    """Average next-token entropy over the states a padded batch visits."""
    total, count = 0.0, 0
    code = np.zeros(tokens.shape[0], dtype=np.int64)
    for t in range(tokens.shape[1]):
        rows = np.flatnonzero(lengths > t)
        if rows.size == 0:
            break
        z = np.einsum("bd,bdv->bv", feats[rows], policy.params[policy.offsets[t] + code[rows]])
        logp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
        total += float(-(np.exp(logp) * logp).sum())
        count += rows.size
        code[rows] = code[rows] * policy.base + tokens[rows, t]
    return total / count if count else 0.0


# strategies


def strategy_frequency(policy, suite, n_samples, seed=0, ids=None, temperature=1.0):
    """Sampled share of each strategy (by first token) and per-strategy accuracy.

    Returns ``{"A": f_A, "B": f_B, "unlabeled": f_none, "acc_A": ..., "acc_B": ...}``;
    accuracies are None when a strategy was never sampled.
    """
    if n_samples < 1:
        raise MetricError("n_samples must be >= 1")
    ids = suite.ids() if ids is None else [int(i) for i in ids]
    a_tok, b_tok = suite.config.strategy_tokens()
    label = np.full(suite.vocab_size, 2, dtype=np.int64)
    label[list(a_tok)] = 0
    label[list(b_tok)] = 1
    uniforms = np.concatenate([np.random.default_rng([seed, STRATEGY_STREAM, pid]).random((n_samples, policy.max_len)) for pid in ids])
    pids = np.repeat(np.array(ids, dtype=np.int64), n_samples)
    tokens, lengths, _ = kernels.sample(
        policy.params, suite.features(pids), uniforms, 1.0 / temperature, policy.offsets, policy.base, policy.terminator
    )
    labs = label[tokens[:, 0]]
    correct = np.array([suite[int(i)].is_correct(row[:n]) for i, row, n in zip(pids, tokens, lengths)])
    total = labs.size
    out = {"A": float(np.sum(labs == 0) / total), "B": float(np.sum(labs == 1) / total), "unlabeled": float(np.sum(labs == 2) / total)}
    for name, code in (("A", 0), ("B", 1)):
        sel = labs == code
        out[f"acc_{name}"] = float(correct[sel].mean()) if sel.any() else None
    return out


def strategy_mass(policy, suite, ids=None, temperature=1.0):
    """Exact first-token probability mass of each strategy, averaged over problems."""
    ids = suite.ids() if ids is None else [int(i) for i in ids]
    p = tempered(policy, temperature)
    z = suite.features(ids) @ p.params[0]
    z = z - z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    a_tok, b_tok = suite.config.strategy_tokens()
    return {"A": float(probs[:, list(a_tok)].sum(axis=1).mean()), "B": float(probs[:, list(b_tok)].sum(axis=1).mean())}


# checkpoint pairs


@dataclass
class CheckpointPairStats:
    step_a: int
    step_b: int
    delta_plus: float
    magnitude: float
    delta_pass: dict


def checkpoint_pair_stats(policy_a, policy_b, step_a, step_b, eval_suite, ks=(64,), ids=None, temperature=1.0, n_samples=None, seed=0):
    """Interference of ``policy_b`` relative to ``policy_a`` on correct pairs of
    ``eval_suite`` drawn from ``policy_a``, alongside the change in Pass@k.

    With ``n_samples=None`` the expectation over correct pairs is exact (every
    correct sequence weighted by its probability under ``policy_a``).
    """
    if step_b < step_a:
        raise MetricError("checkpoint pair must satisfy step_b >= step_a")
    problems = [eval_suite[i] for i in (eval_suite.ids(envs.TEST) if ids is None else ids)]
    seqs = [y for p in problems for y in p.correct_set]
    owner = [p for p in problems for _ in p.correct_set]
    feats = np.stack([p.features for p in owner])
    tokens, lengths = pol.pack(policy_a, seqs)
    la = pol.batch_logp(policy_a, feats, tokens, lengths)
    lb = pol.batch_logp(policy_b, feats, tokens, lengths)
    diff = lb - la
    if n_samples is None:
        w = np.exp(la)
        dplus = float((w * diff).sum() / w.sum()) if w.sum() > 0 else 0.0
        mag = float((w * diff * diff).sum() / w.sum()) if w.sum() > 0 else 0.0
    else:
        rng = np.random.default_rng([seed, MC_STREAM, step_a, step_b])
        pa = np.exp(la)
        hits = rng.binomial(n_samples, np.clip(pa, 0, 1))
        dplus = float((hits * diff).sum() / hits.sum()) if hits.sum() else 0.0
        mag = float((hits * diff * diff).sum() / hits.sum()) if hits.sum() else 0.0
    ma = correct_mass(policy_a, problems, temperature)
    mb = correct_mass(policy_b, problems, temperature)
    dpass = {k: pass_at_k_exact(mb, k) - pass_at_k_exact(ma, k) for k in ks}
    return CheckpointPairStats(step_a, step_b, dplus, mag, dpass)


def pearson(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise MetricError("pearson needs two equal-length series of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc / denom) if denom > 0 else 0.0


def moving_average(values, window):
    """Centred moving average; the window shrinks at the edges."""
    v = np.asarray(values, dtype=np.float64)
    if window <= 1 or v.size == 0:
        return v.copy()
    half = window // 2
    out = np.empty_like(v)
    for i in range(v.size):
        lo, hi = max(0, i - half), min(v.size, i + half + 1)
        out[i] = v[lo:hi].mean()
    return out
