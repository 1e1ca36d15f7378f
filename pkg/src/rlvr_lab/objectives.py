"""Update rules: REINFORCE (optionally negative-upweighted), maximum likelihood,
GRPO and SELF. Gradients are exact ascent directions in parameter space and
steps are plain SGD: ``params += eta * direction``.
"""

from dataclasses import dataclass, field

import numpy as np

from rlvr_lab import envs, kernels
from rlvr_lab import policy as pol

ADV_EPS = 1e-8


class ObjectiveError(ValueError):
    pass


@dataclass
class GroupRollouts:
    problem_id: int
    tokens: np.ndarray  # (G, T), -1 padded
    lengths: np.ndarray  # (G,)
    token_logp: np.ndarray  # (G, T) under the sampling policy, temperature 1
    rewards: np.ndarray  # (G,)
    advantages: np.ndarray = None

    def __post_init__(self):
        if self.tokens.shape[0] < 2:
            raise ObjectiveError("a group needs at least 2 rollouts")
        n = self.tokens.shape[0]
        if self.lengths.shape != (n,) or self.rewards.shape != (n,) or self.token_logp.shape != self.tokens.shape:
            raise ObjectiveError("group arrays have mismatched shapes")

    @property
    def size(self):
        return self.tokens.shape[0]

    @property
    def rollouts(self):
        return [
            pol.Rollout(self.problem_id, tuple(int(t) for t in row[:n]), tuple(float(v) for v in lp[:n]), float(r))
            for row, n, lp, r in zip(self.tokens, self.lengths, self.token_logp, self.rewards)
        ]


@dataclass
class UpdateReport:
    objective: str
    eta: float
    grad_norm: float = 0.0
    clip_fraction: float = 0.0
    n_tokens: int = 0
    n_groups: int = 0
    n_filtered: int = 0
    kl_estimate: float = None
    mean_reward: float = None
    extra: dict = field(default_factory=dict)


# REINFORCE / MLE


def _rollout_arrays(policy, batch, suite):
    tokens, lengths = pol.pack(policy, [r.tokens for r in batch])
    feats = suite.features([r.problem_id for r in batch])
    return feats, tokens, lengths


def reinforce_grad(policy, batch, suite, baseline="none", neg_weight=1.0):
    """``sum_y A(y) grad log pi(y|x)`` over a list of :class:`Rollout`.

    ``baseline="mean"`` subtracts the batch-mean reward; rollouts with
    negative advantage are scaled by ``neg_weight`` (>1 upweights the
    negative signal).
    """
    if not batch:
        raise ObjectiveError("empty rollout batch")
    if neg_weight <= 0:
        raise ObjectiveError("neg_weight must be positive")
    rewards = np.array([r.reward for r in batch], dtype=np.float64)
    if baseline == "mean":
        adv = rewards - rewards.mean()
    elif baseline == "none":
        adv = rewards
    else:
        raise ObjectiveError(f"unknown baseline {baseline!r}")
    adv = np.where(adv < 0, neg_weight * adv, adv)
    feats, tokens, lengths = _rollout_arrays(policy, batch, suite)
    return pol.batch_grad(policy, feats, tokens, lengths, adv).ravel()


def _pair_arrays(policy, pairs):
    feats = np.stack([pol.features_of(x, policy) for x, _ in pairs])
    tokens, lengths = pol.pack(policy, [y for _, y in pairs])
    return feats, tokens, lengths


def mle_grad(policy, pairs):
    """Mean of ``grad log pi(y|x)`` over (problem, sequence) pairs.

    Over samples of a reference policy this is also the ascent direction of
    ``-KL(reference || policy)``.
    """
    if not pairs:
        raise ObjectiveError("mle_grad needs at least one pair")
    feats, tokens, lengths = _pair_arrays(policy, pairs)
    return pol.batch_grad(policy, feats, tokens, lengths, np.full(len(pairs), 1.0 / len(pairs))).ravel()


def mle_grad_arrays(policy, feats, tokens, lengths):
    n = tokens.shape[0]
    return pol.batch_grad(policy, feats, tokens, lengths, np.full(n, 1.0 / n)).ravel()


# GRPO


def grpo_advantages(rewards):
    """Group-normalised advantages ``(r - mean) / std`` with the G-1 std.

    Groups with std below 1e-8 carry no signal and get all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ObjectiveError("grpo_advantages needs a group of at least 2 rewards")
    centred = r - r.mean()
    sigma = np.sqrt((centred**2).sum() / (r.size - 1))
    if sigma < ADV_EPS:
        return np.zeros_like(r)
    return centred / sigma


def sample_groups(policy, suite, ids, group_size, rng_for, temperature=1.0, reward_spec=envs.RewardSpec()):
    """Sample ``group_size`` rollouts per problem; ``rng_for(pid)`` supplies each
    problem's generator so results do not depend on which problems are sampled."""
    ids = [int(i) for i in ids]
    if not ids:
        return []
    if group_size < 2:
        raise ObjectiveError("group_size must be at least 2")
    uniforms = np.concatenate([rng_for(pid).random((group_size, policy.max_len)) for pid in ids])
    feats = np.repeat(suite.features(ids), group_size, axis=0)
    tokens, lengths, logp = kernels.sample(
        policy.params, feats, uniforms, 1.0 / temperature, policy.offsets, policy.base, policy.terminator
    )
    groups = []
    for k, pid in enumerate(ids):
        sl = slice(k * group_size, (k + 1) * group_size)
        rewards = envs.batch_verify(suite, [pid] * group_size, tokens[sl], lengths[sl], reward_spec)
        g = GroupRollouts(pid, tokens[sl], lengths[sl], logp[sl], rewards)
        g.advantages = grpo_advantages(rewards)
        groups.append(g)
    return groups


def _stack_groups(groups):
    tokens = np.concatenate([g.tokens for g in groups])
    lengths = np.concatenate([g.lengths for g in groups])
    ids = np.concatenate([np.full(g.size, g.problem_id) for g in groups])
    adv = np.concatenate([g.advantages for g in groups])
    scale = np.concatenate([np.full(g.size, 1.0 / g.size) for g in groups])
    return ids, tokens, lengths, adv, scale


def clip_token_weights(ratio, adv, eps):
    """d/d log pi of ``min(rho A, clip(rho) A)`` per token, plus the violation mask.

    ``ratio`` and ``adv`` broadcast to the token grid. The clipped branch has
    zero gradient; it is active when ``A > 0, rho > 1+eps`` or ``A < 0, rho < 1-eps``.
    """
    clipped = ((adv > 0) & (ratio > 1.0 + eps)) | ((adv < 0) & (ratio < 1.0 - eps))
    weights = np.where(clipped, 0.0, adv * ratio)
    outside = (ratio <= 1.0 - eps) | (ratio >= 1.0 + eps)
    return weights, outside


def grpo_grad(policy, old_policy, groups, suite, eps=0.2):
    """Ascent direction of the clipped group objective: summed over groups (the
    batch), averaged over each group's rollouts, summed over tokens. Returns ``(flat_grad, clip_fraction, n_tokens)``."""
    if not groups:
        return np.zeros(policy.n_params), 0.0, 0
    if not policy.same_shape(old_policy):
        raise ObjectiveError("policy and old_policy shapes differ")
    for g in groups:
        if g.advantages is None:
            g.advantages = grpo_advantages(g.rewards)
        if g.advantages.shape != (g.size,):
            raise ObjectiveError("advantages do not match group size")
    ids, tokens, lengths, adv, scale = _stack_groups(groups)
    feats = suite.features(ids)
    logp_new = pol.batch_token_logp(policy, feats, tokens, lengths)
    logp_old = pol.batch_token_logp(old_policy, feats, tokens, lengths)
    mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
    ratio = np.where(mask, np.exp(logp_new - logp_old), 1.0)
    weights, outside = clip_token_weights(ratio, adv[:, None], eps)
    weights = np.where(mask, weights * scale[:, None], 0.0)
    n_tokens = int(mask.sum())
    clip_fraction = float((outside & mask).sum() / n_tokens) if n_tokens else 0.0
    grad = pol.batch_grad(policy, feats, tokens, lengths, weights).ravel()
    return grad, clip_fraction, n_tokens


def reverse_kl_grad(policy, base_policy, groups, suite):
    """Ascent direction of ``-KL(policy || base)`` summed over the states the
    groups visit (exact per state), weighted like :func:`grpo_grad`."""
    ids, tokens, lengths, _, scale = _stack_groups(groups)
    feats = suite.features(ids)
    grad = np.zeros_like(policy.params)
    kl_total = 0.0
    code = np.zeros(len(ids), dtype=np.int64)
    for t in range(policy.max_len):
        rows = np.flatnonzero(lengths > t)
        if rows.size == 0:
            break
        states = policy.offsets[t] + code[rows]
        code[rows] = code[rows] * policy.base + tokens[rows, t]
        f = feats[rows]
        z = np.einsum("bd,bdv->bv", f, policy.params[states])
        zb = np.einsum("bd,bdv->bv", f, base_policy.params[states])
        logp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
        logq = zb - np.logaddexp.reduce(zb, axis=1, keepdims=True)
        p = np.exp(logp)
        kl = (p * (logp - logq)).sum(axis=1)
        kl_total += float((kl * scale[rows]).sum())
        # d KL / d z = p * (log p - log q - KL)
        dz = -(p * (logp - logq - kl[:, None])) * scale[rows][:, None]
        np.add.at(grad, states, f[:, :, None] * dz[:, None, :])
    return grad.ravel(), kl_total


def _apply(policy, direction, eta):
    if not np.all(np.isfinite(direction)):
        raise FloatingPointError("non-finite gradient")
    return policy.with_params(policy.params + eta * direction.reshape(policy.params.shape))


def grpo_step(policy, old_policy, groups, suite, eps=0.2, eta=0.05, kl_beta=0.0, base_policy=None):
    """One SGD ascent step on the clipped group objective (minus ``kl_beta`` times
    the reverse KL to ``base_policy``). Returns ``(new_policy, report)``."""
    if not 0.0 < eps < 1.0:
        raise ObjectiveError("eps must lie in (0, 1)")
    direction, clip_fraction, n_tokens = grpo_grad(policy, old_policy, groups, suite, eps)
    kl = None
    if kl_beta > 0:
        if base_policy is None:
            raise ObjectiveError("kl_beta > 0 needs base_policy")
        kl_dir, kl = reverse_kl_grad(policy, base_policy, groups, suite)
        direction = direction + kl_beta * kl_dir
    report = UpdateReport(
        "grpo",
        eta,
        grad_norm=float(np.linalg.norm(direction)),
        clip_fraction=clip_fraction,
        n_tokens=n_tokens,
        n_groups=len(groups),
        kl_estimate=kl,
        mean_reward=float(np.mean([g.rewards.mean() for g in groups])) if groups else None,
    )
    return _apply(policy, direction, eta), report


def reinforce_step(policy, groups, suite, eta=0.05, neg_weight=1.0, baseline="mean"):
    """REINFORCE on sampled groups: per-group baseline, negatives scaled by
    ``neg_weight``, weighted like :func:`grpo_grad` (sum over groups, mean
    within a group)."""
    if neg_weight <= 0:
        raise ObjectiveError("neg_weight must be positive")
    if not groups:
        return policy.copy(), UpdateReport("reinforce", eta)
    direction = np.zeros(policy.n_params)
    for g in groups:
        batch = g.rollouts
        direction += reinforce_grad(policy, batch, suite, baseline, neg_weight) / g.size
    report = UpdateReport(
        "reinforce",
        eta,
        grad_norm=float(np.linalg.norm(direction)),
        n_tokens=int(sum(g.lengths.sum() for g in groups)),
        n_groups=len(groups),
        mean_reward=float(np.mean([g.rewards.mean() for g in groups])),
    )
    return _apply(policy, direction, eta), report


# SELF


def self_filter(policy, problems):
    """Split problems into (kept, dropped): kept ones are those whose greedy
    decode is wrong under the binary reward."""
    problems = list(problems)
    solved = envs.greedy_solved(policy, problems)
    kept = [p for p, s in zip(problems, solved) if not s]
    dropped = [p for p, s in zip(problems, solved) if s]
    return kept, dropped


def forward_kl_terms(policy, probe, suite, correct_only=False):
    """(ascent direction of -KL(base || policy), KL estimate) from probe pairs."""
    sel = probe.rewards > 0 if correct_only else np.ones(len(probe), dtype=bool)
    if not sel.any():
        return np.zeros(policy.n_params), 0.0
    feats = suite.features(probe.problem_ids[sel])
    tokens, lengths = probe.tokens[sel], probe.lengths[sel]
    cur = pol.batch_logp(policy, feats, tokens, lengths)
    kl = float(np.mean(probe.base_logp[sel] - cur))
    return mle_grad_arrays(policy, feats, tokens, lengths), kl


def self_step(
    policy,
    old_policy,
    suite,
    probe,
    group_size,
    eps,
    eta,
    beta=1e-4,
    rng_for=None,
    problem_ids=None,
    filter_enabled=True,
    kl_correct_only=False,
    temperature=1.0,
    reward_spec=envs.RewardSpec(),
    advantage="grpo",
):
    """Greedy-fail filtering, a group step on the kept problems, and ``beta``
    times a forward-KL pull toward the probe (base-model) samples.

    With ``filter_enabled=False`` and ``beta=0`` this is exactly
    :func:`grpo_step` on groups drawn with the same generators.
    """
    if rng_for is None:
        raise ObjectiveError("self_step needs rng_for to sample its groups")
    ids = suite.ids(envs.TRAIN) if problem_ids is None else [int(i) for i in problem_ids]
    problems = [suite[i] for i in ids]
    if filter_enabled:
        kept, dropped = self_filter(old_policy, problems)
    else:
        kept, dropped = problems, []
    groups = sample_groups(old_policy, suite, [p.id for p in kept], group_size, rng_for, temperature, reward_spec)
    if advantage == "reinforce":
        for g in groups:
            g.advantages = g.rewards - g.rewards.mean()
    elif advantage != "grpo":
        raise ObjectiveError(f"unknown SELF advantage {advantage!r}")
    direction, clip_fraction, n_tokens = grpo_grad(policy, old_policy, groups, suite, eps)
    kl = None
    if beta > 0 and probe is not None:
        kl_dir, kl = forward_kl_terms(policy, probe, suite, kl_correct_only)
        direction = direction + beta * kl_dir
    elif probe is not None:
        kl = forward_kl_terms(policy, probe, suite, kl_correct_only)[1]
    report = UpdateReport(
        "self",
        eta,
        grad_norm=float(np.linalg.norm(direction)),
        clip_fraction=clip_fraction,
        n_tokens=n_tokens,
        n_groups=len(groups),
        n_filtered=len(dropped),
        kl_estimate=kl,
        mean_reward=float(np.mean([g.rewards.mean() for g in groups])) if groups else None,
        extra={"groups": groups},
    )
    return _apply(policy, direction, eta), report
