"""Synthetic verifiable-reward suites and the toy bandit.

A suite is a list of problems over a shared token space. Each problem has a
small set of correct sequences (its answer set), a feature vector that the
policy conditions on, and a pretraining exposure weight. Problems belong to
*skills*: problems of the same skill share an answer set, and their
features sit near a common skill embedding, which is what lets learning on
the training split move the test split in either direction.

Correct sequences are "formatted": full length with the terminator (the
last vocabulary index) as the final token.
"""

import json
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np

from rlvr_lab import policy as pol

SUITE_FORMAT_VERSION = 1

BINARY = "binary"
SHAPED = "shaped"
HIGH = "high"
LOW = "low"
TRAIN = "train"
TEST = "test"


class ConfigError(ValueError):
    pass


class ConstructionError(RuntimeError):
    """Pretraining did not reach the requested likelihood margin."""


@dataclass(frozen=True)
class RewardSpec:
    mode: str = BINARY
    correct: float = 1.0
    formatted_wrong: float = -0.5
    unformatted: float = -1.0

    def __post_init__(self):
        if self.mode not in (BINARY, SHAPED):
            raise ConfigError(f"unknown reward mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class Problem:
    id: int
    features: np.ndarray
    correct_set: tuple
    labels: tuple  # strategy label of each correct sequence
    base_frequency: float
    split: str = TRAIN
    tier: str = LOW
    skill: int = 0
    terminator: int = -1
    exposure: tuple = ()  # relative pretraining weight of each correct sequence

    def is_correct(self, y):
        return tuple(int(t) for t in y) in self.correct_set


@dataclass
class SuiteConfig:
    n_problems: int = 64
    test_fraction: float = 0.5
    f_high: float = 0.25
    vocab_size: int = 16
    max_len: int = 4
    feature_dim: int = 8
    n_skills: int = 32
    p_two_solutions: float = 0.5  # chance a skill has two correct sequences instead of one
    high_frequency: tuple = (0.5, 1.0)
    low_frequency: tuple = (0.0, 0.05)
    secondary_exposure: float = 0.3
    shared_feature: float = 1.0  # constant feature coordinate common to all problems
    feature_noise: float = 0.3
    strategy_a_tokens: tuple = None  # default: even non-terminator tokens
    strategy_b_tokens: tuple = None  # default: odd non-terminator tokens
    # None: answers drawn from all tokens. Otherwise every skill gets one A and one B
    # answer, and the A answer is the primary (fully exposed) one with this probability.
    strategy_bias: float = None

    def __post_init__(self):
        self.high_frequency = tuple(self.high_frequency)
        self.low_frequency = tuple(self.low_frequency)
        if self.strategy_a_tokens is not None:
            self.strategy_a_tokens = tuple(self.strategy_a_tokens)
        if self.strategy_b_tokens is not None:
            self.strategy_b_tokens = tuple(self.strategy_b_tokens)

    @property
    def terminator(self):
        return self.vocab_size - 1

    def strategy_tokens(self):
        body = range(self.vocab_size - 1)
        a = self.strategy_a_tokens if self.strategy_a_tokens is not None else tuple(t for t in body if t % 2 == 0)
        b = self.strategy_b_tokens if self.strategy_b_tokens is not None else tuple(t for t in body if t % 2 == 1)
        return tuple(a), tuple(b)

    def answer_space_size(self):
        return (self.vocab_size - 1) ** (self.max_len - 1)


@dataclass
class ProblemSuite:
    problems: list
    vocab_size: int
    max_len: int
    seed: int
    config: SuiteConfig = field(default=None, repr=False)

    def __post_init__(self):
        ids = [p.id for p in self.problems]
        if ids != list(range(len(ids))):
            raise ConfigError("problem ids must be dense and ordered")
        self._features = np.stack([p.features for p in self.problems]) if self.problems else np.zeros((0, 0))

    def __len__(self):
        return len(self.problems)

    def __iter__(self):
        return iter(self.problems)

    def __getitem__(self, pid):
        if not isinstance(pid, (int, np.integer)) or not 0 <= pid < len(self.problems):
            raise LookupError(f"unknown problem id {pid!r}")
        return self.problems[pid]

    @property
    def feature_dim(self):
        return self._features.shape[1]

    @property
    def terminator(self):
        return self.vocab_size - 1

    def features(self, ids=None):
        return self._features if ids is None else self._features[np.asarray(ids, dtype=np.int64)]

    def split(self, name):
        return [p for p in self.problems if p.split == name]

    def ids(self, split=None, tier=None):
        return [p.id for p in self.problems if (split is None or p.split == split) and (tier is None or p.tier == tier)]

    def strategy_of(self, y):
        """Strategy label of a sequence from its first token, or None."""
        a, b = self.config.strategy_tokens() if self.config else SuiteConfig(vocab_size=self.vocab_size).strategy_tokens()
        if not y:
            return None
        if y[0] in a:
            return "A"
        if y[0] in b:
            return "B"
        return None

    def new_policy(self):
        return pol.SoftmaxPolicy.sequence(self.feature_dim, self.vocab_size, self.max_len)

    def to_json(self):
        return dumps_suite(self)


def _answer_subspace(config, first_tokens):
    body = range(config.vocab_size - 1)
    mids = list(product(body, repeat=config.max_len - 2)) if config.max_len >= 2 else [()]
    if config.max_len == 1:
        return [(config.terminator,)]
    return [(f,) + m + (config.terminator,) for f in first_tokens for m in mids]


def make_suite(config=None, seed=0):
    """Build a deterministic suite from ``config`` and ``seed``."""
    config = config or SuiteConfig()
    if config.n_problems < 1 or config.n_skills < 1 or config.n_skills > config.n_problems:
        raise ConfigError("need 1 <= n_skills <= n_problems")
    if not 0.0 <= config.f_high <= 1.0 or not 0.0 <= config.test_fraction < 1.0:
        raise ConfigError("f_high in [0, 1] and test_fraction in [0, 1) required")
    if config.max_len < 2:
        raise ConfigError("sequence suites need max_len >= 2 (answer body plus terminator)")
    if config.strategy_bias is not None and not 0.0 <= config.strategy_bias <= 1.0:
        raise ConfigError("strategy_bias must lie in [0, 1]")
    m_max = 2 if config.p_two_solutions > 0 or config.strategy_bias is not None else 1
    if m_max > config.answer_space_size():
        raise ConfigError(f"answer sets of size {m_max} do not fit in {config.answer_space_size()} sequences")
    rng = np.random.default_rng(seed)
    a_tokens, b_tokens = config.strategy_tokens()

    n_high = int(round(config.f_high * config.n_problems))
    n_test = int(round(config.test_fraction * config.n_problems))
    # skill of each problem: every skill gets at least one problem
    skill_of = np.concatenate([np.arange(config.n_skills), rng.integers(0, config.n_skills, config.n_problems - config.n_skills)])
    rng.shuffle(skill_of)
    # high tier is assigned skill by skill, in random skill order, until n_high problems are covered
    counts = np.bincount(skill_of, minlength=config.n_skills)
    order = rng.permutation(config.n_skills)
    high_skills = set()
    covered = 0
    for s in order:
        if covered + counts[s] <= n_high:
            high_skills.add(int(s))
            covered += counts[s]
    # top up with single problems if skill granularity left a gap
    tier = np.array([HIGH if s in high_skills else LOW for s in skill_of], dtype=object)
    gap = n_high - covered
    if gap > 0:
        spare = [i for i in rng.permutation(config.n_problems) if tier[i] == LOW]
        for i in spare[:gap]:
            tier[i] = HIGH

    # answer sets
    universe = _answer_subspace(config, range(config.vocab_size - 1))
    a_space = _answer_subspace(config, a_tokens)
    b_space = _answer_subspace(config, b_tokens)
    used = set()

    def draw(space, m):
        picks = []
        for idx in rng.permutation(len(space)):
            seq = space[idx]
            if seq not in used:
                picks.append(seq)
                used.add(seq)
                if len(picks) == m:
                    return picks
        raise ConfigError("answer space exhausted")

    skill_answers = {}
    skill_dim = config.feature_dim - 1
    emb = rng.standard_normal((config.n_skills, skill_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    for s in range(config.n_skills):
        if config.strategy_bias is None:
            m = 2 if rng.random() < config.p_two_solutions else 1
            skill_answers[s] = tuple(draw(universe, m))
        else:
            a_ans, b_ans = draw(a_space, 1)[0], draw(b_space, 1)[0]
            primary_a = rng.random() < config.strategy_bias
            skill_answers[s] = (a_ans, b_ans) if primary_a else (b_ans, a_ans)

    # every skill keeps at least one training problem so the test split is in-distribution
    first_of_skill = {}
    for i in rng.permutation(config.n_problems):
        first_of_skill.setdefault(int(skill_of[i]), int(i))
    anchors = set(first_of_skill.values())
    candidates = [int(i) for i in rng.permutation(config.n_problems) if int(i) not in anchors]
    if n_test > len(candidates):
        raise ConfigError("test_fraction too large: every skill needs a training problem")
    test_ids = set(candidates[:n_test])
    problems = []
    for i in range(config.n_problems):
        s = int(skill_of[i])
        answers = skill_answers[s]
        if tier[i] == HIGH:
            freq = rng.uniform(*config.high_frequency)
        else:
            freq = rng.uniform(*config.low_frequency)
        feats = np.concatenate([[config.shared_feature], emb[s] + config.feature_noise * rng.standard_normal(skill_dim)])
        labels = []
        for y in answers:
            lab = "A" if y[0] in a_tokens else ("B" if y[0] in b_tokens else "-")
            labels.append(lab)
        exposure = (1.0,) + (config.secondary_exposure,) * (len(answers) - 1)
        problems.append(
            Problem(
                id=i,
                features=feats,
                correct_set=answers,
                labels=tuple(labels),
                base_frequency=float(freq),
                split=TEST if i in test_ids else TRAIN,
                tier=str(tier[i]),
                skill=s,
                terminator=config.terminator,
                exposure=exposure,
            )
        )
    return ProblemSuite(problems, config.vocab_size, config.max_len, seed, config)


def verify(problem, y, spec=RewardSpec()):
    """Reward of sequence ``y`` for ``problem``."""
    y = tuple(int(t) for t in y)
    hit = y in problem.correct_set
    if spec.mode == BINARY:
        return 1.0 if hit else 0.0
    if hit:
        return spec.correct
    if y and y[-1] == problem.terminator:
        return spec.formatted_wrong
    return spec.unformatted


def batch_verify(suite, ids, tokens, lengths, spec=RewardSpec()):
    return np.array([verify(suite[int(i)], row[:n], spec) for i, row, n in zip(ids, tokens, lengths)])


# base model


@dataclass
class PretrainReport:
    steps: int
    margin: float
    high_mean_logp: float
    low_mean_logp: float
    high_greedy_solved: float
    low_greedy_solved: float


def correct_set_logp(policy, problems):
    """Mean log-likelihood of each problem's correct sequences."""
    out = []
    for p in problems:
        feats = np.repeat(p.features[None, :], len(p.correct_set), axis=0)
        tokens, lengths = pol.pack(policy, p.correct_set)
        out.append(pol.batch_logp(policy, feats, tokens, lengths).mean())
    return np.array(out)


def greedy_solved(policy, problems):
    if not problems:
        return np.zeros(0, dtype=bool)
    feats = np.stack([p.features for p in problems])
    tokens, lengths = pol.greedy_batch(policy, feats)
    return np.array([p.is_correct(row[:n]) for p, row, n in zip(problems, tokens, lengths)])


def bias_report(policy, suite, steps=0):
    high = [p for p in suite if p.tier == HIGH]
    low = [p for p in suite if p.tier == LOW]
    hi = correct_set_logp(policy, high)
    lo = correct_set_logp(policy, low)
    hi_mean = float(hi.mean()) if hi.size else 0.0
    lo_mean = float(lo.mean()) if lo.size else 0.0
    return PretrainReport(
        steps=steps,
        margin=hi_mean - lo_mean,
        high_mean_logp=hi_mean,
        low_mean_logp=lo_mean,
        high_greedy_solved=float(greedy_solved(policy, high).mean()) if high else 0.0,
        low_greedy_solved=float(greedy_solved(policy, low).mean()) if low else 0.0,
    )


def pretrain_base(policy, suite, exposure_steps, seed=0, lr=0.5, batch_size=32, min_margin=1.0):
    """Maximum-likelihood pretraining on correct sequences, drawn in proportion
    to each problem's ``base_frequency`` (and each answer's exposure weight).

    Returns ``(base_policy, report)``. Raises :class:`ConstructionError` if
    the high-minus-low likelihood margin stays below ``min_margin``.
    """
    base = policy.copy()
    if exposure_steps <= 0:
        return base, bias_report(base, suite, 0)
    pairs = [(p.id, y, p.base_frequency * w) for p in suite for y, w in zip(p.correct_set, p.exposure)]
    weights = np.array([w for _, _, w in pairs])
    if weights.sum() <= 0:
        raise ConstructionError("no pretraining exposure: every base_frequency is zero")
    weights = weights / weights.sum()
    all_tokens, all_lengths = pol.pack(base, [y for _, y, _ in pairs])
    all_ids = np.array([pid for pid, _, _ in pairs])
    rng = np.random.default_rng(seed)
    for _ in range(exposure_steps):
        pick = rng.choice(len(pairs), size=batch_size, p=weights)
        feats = suite.features(all_ids[pick])
        grad = pol.batch_grad(base, feats, all_tokens[pick], all_lengths[pick], np.full(batch_size, 1.0 / batch_size))
        base.params += lr * grad
    report = bias_report(base, suite, exposure_steps)
    if report.margin < min_margin:
        raise ConstructionError(f"likelihood margin {report.margin:.3f} < {min_margin} after {exposure_steps} steps")
    return base, report


# suite files


def dumps_suite(suite):
    doc = {
        "format_version": SUITE_FORMAT_VERSION,
        "vocab_size": suite.vocab_size,
        "max_len": suite.max_len,
        "seed": suite.seed,
        "config": asdict(suite.config) if suite.config else None,
        "problems": [
            {
                "id": p.id,
                "features": [float(v) for v in p.features],
                "correct_set": [list(y) for y in p.correct_set],
                "labels": list(p.labels),
                "base_frequency": p.base_frequency,
                "split": p.split,
                "tier": p.tier,
                "skill": p.skill,
                "exposure": list(p.exposure),
            }
            for p in suite.problems
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def loads_suite(text):
    doc = json.loads(text)
    if doc.get("format_version") != SUITE_FORMAT_VERSION:
        raise ConfigError(f"unsupported suite format version {doc.get('format_version')!r}")
    config = SuiteConfig(**doc["config"]) if doc.get("config") else None
    term = doc["vocab_size"] - 1
    problems = [
        Problem(
            id=r["id"],
            features=np.array(r["features"], dtype=np.float64),
            correct_set=tuple(tuple(y) for y in r["correct_set"]),
            labels=tuple(r["labels"]),
            base_frequency=r["base_frequency"],
            split=r["split"],
            tier=r["tier"],
            skill=r["skill"],
            terminator=term,
            exposure=tuple(r["exposure"]),
        )
        for r in doc["problems"]
    ]
    return ProblemSuite(problems, doc["vocab_size"], doc["max_len"], doc["seed"], config)


# toy bandit


def make_bandit(vocab_size=50, feature_dim=5, seed=0, init="uniform", peak_actions=(3, 8), peak_margin=7.0):
    """Contextual softmax bandit: returns ``(policy, x)``.

    ``peaky`` puts ``peak_margin`` nats of extra logit on ``peak_actions``
    (splitting it so that earlier peaks stay slightly higher), ``uniform``
    leaves all weights at zero.
    """
    if vocab_size < 3 or feature_dim < 1:
        raise ConfigError("make_bandit needs vocab_size >= 3 and feature_dim >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(feature_dim)
    bandit = pol.SoftmaxPolicy.bandit(feature_dim, vocab_size)
    if init == "peaky":
        target = np.zeros(vocab_size)
        for rank, a in enumerate(peak_actions):
            target[a] = peak_margin - 0.5 * rank
        # minimum-norm weights realising the target logits: theta = x z^T / |x|^2
        bandit.params[0] = np.outer(x, target) / (x @ x)
    elif init != "uniform":
        raise ConfigError(f"unknown bandit init {init!r}")
    return bandit, x
