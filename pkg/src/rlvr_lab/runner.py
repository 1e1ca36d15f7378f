"""Seeded experiment runs: pretraining, training loops, evaluation and
checkpoint-pair analysis.

Every random draw comes from ``np.random.default_rng([seed, tag, *keys])``
with keys such as (problem id, step), so a run resumed from any checkpoint
replays exactly the stream an uninterrupted run would have produced.

Run directory layout::

    manifest.json     config snapshot, status, checkpoint index
    config.json
    suite.json
    base.ckpt
    metrics.jsonl     schema header line, then one line per (step, metric)
    metrics.csv       wide table written when the run finishes
    checkpoints/step_000020.ckpt ...
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from rlvr_lab import __version__, envs, kernels, storage
from rlvr_lab import config as cfg
from rlvr_lab import objectives as obj
from rlvr_lab import probe as pr

ROLLOUT_TAG = 11
BATCH_TAG = 12
PPL_TAG = 13
EVAL_TAG = 14
PAIR_TAG = 15

RUNNING = "running"
COMPLETE = "complete"
FAILED = "failed"


class RunError(RuntimeError):
    pass


class RunAborted(RunError):
    """Training hit a non-finite update; the last good checkpoint is kept."""


@dataclass
class RunManifest:
    config: dict
    artifact_version: str = __version__
    status: str = RUNNING
    checkpoints: dict = field(default_factory=dict)  # "step" -> relative path
    base_checkpoint: str = "base.ckpt"
    suite_file: str = "suite.json"
    probe_digest: str = ""
    kernel_backend: str = ""
    last_step: int = 0
    message: str = ""

    def write(self, run_dir):
        storage.write_json(os.path.join(run_dir, "manifest.json"), asdict(self))

    @classmethod
    def read(cls, run_dir):
        return cls(**storage.read_json(os.path.join(run_dir, "manifest.json")))

    def checkpoint_steps(self):
        return sorted(int(s) for s in self.checkpoints)


def default_run_dir(config, name=None):
    name = name or f"{config.objective}-seed{config.seed}"
    return os.path.join(config.resolved_output_dir(), name)


def build_suite(config):
    return envs.make_suite(config.suite, config.seed)


def load_suite(path):
    with open(path) as fh:
        return envs.loads_suite(fh.read())


def save_suite(suite, path):
    with open(path, "w") as fh:
        fh.write(suite.to_json() + "\n")


def pretrain(config, suite=None):
    suite = suite or build_suite(config)
    return envs.pretrain_base(
        suite.new_policy(),
        suite,
        config.pretrain_steps,
        seed=config.seed,
        lr=config.pretrain_lr,
        batch_size=config.pretrain_batch,
        min_margin=config.min_margin if config.pretrain_steps > 0 else float("-inf"),
    )


def cmd_pretrain(config, out_dir=None):
    """Build the suite and base model; returns ``(out_dir, report)``."""
    out_dir = out_dir or default_run_dir(config, "base-seed%d" % config.seed)
    os.makedirs(out_dir, exist_ok=True)
    suite = build_suite(config)
    base, report = pretrain(config, suite)
    save_suite(suite, os.path.join(out_dir, "suite.json"))
    storage.save_checkpoint(os.path.join(out_dir, "base.ckpt"), base, 0)
    storage.write_json(os.path.join(out_dir, "pretrain.json"), asdict(report))
    cfg.save(config, os.path.join(out_dir, "config.json"))
    return out_dir, report


def _rounded(x):
    return None if x is None else float(x)


class Trainer:
    def __init__(self, config, suite, base, run_dir):
        self.config = config
        self.suite = suite
        self.base = base
        self.run_dir = run_dir
        self.spec = envs.RewardSpec(config.reward_mode)
        self.train_ids = suite.ids(envs.TRAIN)
        self.train = suite.split(envs.TRAIN)
        self.test = suite.split(envs.TEST)
        self.probe = pr.build_probe(base, suite, config.probe_k, config.probe_temperature, config.seed)
        self.base_mass_test = pr.correct_mass(base, self.test, config.eval_temperature)
        self.base_strategy = None

    # sampling streams

    def rng_for(self, step):
        seed = self.config.seed
        return lambda pid: np.random.default_rng([seed, ROLLOUT_TAG, int(pid), step])

    def batch_ids(self, step):
        n = self.config.batch_size
        if n == 0 or n >= len(self.train_ids):
            return list(self.train_ids)
        rng = np.random.default_rng([self.config.seed, BATCH_TAG, step])
        return sorted(int(i) for i in rng.choice(self.train_ids, size=n, replace=False))

    # one update

    def update(self, policy, step):
        c = self.config
        ids = self.batch_ids(step)
        rng_for = self.rng_for(step)
        if c.objective == "self":
            new, report = obj.self_step(
                policy, policy, self.suite, self.probe, c.group_size, c.eps, c.eta, c.beta, rng_for,
                problem_ids=ids, filter_enabled=c.filter_enabled, kl_correct_only=c.kl_correct_only,
                temperature=c.sample_temperature, reward_spec=self.spec, advantage=c.self_advantage,
            )
            groups = report.extra.pop("groups")
        else:
            groups = obj.sample_groups(policy, self.suite, ids, c.group_size, rng_for, c.sample_temperature, self.spec)
            if c.objective == "grpo":
                new, report = obj.grpo_step(policy, policy, groups, self.suite, c.eps, c.eta, c.kl_beta, self.base)
            else:
                new, report = obj.reinforce_step(policy, groups, self.suite, c.eta, c.neg_weight)
        return new, report, groups

    # metrics

    def step_metrics(self, prev, new, report, groups, step, prev_probe_logp, new_probe_logp):
        correct = self.probe.correct
        d = new_probe_logp - prev_probe_logp
        rec = {
            "step": step,
            "objective": self.config.objective,
            "mean_reward": _rounded(report.mean_reward),
            "grad_norm": float(report.grad_norm),
            "train_clip_fraction": float(report.clip_fraction),
            "n_groups": int(report.n_groups),
            "n_filtered": int(report.n_filtered),
            "kl_estimate": _rounded(report.kl_estimate),
            "delta_plus": float(d[correct].mean()) if correct.any() else None,
            "influence_magnitude": float(np.mean(d * d)) if d.size else 0.0,
            "delta_plus_cum": float((new_probe_logp - self.probe.base_logp)[correct].mean()) if correct.any() else None,
            "probe_clip_violation": pr.probe_clip_violation_rate(new, prev, self.probe, self.suite, self.config.eps),
        }
        if groups:
            ids = np.concatenate([np.full(g.size, g.problem_id) for g in groups])
            tokens = np.concatenate([g.tokens for g in groups])
            lengths = np.concatenate([g.lengths for g in groups])
            rec["entropy"] = pr.mean_token_entropy(prev, self.suite.features(ids), tokens, lengths)
        else:
            rec["entropy"] = None
        return rec

    def zero_step_metrics(self):
        correct = self.probe.correct
        return {
            "step": 0,
            "objective": self.config.objective,
            "mean_reward": None,
            "grad_norm": 0.0,
            "train_clip_fraction": 0.0,
            "n_groups": 0,
            "n_filtered": 0,
            "kl_estimate": 0.0,
            "delta_plus": 0.0 if correct.any() else None,
            "influence_magnitude": 0.0,
            "delta_plus_cum": 0.0 if correct.any() else None,
            "probe_clip_violation": 0.0,
            "entropy": None,
        }

    def _pass_at_k(self, policy, problems, step, split):
        c = self.config
        out = {}
        if c.eval_samples:
            outcomes = []
            for p in problems:
                _, hits = pr.mc_accuracy(policy, p, c.eval_samples, seed=(c.seed, EVAL_TAG, step), temperature=c.eval_temperature)
                outcomes.append((c.eval_samples, hits))
            for k in c.pass_ks:
                out[f"pass_at_{k}_{split}"] = pr.pass_at_k(outcomes, k)
        else:
            mass = pr.correct_mass(policy, problems, c.eval_temperature)
            for k in c.pass_ks:
                out[f"pass_at_{k}_{split}"] = pr.pass_at_k_exact(mass, k)
        return out

    def eval_metrics(self, policy, step):
        c = self.config
        rec = {}
        rec.update(self._pass_at_k(policy, self.test, step, "test"))
        rec.update(self._pass_at_k(policy, self.train, step, "train"))

        # perplexity triple: base on current samples, current on base samples, and the D-up / D-down split
        ids = np.repeat(np.array(self.train_ids, dtype=np.int64), c.probe_k)
        uniforms = np.concatenate(
            [np.random.default_rng([c.seed, PPL_TAG, pid, step]).random((c.probe_k, policy.max_len)) for pid in self.train_ids]
        )
        feats = self.suite.features(ids)
        tokens, lengths, _ = kernels.sample(
            policy.params, feats, uniforms, 1.0 / c.sample_temperature, policy.offsets, policy.base, policy.terminator
        )
        rec["ppl_base_on_policy"] = pr.perplexity(self.base, feats=feats, tokens=tokens, lengths=lengths)
        rec["ppl_policy_on_probe"] = pr.probe_perplexity(policy, self.probe, self.suite)
        rec["ppl_policy_on_probe_correct"] = pr.probe_perplexity(policy, self.probe, self.suite, self.probe.correct)
        rec["ppl_policy_on_probe_incorrect"] = pr.probe_perplexity(policy, self.probe, self.suite, ~self.probe.correct)
        mass = pr.correct_mass(policy, self.test, c.eval_temperature)
        dr = mass - self.base_mass_test
        up = [p for p, v in zip(self.test, dr) if v > 0]
        down = [p for p, v in zip(self.test, dr) if v < 0]
        rec["n_up"], rec["n_down"] = len(up), len(down)
        rec["ppl_up"] = pr.perplexity(policy, [(p, y) for p in up for y in p.correct_set]) if up else None
        rec["ppl_down"] = pr.perplexity(policy, [(p, y) for p in down for y in p.correct_set]) if down else None

        freq = pr.strategy_frequency(policy, self.suite, c.strategy_samples, seed=c.seed, temperature=c.eval_temperature)
        rec.update({f"strategy_{k}": v for k, v in freq.items()})
        mass_ab = pr.strategy_mass(policy, self.suite, temperature=c.eval_temperature)
        rec["strategy_mass_A"], rec["strategy_mass_B"] = mass_ab["A"], mass_ab["B"]
        return rec

    # loop

    def run(self, start_policy=None, start_step=0, manifest=None, progress=None):
        c = self.config
        metrics_path = os.path.join(self.run_dir, "metrics.jsonl")
        ckpt_dir = os.path.join(self.run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        manifest = manifest or RunManifest(c.to_dict())
        manifest.probe_digest = self.probe.digest()
        manifest.kernel_backend = kernels.backend()
        manifest.status = RUNNING
        manifest.write(self.run_dir)

        policy = start_policy if start_policy is not None else self.base.copy()
        if start_step == 0:
            with open(metrics_path, "w") as fh:
                fh.write(storage.metric_line({"schema_version": storage.METRICS_SCHEMA_VERSION, "kind": "rlvr_lab.metrics"}) + "\n")
                rec = self.zero_step_metrics()
                rec.update(self.eval_metrics(policy, 0))
                fh.write(storage.metric_lines(rec))
            self._checkpoint(manifest, policy, 0)

        probe_logp = pr.probe_logp(policy, self.probe, self.suite)
        with open(metrics_path, "a") as fh:
            for step in range(start_step + 1, c.steps + 1):
                try:
                    new, report, groups = self.update(policy, step)
                except FloatingPointError as exc:
                    self._checkpoint(manifest, policy, step - 1)
                    manifest.status = FAILED
                    manifest.message = f"non-finite update at step {step}: {exc}"
                    manifest.write(self.run_dir)
                    raise RunAborted(manifest.message) from exc
                new_logp = pr.probe_logp(new, self.probe, self.suite)
                rec = self.step_metrics(policy, new, report, groups, step, probe_logp, new_logp)
                if step % c.eval_every == 0 or step == c.steps:
                    rec.update(self.eval_metrics(new, step))
                fh.write(storage.metric_lines(rec))
                fh.flush()
                policy, probe_logp = new, new_logp
                if step % c.checkpoint_every == 0 or step == c.steps:
                    self._checkpoint(manifest, policy, step)
                if progress:
                    progress(step, rec)
        self.finalize(manifest)
        return policy

    def _checkpoint(self, manifest, policy, step):
        rel = os.path.join("checkpoints", f"step_{step:06d}.ckpt")
        storage.save_checkpoint(os.path.join(self.run_dir, rel), policy, step)
        manifest.checkpoints[str(step)] = rel
        manifest.last_step = step
        manifest.write(self.run_dir)

    def finalize(self, manifest):
        records = storage.read_metrics(os.path.join(self.run_dir, "metrics.jsonl"))
        with open(os.path.join(self.run_dir, "metrics.csv"), "w") as fh:
            fh.write(storage.wide_csv(records))
        manifest.status = COMPLETE
        manifest.message = ""
        manifest.write(self.run_dir)


def cmd_train(config, base_dir=None, run_dir=None, resume=False, progress=None):
    """Train from a pretrained base (``base_dir`` from :func:`cmd_pretrain`), or
    pretrain in place when ``base_dir`` is None. Returns the run directory."""
    run_dir = run_dir or default_run_dir(config)
    os.makedirs(run_dir, exist_ok=True)
    suite_path = os.path.join(run_dir, "suite.json")
    base_path = os.path.join(run_dir, "base.ckpt")

    if resume:
        manifest = RunManifest.read(run_dir)
        saved = cfg.ExperimentConfig.from_dict(manifest.config)
        if saved.to_dict() != config.to_dict():
            raise RunError("resume config differs from the run's saved config")
        suite = load_suite(suite_path)
        base, _ = storage.load_checkpoint(base_path)
        steps = manifest.checkpoint_steps()
        if not steps:
            raise RunError("no checkpoint to resume from")
        start = steps[-1]
        policy, _ = storage.load_checkpoint(os.path.join(run_dir, manifest.checkpoints[str(start)]))
        _truncate_metrics(os.path.join(run_dir, "metrics.jsonl"), start)
        trainer = Trainer(config, suite, base, run_dir)
        if trainer.probe.digest() != manifest.probe_digest:
            raise RunError("probe set differs from the one recorded in the manifest")
        trainer.run(policy, start, manifest, progress)
        return run_dir

    if base_dir is None:
        suite = build_suite(config)
        base, report = pretrain(config, suite)
        storage.write_json(os.path.join(run_dir, "pretrain.json"), asdict(report))
    else:
        suite = load_suite(os.path.join(base_dir, "suite.json"))
        base, _ = storage.load_checkpoint(os.path.join(base_dir, "base.ckpt"))
    save_suite(suite, suite_path)
    storage.save_checkpoint(base_path, base, 0)
    cfg.save(config, os.path.join(run_dir, "config.json"))
    trainer = Trainer(config, suite, base, run_dir)
    trainer.run(progress=progress)
    return run_dir


def _truncate_metrics(path, last_step):
    with open(path) as fh:
        lines = fh.readlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if ln.strip() and json.loads(ln)["step"] <= last_step]
    with open(path, "w") as fh:
        fh.writelines(keep)


# evaluation


@dataclass
class EvalReport:
    temperature: float
    exact: bool
    pass_at_k: dict  # split -> {k: value}
    delta_r: dict  # problem id -> change in accuracy against the reference policy
    d_up: list
    d_down: list

    def to_dict(self):
        return {
            "temperature": self.temperature,
            "exact": self.exact,
            "pass_at_k": {s: {str(k): v for k, v in t.items()} for s, t in self.pass_at_k.items()},
            "delta_r": {str(k): v for k, v in self.delta_r.items()},
            "d_up": self.d_up,
            "d_down": self.d_down,
        }


def cmd_eval(policy, suite, ks=(1, 8, 64), n_samples=None, reference=None, temperature=0.6, seed=0):
    """Pass@k per split; Δr per test problem against ``reference`` (the base)."""
    ks = sorted(int(k) for k in ks)
    if n_samples is not None and n_samples < ks[-1]:
        raise RunError(f"n_samples={n_samples} is smaller than the largest k={ks[-1]}")
    reference = reference if reference is not None else policy
    table = {}
    for split in (envs.TRAIN, envs.TEST):
        problems = suite.split(split)
        if not problems:
            continue
        if n_samples is None:
            mass = pr.correct_mass(policy, problems, temperature)
            table[split] = {k: pr.pass_at_k_exact(mass, k) for k in ks}
        else:
            outcomes = [(n_samples, pr.mc_accuracy(policy, p, n_samples, seed, temperature)[1]) for p in problems]
            table[split] = {k: pr.pass_at_k(outcomes, k) for k in ks}
    deltas = {p.id: pr.delta_r(p, policy, reference, n_samples, seed, temperature) for p in suite.split(envs.TEST)}
    up, down = pr.partition_by_delta_r(deltas)
    return EvalReport(temperature, n_samples is None, table, deltas, up, down)


# checkpoint pairs


def load_run_checkpoints(run_dir):
    manifest = RunManifest.read(run_dir)
    return {s: storage.load_checkpoint(os.path.join(run_dir, manifest.checkpoints[str(s)]))[0] for s in manifest.checkpoint_steps()}


def pair_analysis(run_dir, n_pairs=12, k=64, seed=0, temperature=None):
    """Uniformly sampled checkpoint pairs (T < T') with interference on test
    correct pairs drawn from the earlier checkpoint and the change in Pass@k."""
    manifest = RunManifest.read(run_dir)
    config = cfg.ExperimentConfig.from_dict(manifest.config)
    suite = load_suite(os.path.join(run_dir, manifest.suite_file))
    ckpts = load_run_checkpoints(run_dir)
    steps = sorted(ckpts)
    all_pairs = [(a, b) for i, a in enumerate(steps) for b in steps[i + 1 :]]
    if not all_pairs:
        return []
    rng = np.random.default_rng([seed, PAIR_TAG])
    pick = rng.choice(len(all_pairs), size=min(n_pairs, len(all_pairs)), replace=False)
    temp = config.eval_temperature if temperature is None else temperature
    out = []
    for idx in sorted(pick):
        a, b = all_pairs[idx]
        out.append(pr.checkpoint_pair_stats(ckpts[a], ckpts[b], a, b, suite, ks=(k,), temperature=temp))
    return out


def resolve_policy(path):
    """A checkpoint file, or a run directory (its latest checkpoint)."""
    if os.path.isdir(path):
        manifest = RunManifest.read(path)
        steps = manifest.checkpoint_steps()
        if not steps:
            raise RunError(f"{path} has no checkpoints")
        return storage.load_checkpoint(os.path.join(path, manifest.checkpoints[str(steps[-1])]))[0]
    return storage.load_checkpoint(path)[0]
