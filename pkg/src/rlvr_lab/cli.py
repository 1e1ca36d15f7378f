"""``rlvr-lab`` command line.

Exit codes: 0 success, 1 error, 2 a bandit-verify invariant failed.
"""

import argparse
import csv
import json
import os
import sys

from rlvr_lab import bandit, envs, kernels, report, runner, storage
from rlvr_lab import config as cfg

EXIT_OK, EXIT_ERROR, EXIT_INVARIANT = 0, 1, 2


def _parse_set(items):
    """``key=value`` pairs; values are JSON when they parse, strings otherwise.
    ``suite.key`` addresses suite fields."""
    top, suite = {}, {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise cfg.ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        if key.startswith("suite."):
            suite[key[6:]] = value
        else:
            top[key] = value
    if suite:
        top["suite"] = suite
    return top


def build_config(args):
    if args.config:
        config = cfg.load(args.config)
    else:
        config = cfg.PRESETS[args.preset]()
    changes = _parse_set(args.set)
    for name in ("seed", "objective", "steps", "output_dir"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    return config.replace(**changes) if changes else config


def _config_args(p):
    p.add_argument("--preset", choices=sorted(cfg.PRESETS), default="desk")
    p.add_argument("--config", help="JSON config file (overrides --preset)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field; repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir", help=f"output root (default ${cfg.OUTPUT_ROOT_ENV} or ./runs)")


def cmd_pretrain(args):
    config = build_config(args)
    out, rep = runner.cmd_pretrain(config, args.out)
    print(f"base model written to {out}")
    print(f"high greedy-solved {rep.high_greedy_solved:.3f}  low greedy-solved {rep.low_greedy_solved:.3f}  margin {rep.margin:.3f} nats")
    return EXIT_OK


def cmd_train(args):
    if args.resume:
        if not args.run_dir:
            raise runner.RunError("--resume needs --run-dir")
        manifest = runner.RunManifest.read(args.run_dir)
        config = cfg.ExperimentConfig.from_dict(manifest.config)
    else:
        config = build_config(args)

    def progress(step, rec):
        if args.verbose:
            print(f"step {step:4d}  reward {rec.get('mean_reward')}  delta_plus {rec.get('delta_plus')}")

    run_dir = runner.cmd_train(config, base_dir=args.base, run_dir=args.run_dir, resume=args.resume, progress=progress)
    print(f"run complete: {run_dir}  (kernels: {kernels.backend()})")
    return EXIT_OK


def cmd_eval(args):
    policy = runner.resolve_policy(args.checkpoint)
    suite_path = args.suite or _suite_next_to(args.checkpoint)
    suite = runner.load_suite(suite_path)
    reference = runner.resolve_policy(args.reference) if args.reference else None
    ks = [int(k) for k in args.k.split(",")]
    n = args.n_samples or None
    rep = runner.cmd_eval(policy, suite, ks, n, reference, args.temperature, args.seed)
    for split, table in rep.pass_at_k.items():
        print(split + "  " + "  ".join(f"pass@{k}={v:.4f}" for k, v in table.items()))
    print(f"improved (D_up): {len(rep.d_up)}  reduced (D_down): {len(rep.d_down)}")
    if args.json:
        storage.write_json(args.json, rep.to_dict())
    return EXIT_OK


def _suite_next_to(path):
    here = path if os.path.isdir(path) else os.path.dirname(path)
    for cand in (os.path.join(here, "suite.json"), os.path.join(here, os.pardir, "suite.json")):
        if os.path.exists(cand):
            return cand
    raise runner.RunError(f"no suite.json next to {path}; pass --suite")


def cmd_bandit_verify(args):
    checks = bandit.verify_all(n_instances=args.instances, seed=args.seed, tol=args.tol)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}")
    if args.csv:
        rows = []
        for scen in bandit.SCENARIOS:
            for obj in bandit.OBJECTIVES:
                rows += bandit.run_toy_experiment(scen, args.steps, objective=obj).to_rows()
        cols = sorted({k for r in rows for k in r} - {"scenario", "objective", "step"})
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "objective", "step"] + cols)
            for r in rows:
                w.writerow([r["scenario"], r["objective"], r["step"]] + [repr(r[c]) if c in r else "" for c in cols])
    return EXIT_OK if all(c.passed for c in checks) else EXIT_INVARIANT


def cmd_report(args):
    notices = report.cmd_report(args.runs, args.out, window=args.window, n_pairs=args.pairs, k=args.k, seed=args.seed)
    for n in notices:
        print(f"notice: {n}")
    print(f"report written to {args.out}")
    return EXIT_OK


def make_parser():
    ap = argparse.ArgumentParser(prog="rlvr-lab", description="Learning-dynamics lab for RL with verifiable rewards.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="build the problem suite and the pretrained base model")
    _config_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run GRPO, SELF or REINFORCE from a base model")
    _config_args(p)
    p.add_argument("--objective", choices=cfg.OBJECTIVES)
    p.add_argument("--steps", type=int)
    p.add_argument("--base", help="directory written by pretrain (default: pretrain in place)")
    p.add_argument("--run-dir", help="run directory (default: <output root>/<objective>-seed<seed>)")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --run-dir")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Pass@k table and per-problem accuracy change")
    p.add_argument("checkpoint", help="checkpoint file or run directory")
    p.add_argument("--suite", help="suite.json (default: found next to the checkpoint)")
    p.add_argument("--reference", help="reference checkpoint for the accuracy change (default: the policy itself)")
    p.add_argument("--k", default="1,8,64", help="comma-separated k list")
    p.add_argument("--n-samples", type=int, default=0, help="samples per problem; 0 means exact")
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bandit-verify", help="closed-form ratio and toy-bandit checks")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--steps", type=int, default=10, help="toy trajectory length for --csv")
    p.add_argument("--csv", help="write the toy trajectories as CSV")
    p.set_defaults(func=cmd_bandit_verify)

    p = sub.add_parser("report", help="CSV tables and charts from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=1, help="moving-average window for plotted curves")
    p.add_argument("--pairs", type=int, default=12, help="checkpoint pairs per run for the scatter (0 skips)")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (cfg.ConfigError, envs.ConfigError, envs.ConstructionError, runner.RunError, storage.CheckpointError,
            bandit.BanditError, report.ReportError, OSError, ValueError) as exc:
        print(f"rlvr-lab: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
