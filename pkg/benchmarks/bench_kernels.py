"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 512]

Prints one row per kernel with the best-of-N wall time for each backend
and the speedup. Workloads mirror one desk-default training step.
"""

import argparse
import time

import numpy as np

from rlvr_lab import envs, kernels


def workload(batch, seed=0):
    suite = envs.make_suite(envs.SuiteConfig(), seed)
    policy = suite.new_policy()
    rng = np.random.default_rng(seed)
    policy.params[:] = 0.3 * rng.standard_normal(policy.params.shape)
    ids = rng.integers(0, len(suite), batch)
    feats = suite.features(ids)
    uniforms = rng.random((batch, policy.max_len))
    tokens, lengths, _ = kernels.sample(policy.params, feats, uniforms, 1.0, policy.offsets, policy.base, policy.terminator)
    weights = rng.standard_normal(tokens.shape)
    return policy, feats, uniforms, tokens, lengths, weights


def cases(policy, feats, uniforms, tokens, lengths, weights):
    p = policy
    return {
        "sample": lambda: kernels.sample(p.params, feats, uniforms, 1.0, p.offsets, p.base, p.terminator),
        "greedy": lambda: kernels.greedy(p.params, feats, p.max_len, p.offsets, p.base, p.terminator),
        "token_logprobs": lambda: kernels.token_logprobs(p.params, feats, tokens, lengths, p.offsets, p.base),
        "accumulate_grad": lambda: kernels.accumulate_grad(p.params, feats, tokens, lengths, weights, p.offsets, p.base),
    }


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=512)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")
    data = workload(args.batch)
    print(f"batch={args.batch} repeat={args.repeat}")
    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for name in cases(*data):
        times = {}
        for b in backends:
            with kernels.using(b):
                times[b] = best_time(cases(*data)[name], args.repeat)
        row = f"{name:<18}" + "".join(f"{1e3 * times[b]:>14.3f}" for b in backends)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
