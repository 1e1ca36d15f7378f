"""CSV tables and PNG charts from finished run directories.

Charts are rendered with the Agg backend and saved without a ``Software``
tag, so two identical runs give byte-identical files. A panel whose metrics
are missing is drawn as an explicit "no data" box instead of being dropped.
"""

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from rlvr_lab import probe as pr  # noqa: E402
from rlvr_lab import runner, storage  # noqa: E402

PNG_METADATA = {"Software": None}
DPI = 80


class ReportError(RuntimeError):
    pass


def _series(records, key):
    pts = [(r["step"], r[key]) for r in records if r.get(key) is not None]
    if not pts:
        return np.array([]), np.array([])
    s, v = zip(*pts)
    return np.asarray(s, dtype=float), np.asarray(v, dtype=float)


def _no_data(ax, title, notices):
    ax.set_title(title, fontsize=9)
    ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes, fontsize=11, color="0.4")
    ax.set_xticks([])
    ax.set_yticks([])
    notices.append(f"{title}: no data")


def _line_panel(ax, runs, keys, title, notices, window=1):
    drawn = False
    for name, records in runs:
        for key in keys:
            x, y = _series(records, key)
            if x.size == 0:
                continue
            ax.plot(x, pr.moving_average(y, window), lw=1.2, label=f"{name}:{key}" if len(runs) > 1 else key)
            drawn = True
    if not drawn:
        _no_data(ax, title, notices)
        return
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("step", fontsize=8)
    ax.tick_params(labelsize=7)
    ax.legend(fontsize=6, loc="best")


def _save(fig, path):
    fig.savefig(path, format="png", dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)


def _grid(panels, runs, path, notices, window, title):
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2), squeeze=False)
    for ax, (ptitle, keys) in zip(axes[0], panels):
        _line_panel(ax, runs, keys, ptitle, notices, window)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def combined_csv(runs):
    """One long table: run name, then the wide metric columns."""
    cols = sorted({k for _, recs in runs for r in recs for k in r} - {"step"})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "step"] + cols)
    for name, recs in runs:
        for r in recs:
            w.writerow([name, r["step"]] + ["" if r.get(c) is None else storage._fmt(r[c]) for c in cols])
    return buf.getvalue()


def pairs_csv(pairs, k):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "step_a", "step_b", "delta_plus", "magnitude", f"delta_pass_at_{k}"])
    for name, st in pairs:
        w.writerow([name, st.step_a, st.step_b, repr(st.delta_plus), repr(st.magnitude), repr(st.delta_pass[k])])
    return buf.getvalue()


def scatter(ax, pairs, k, notices):
    title = f"interference vs change in Pass@{k}"
    if len(pairs) < 2:
        _no_data(ax, title, notices)
        return None
    x = [st.delta_plus for _, st in pairs]
    y = [st.delta_pass[k] for _, st in pairs]
    r = pr.pearson(x, y)
    ax.scatter(x, y, s=14)
    ax.set_title(f"{title} (r = {r:.3f})", fontsize=9)
    ax.set_xlabel("delta_plus", fontsize=8)
    ax.set_ylabel(f"delta Pass@{k}", fontsize=8)
    ax.tick_params(labelsize=7)
    return r


def cmd_report(run_dirs, out_dir, window=1, n_pairs=12, k=64, seed=0):
    """Write ``metrics.csv``, ``pairs.csv``, ``summary.txt`` and six PNG charts.

    ``window`` smooths the plotted curves only; the CSV keeps raw values.
    Returns the list of per-panel notices (panels drawn without data)."""
    if not run_dirs:
        raise ReportError("need at least one run directory")
    os.makedirs(out_dir, exist_ok=True)
    runs, pairs, notices = [], [], []
    for d in run_dirs:
        path = os.path.join(d, "metrics.jsonl")
        if not os.path.exists(os.path.join(d, "manifest.json")):
            raise ReportError(f"{d} is not a run directory (no manifest.json)")
        name = os.path.basename(os.path.normpath(d))
        runs.append((name, storage.read_metrics(path)))
        if n_pairs > 0 and os.path.exists(path):
            pairs += [(name, st) for st in runner.pair_analysis(d, n_pairs=n_pairs, k=k, seed=seed)]

    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(combined_csv(runs))
    with open(os.path.join(out_dir, "pairs.csv"), "w") as fh:
        fh.write(pairs_csv(pairs, k))

    pass_keys = sorted(
        {key for _, recs in runs for rec in recs for key in rec if key.startswith("pass_at_")},
        key=lambda s: (s.rsplit("_", 1)[1], int(s.split("_")[2])),
    )
    _grid([("Pass@k", pass_keys)], runs, os.path.join(out_dir, "pass_at_k.png"), notices, window, "Pass@k")
    _grid(
        [
            ("mean reward", ["mean_reward"]),
            ("influence magnitude", ["influence_magnitude"]),
            ("interference", ["delta_plus"]),
            ("probe log-likelihood change", ["delta_plus_cum"]),
        ],
        runs,
        os.path.join(out_dir, "dynamics.png"),
        notices,
        window,
        "training dynamics",
    )
    _grid(
        [
            ("base on policy samples", ["ppl_base_on_policy"]),
            ("policy on probe", ["ppl_policy_on_probe", "ppl_policy_on_probe_correct", "ppl_policy_on_probe_incorrect"]),
            ("improved vs reduced problems", ["ppl_up", "ppl_down"]),
        ],
        runs,
        os.path.join(out_dir, "perplexity.png"),
        notices,
        window,
        "perplexity",
    )
    _grid(
        [("probe clip violation", ["probe_clip_violation"]), ("train clip fraction", ["train_clip_fraction"]), ("entropy", ["entropy"])],
        runs,
        os.path.join(out_dir, "violations.png"),
        notices,
        window,
        "trust region and diversity",
    )
    _grid(
        [("sampled strategy frequency", ["strategy_A", "strategy_B"]), ("strategy mass", ["strategy_mass_A", "strategy_mass_B"])],
        runs,
        os.path.join(out_dir, "strategy.png"),
        notices,
        window,
        "strategies",
    )
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    r = scatter(ax, pairs, k, notices)
    fig.tight_layout()
    _save(fig, os.path.join(out_dir, "interference_scatter.png"))

    lines = [f"runs: {', '.join(n for n, _ in runs)}", f"smoothing window: {window}", f"checkpoint pairs: {len(pairs)}"]
    lines.append(f"pearson r (delta_plus vs delta Pass@{k}): {r:.6f}" if r is not None else "pearson r: n/a")
    lines += [f"notice: {n}" for n in notices]
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return notices
