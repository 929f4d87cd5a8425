"""Bound-check driver, fusion tables and run summaries."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .fusion import fuse
from .rng import substream
from .sensing import micro_metrics

FUSION_COLUMNS = ["regime", "source", "snr_db", "n", "precision", "recall", "f1"]


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------
def fusion_table(preds, labels, snr_db, n: int, snr_levels, regime: str = "") -> list[dict]:
    """Per-SNR metrics of each UAV and of the fused decision.

    ``preds`` is ``(records, K, M)`` with records aligned across UAVs.
    """
    preds = np.asarray(preds)
    fused = fuse(preds, n)
    rows = []
    for snr in snr_levels:
        sel = np.asarray(snr_db) == snr
        for k in range(preds.shape[1]):
            r = micro_metrics(preds[sel, k], labels[sel])
            rows.append({"regime": regime, "source": f"uav{k + 1}", "snr_db": float(snr), "n": n,
                         "precision": r.precision, "recall": r.recall, "f1": r.f1})
        r = micro_metrics(fused[sel], labels[sel])
        rows.append({"regime": regime, "source": "fused", "snr_db": float(snr), "n": n,
                     "precision": r.precision, "recall": r.recall, "f1": r.f1})
    return rows


def fusion_gain(rows) -> dict:
    """Fused F1 minus the worst individual F1, per SNR."""
    out = {}
    for snr in sorted({r["snr_db"] for r in rows}):
        at = [r for r in rows if r["snr_db"] == snr]
        worst = min(r["f1"] for r in at if r["source"] != "fused")
        fused = next(r["f1"] for r in at if r["source"] == "fused")
        out[snr] = fused - worst
    return out


def write_fusion_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FUSION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in FUSION_COLUMNS})


# ---------------------------------------------------------------------------
# convergence checks
# ---------------------------------------------------------------------------
def bound_problem(seed: int = 0, K: int = 3, d: int = 4, powers=(1.0, 0.3, 0.05), rho=(0.5, 1.0, 2.0)):
    """Federated quadratic used by the bound checks, with power-weighted aggregation."""
    from .convergence import QuadraticFederatedProblem, pw_problem_weights

    prob = QuadraticFederatedProblem.random(K, d, substream(seed, "bounds", "problem"), cond=5.0, rho=np.array(rho))
    return prob, pw_problem_weights(np.asarray(powers))


def run_bound_checks(out: Path | None = None, seed: int = 0, T: int = 100_000, replicates: int = 1000,
                     lemma3_steps: int = 10_000) -> dict:
    """Run the Lemma 2, Lemma 3 and Theorem 1 checks; optionally write traces under ``out``."""
    from .convergence import (QuadraticFederatedProblem, run_expected, run_full_batch, run_stochastic,
                              verify_lemma2, verify_lemma3, verify_theorem1)

    prob, weights = bound_problem(seed)
    w0 = 5.0 * substream(seed, "bounds", "w0").standard_normal(prob.d)
    clean = QuadraticFederatedProblem(prob.A, prob.c)
    verdicts = {}

    full, est_full = run_full_batch(clean, weights, lemma3_steps, w0)
    l3 = verify_lemma3(full, est_full)
    verdicts["lemma3_full"] = {"passed": l3.pass_rate == 1.0, "pass_rate": l3.pass_rate,
                               "detail": f"{int(l3.passed.sum())}/{len(l3.passed)} steps"}

    noisy, est_noisy = run_stochastic(prob, weights, lemma3_steps, w0, substream(seed, "bounds", "sgd"))
    l3n = verify_lemma3(noisy, est_noisy, prob, replicates, substream(seed, "bounds", "lemma3"))
    verdicts["lemma3_noisy"] = {"passed": l3n.pass_rate >= 0.99, "pass_rate": l3n.pass_rate,
                                "detail": f"{int(l3n.passed.sum())}/{len(l3n.passed)} steps within 3 SE"}

    rounds = np.unique(np.round(np.geomspace(1, lemma3_steps, 20)).astype(int))
    l2 = verify_lemma2(prob, weights, noisy.omegas, replicates, substream(seed, "bounds", "lemma2"), rounds)
    verdicts["lemma2"] = {"passed": l2.all_passed, "pass_rate": float(np.mean(l2.passed)),
                          "detail": f"max empirical {l2.empirical.max():.4g} vs bound {l2.bound:.4g}"}

    long_run, est_long = run_full_batch(clean, weights, T, w0)
    th = verify_theorem1(long_run, est_long)
    expected, _ = run_expected(prob, weights, T, w0)
    th_noisy = verify_theorem1(expected, est_noisy)
    slope_ok = -1.2 <= th_noisy.slope <= -0.8
    verdicts["theorem1"] = {"passed": th.envelope_ok and th_noisy.envelope_ok and slope_ok,
                            "violations": th.violations + th_noisy.violations, "slope": th_noisy.slope,
                            "full_batch_slope": th.slope,
                            "detail": (f"envelope violations {th.violations + th_noisy.violations}, "
                                       f"max gap/envelope {max(th.max_ratio, th_noisy.max_ratio):.3g}, "
                                       f"noisy slope {th_noisy.slope:.3f}")}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        full.write_csv(out / "trace_full_batch.csv")
        noisy.write_csv(out / "trace_stochastic.csv")
        _thin(long_run).write_csv(out / "trace_theorem_full_batch.csv")
        _thin(expected).write_csv(out / "trace_theorem_expected.csv")
    return verdicts


def _thin(trace, points: int = 400):
    """Log-spaced subsample of a long trace for CSV output."""
    from dataclasses import replace

    idx = np.unique(np.concatenate([[0], np.round(np.geomspace(1, len(trace.t) - 1, points)).astype(int)]))
    return replace(trace, t=trace.t[idx], gamma=trace.gamma[idx], delta=trace.delta[idx], gap=trace.gap[idx],
                   Gt=trace.Gt[idx], rhs_lemma3=trace.rhs_lemma3[idx], envelope=trace.envelope[idx], omegas=None)


# ---------------------------------------------------------------------------
# run summary
# ---------------------------------------------------------------------------
def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_report(run_dir: Path) -> dict:
    """Collect metrics, fusion, RL and bound artifacts found anywhere under ``run_dir``."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"{run_dir} is not a directory")
    metrics = sorted(run_dir.rglob("metrics_*.csv"))
    fusion = sorted(run_dir.rglob("fusion_*.csv"))
    fusion = [p for p in fusion if not p.name.startswith("fusion_trace")]
    episodes = sorted(run_dir.rglob("episodes_*.csv"))
    bounds = sorted(run_dir.rglob("bounds.json"))
    if not (metrics or fusion or episodes or bounds):
        raise FileNotFoundError(f"no artifacts under {run_dir}")
    import json

    summary = {"sensing": [], "fusion_gain": {}, "rl": {}, "bounds": {}, "lines": []}
    lines = summary["lines"]
    for p in metrics:
        for r in _read_csv(p):
            row = {"regime": r["regime"], "uav": int(r["uav"]), "snr_db": float(r["snr_db"]), "f1": float(r["f1"]),
                   "precision": float(r["precision"]), "recall": float(r["recall"])}
            summary["sensing"].append(row)
            lines.append(f"sensing {row['regime']:12s} uav{row['uav']} {row['snr_db']:6.1f} dB  F1 {row['f1']:.4f}")
    for p in fusion:
        rows = [{**r, "snr_db": float(r["snr_db"]), "f1": float(r["f1"])} for r in _read_csv(p)]
        gains = fusion_gain(rows)
        summary["fusion_gain"][p.stem] = gains
        for snr, g in gains.items():
            lines.append(f"fusion  {p.stem:20s} {snr:6.1f} dB  fused - worst = {g:+.4f}")
    for p in episodes:
        rows = _read_csv(p)
        eps = np.array([int(r["episode"]) for r in rows])
        util = np.array([float(r["utility"]) for r in rows])
        per_ep = np.bincount(eps, weights=util) / np.maximum(np.bincount(eps), 1)
        curve = [float(per_ep[i:i + 100].mean()) for i in range(0, len(per_ep), 100)]
        summary["rl"][p.stem] = {"final_mean_utility": float(per_ep[-min(500, len(per_ep)):].mean()),
                                 "curve_per_100_episodes": curve}
        lines.append(f"rl      {p.stem:20s} final mean utility {summary['rl'][p.stem]['final_mean_utility']:.4g}")
    for p in bounds:
        v = json.loads(p.read_text())
        summary["bounds"] = v
        for name, r in v.items():
            lines.append(f"bounds  {name:12s} {'PASS' if r['passed'] else 'FAIL'}  {r['detail']}")
    return summary
