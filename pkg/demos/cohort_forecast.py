"""Train on a synthetic cohort, forecast the test subjects, report the metrics.

Uses the ``desk`` preset. The default of 16 epochs finishes in about a
minute; 512 gives the full benchmark.

    python demos/cohort_forecast.py --epochs 16
"""
import argparse
import time

import numpy as np

from cthdiff.cohort import PARAHIPPOCAMPAL, ROI_NAMES, generate_cohort, split_cohort
from cthdiff.config import load_config
from cthdiff.evaluation import metrics_report, uncertainty_summary
from cthdiff.workflow import predict_cohort, train_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=16)
    ap.add_argument("--realizations", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(preset="desk")
    cfg.seed, cfg.training.epochs = args.seed, args.epochs
    spec = cfg.cohort_spec()
    train, test = split_cohort(generate_cohort(spec), spec)
    print(f"cohort: {len(train)} training and {len(test)} test subjects")

    t0 = time.perf_counter()
    ckpt, log = train_model("diffusion", train, cfg)
    print(f"trained {len(log)} steps in {time.perf_counter() - t0:.0f}s, final loss {log[-1].loss:.3f}")

    t0 = time.perf_counter()
    preds = predict_cohort(ckpt, test, [6, 12, 24, 36], cfg, realizations=args.realizations)
    print(f"sampled {len(preds) * preds.k} trajectories in {time.perf_counter() - t0:.0f}s")

    rep = metrics_report(preds, test)
    print("\nMAE (mm), model vs carry-forward")
    for scope in ("m6", "m12", "m24", "m36"):
        row = rep["mae_table"][scope]
        cf = rep["carry_forward_mae"][scope]
        cells = "  ".join(f"{g} {row[g]['mean']:.3f}/{cf[g]['mean']:.3f}" for g in row)
        print(f"  {scope:>4}: {cells}")
    ba = rep["bland_altman"]["m36"]["All"]
    fit = rep["linear_fit"]["all_months"]["All"]
    print(f"\nBland-Altman m36: MD {ba['md']:+.4f}, limits [{ba['lower']:+.3f}, {ba['upper']:+.3f}]")
    print(f"linear fit, all points: slope {fit['slope']:.3f}, intercept {fit['intercept']:.3f}, R^2 {fit['r_squared']:.3f}")

    print("\nmean 36-month thinning (mm), predicted vs true")
    for g in ("CN", "MCI", "AD"):
        subs = [s for s in test if s.dx_by_visit[36] == g]
        pred = np.mean([np.mean(s.visits[0] - preds.point((s.id, 36))) for s in subs])
        true = np.mean([np.mean(s.visits[0] - s.visits[36]) for s in subs])
        print(f"  {g:>3} (n={len(subs)}): {pred:.4f} vs {true:.4f}")

    converter = next(s for s in test if s.dx_by_visit[0] == "MCI" and s.dx_by_visit[36] == "AD")
    roi = PARAHIPPOCAMPAL[0]
    summ = uncertainty_summary(preds)
    print(f"\n{converter.id} (MCI -> AD), {ROI_NAMES[roi]}: truth, predicted mean [95% interval]")
    print(f"  m0   {converter.visits[0][roi]:.3f}")
    for m in (6, 12, 24, 36):
        u = summ[(converter.id, m)]
        print(f"  m{m:<3d} {converter.visits[m][roi]:.3f}   {u.mean[roi]:.3f} [{u.lo95[roi]:.3f}, {u.hi95[roi]:.3f}]")


if __name__ == "__main__":
    main()
