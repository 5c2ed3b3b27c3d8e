"""Diffusion model against the two deterministic U-net regressors.

All three train on the same pairs with the same optimizer settings; only the
objective (and, for ``unet_plain``, the attention block) differs. Prints an
MAE table by diagnosis group at each follow-up visit.

    python demos/ablation.py --epochs 16
"""
import argparse

from cthdiff.cohort import generate_cohort, split_cohort
from cthdiff.config import load_config
from cthdiff.evaluation import metrics_report
from cthdiff.workflow import MODEL_CHOICES, predict_cohort, train_model, training_data


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=16)
    args = ap.parse_args()

    cfg = load_config(preset="desk")
    cfg.training.epochs = args.epochs
    spec = cfg.cohort_spec()
    train, test = split_cohort(generate_cohort(spec), spec)
    data = training_data(train, cfg.pair_policy)

    reports = {}
    for kind in MODEL_CHOICES:
        ckpt, log = train_model(kind, train, cfg, data=data)
        reports[kind] = metrics_report(predict_cohort(ckpt, test, [6, 12, 24, 36], cfg), test)
        print(f"{kind:<10} trained, final loss {log[-1].loss:.4f}")
    reports["carry_fwd"] = {"mae_table": reports["diffusion"]["carry_forward_mae"]}

    groups = ("All", "CN", "MCI", "AD")
    for scope in ("m6", "m12", "m24", "m36", "all_months"):
        print(f"\nMAE {scope} (mean +- sd over subjects)")
        print(f"  {'model':<10} " + " ".join(f"{g:>15}" for g in groups))
        for kind, rep in reports.items():
            row = rep["mae_table"][scope]
            cells = [f"{row[g]['mean']:.3f}+-{row[g]['sd']:.3f}" if g in row else "-" for g in groups]
            print(f"  {kind:<10} " + " ".join(f"{c:>15}" for c in cells))


if __name__ == "__main__":
    main()
