"""Command-line entry point: generate, train, predict, evaluate, oracle-check.

Exit codes: 0 success, 1 validation or runtime failure (one JSON error line on
stderr), 2 bad flags (argparse usage text).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cohort import CohortError, generate_cohort, load_cohort_csv, split_cohort, write_cohort_csv, write_roi_names
from .config import CONFIG_ENV, PRESETS, ConfigError, echo_config, load_config
from .denoiser import ConditionError
from .diffusion import DiffusionConfig, SamplingError, TrainingError, write_loss_log
from .evaluation import EvaluationError, PredictionSet, write_report
from .workflow import MODEL_CHOICES, predict_cohort, train_model


class CliError(Exception):
    pass


def _months(text: str) -> list[int]:
    try:
        months = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"months must be comma-separated integers, got {text!r}") from None
    if not months:
        raise argparse.ArgumentTypeError("at least one month is required")
    return months


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"run config JSON (default: ${CONFIG_ENV}, else built-in defaults)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cthdiff", description="Conditional diffusion model for cortical-thickness trajectories.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort CSV")
    _add_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on the training split of a cohort")
    _add_config(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--model", choices=MODEL_CHOICES, default="diffusion")
    p.add_argument("--out", required=True)
    p.add_argument("--all-subjects", action="store_true",
                   help="train on every subject instead of the training split")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("predict", help="predict follow-up thickness for test subjects")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--months", type=_months, default=[6, 12, 24, 36])
    p.add_argument("--realizations", type=int)
    p.add_argument("--steps", type=int, help="Heun steps (default: from config, else the NFE budget)")
    p.add_argument("--workers", type=int, help="parallel sampling threads; output is identical for any value")
    p.add_argument("--all-subjects", action="store_true",
                   help="predict for every subject instead of the test split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score predictions against a cohort")
    _add_config(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle-check", help="verify the sampler against closed-form Gaussian answers")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    return ap


def _split(cohort, cfg, use_all: bool, which: int):
    return cohort if use_all else split_cohort(cohort, cfg.cohort_spec())[which]


def cmd_generate(args, cfg) -> None:
    cohort = generate_cohort(cfg.cohort_spec())
    write_cohort_csv(cohort, args.out)
    write_roi_names(Path(args.out).with_name("roi_names.json"))
    echo_config(cfg, args.out)


def cmd_train(args, cfg) -> None:
    cohort = _split(load_cohort_csv(args.cohort), cfg, args.all_subjects, 0)

    def progress(epoch, rec):
        if not args.quiet:
            print(f"epoch {epoch + 1}/{cfg.training.epochs} loss {rec.loss:.4f}", file=sys.stderr)

    ckpt, log = train_model(args.model, cohort, cfg, progress)
    save_checkpoint(ckpt, args.out)
    write_loss_log(log, str(args.out) + ".loss.csv")
    echo_config(cfg, args.out)


def cmd_predict(args, cfg) -> None:
    if any(m <= 0 for m in args.months):
        raise CliError("months must be > 0")
    if args.realizations is not None and args.realizations < 1:
        raise CliError("realizations must be >= 1")
    if args.workers is not None and args.workers < 1:
        raise CliError("workers must be >= 1")
    if args.steps is not None:
        if args.steps < 1:
            raise CliError("steps must be >= 1")
        cfg.sampling.steps = args.steps
    ckpt = load_checkpoint(args.ckpt)
    cohort = _split(load_cohort_csv(args.cohort), cfg, args.all_subjects, 1)
    preds = predict_cohort(ckpt, cohort, args.months, cfg, args.realizations, args.workers)
    preds.write_csv(args.out)
    echo_config(cfg, args.out)


def cmd_evaluate(args, cfg) -> None:
    preds = PredictionSet.read_csv(args.pred)
    truth = load_cohort_csv(args.truth)
    write_report(preds, truth, args.out, cfg.sampling.point_estimate)
    echo_config(cfg, args.out)


def oracle_checks(steps: int = 50, samples: int = 10000, seed: int = 0) -> list[tuple[str, float, float, bool]]:
    """(name, value, threshold, passed) rows for the closed-form sampler checks."""
    from .oracle import GaussianPrior, analytic_denoiser, analytic_score, ks_statistic, normal_cdf, oracle_sample
    from .oracle import point_mass_exact
    from .diffusion import sample_ode
    from .rng import substream

    cfg = DiffusionConfig()
    rows = []
    x = oracle_sample(GaussianPrior.standard(), steps, samples, seed, cfg)
    ks = max(ks_statistic(x[:, d], normal_cdf()) for d in range(x.shape[1]))
    rows.append(("ks_max_vs_prior", ks, 0.02, ks < 0.02))

    m = np.linspace(-1.0, 1.0, 68)
    pm = oracle_sample(GaussianPrior.point_mass(m), steps, 64, seed, cfg)
    err = float(np.abs(pm - m).max())
    rows.append(("point_mass_endpoint_error", err, 1e-3, err < 1e-3))

    prior = GaussianPrior(np.zeros(68), np.full(68, 0.1))
    z = substream(seed, "order").standard_normal((64, 68))
    exact = point_mass_exact(0.0, 0.1, cfg.sigma_max * z, cfg.sigma_max)
    errs = [float(np.abs(sample_ode(lambda v, s: analytic_denoiser(prior, v, s), z, cfg, n) - exact).max())
            for n in (32, 64, 128)]
    ratio = float(np.median([errs[0] / errs[1], errs[1] / errs[2]]))
    rows.append(("heun_order_ratio", ratio, 4.0, 3.0 <= ratio <= 5.0))

    probe = substream(seed, "probe").standard_normal((1000, 68))
    sig = np.exp(substream(seed, "probe-sigma").uniform(np.log(0.01), np.log(10.0), 1000))[:, None]
    prior = GaussianPrior(np.full(68, 0.3), np.full(68, 0.7))
    d = analytic_denoiser(prior, probe, sig)
    back = analytic_score(prior, probe, sig) * sig ** 2 + probe
    rel = float(np.max(np.abs(back - d) / np.maximum(np.abs(d), np.abs(probe))))
    rows.append(("score_denoiser_identity", rel, 1e-12, rel < 1e-12))
    return rows


def cmd_oracle_check(args) -> int:
    if args.steps < 2 or args.samples < 2:
        raise CliError("steps and samples must be >= 2")
    rows = oracle_checks(args.steps, args.samples, args.seed)
    print(f"{'check':<28} {'value':>12} {'limit':>10}  result")
    for name, value, limit, ok in rows:
        print(f"{name:<28} {value:>12.4g} {limit:>10.4g}  {'PASS' if ok else 'FAIL'}")
    return 0 if all(r[3] for r in rows) else 1


_EXPECTED = (CliError, ConfigError, CohortError, CheckpointError, ConditionError, EvaluationError,
             TrainingError, SamplingError, ValueError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "oracle-check":
            return cmd_oracle_check(args)
        cfg = load_config(args.config, args.preset)
        {"generate": cmd_generate, "train": cmd_train, "predict": cmd_predict,
         "evaluate": cmd_evaluate}[args.command](args, cfg)
    except _EXPECTED as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
