"""Command-line interface.

Commands cover the full workflow: train a model, run the multi-round
pruning pipeline, search for an early ticket, measure estimator
reliability and filter dependence, compare compression between two saved
models, and self-check gradients. Every run command writes a manifest next
to its outputs. Configuration problems exit with status 2, runtime
failures with 1.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import engine as en
from .config import Config, ConfigError, default_config_text, load_config, write_manifest
from .engine import Tensor, finite_difference_check
from .experiments import (
    gram_experiment,
    partial_correlation_stats,
    reliability_experiment,
)
from .models import load_model, save_model
from .ortho import gram_penalty
from .pruning import compression_report
from .training import early_bird_search, prune_pipeline, train

__all__ = ["main"]


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> tuple[Config, str]:
    cfg = load_config(args.config, args.set)
    return cfg, cfg.to_ini()


def _load_or_build(args, cfg: Config):
    if getattr(args, "model", None):
        model, _, _ = load_model(args.model)
        return model
    return cfg.build_model()


def cmd_init_config(args) -> int:
    path = Path(args.out)
    path.write_text(default_config_text(), encoding="utf-8")
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg, text = _config(args)
    out = _outdir(args)
    model = cfg.build_model()
    dataset = cfg.build_dataset()
    result = train(
        model,
        dataset,
        cfg.train_config(),
        checkpoint_path=out / "checkpoint.bin",
        resume=args.resume,
        diagnostics_path=out / "training.csv",
    )
    save_model(out / "model.bin", model, meta={"kind": "trained"})
    write_manifest(
        out / "manifest.json",
        text,
        "train",
        {
            "model": "model.bin",
            "checkpoint": "checkpoint.bin",
            "diagnostics": "training.csv",
        },
    )
    final = result.final
    if final is not None:
        print(
            f"trained {cfg.get('model', 'family')} for {len(result.history)} epochs: "
            f"val_loss={final.val_loss:.4f} val_acc={final.val_acc:.4f}"
        )
    return 0


def cmd_prune(args) -> int:
    cfg, text = _config(args)
    out = _outdir(args)
    model = cfg.build_model()
    dataset = cfg.build_dataset()
    result = prune_pipeline(
        model,
        dataset,
        target=cfg.get("prune", "target"),
        rounds=cfg.get("prune", "rounds"),
        metric=cfg.get("prune", "metric"),
        train_config=cfg.train_config(),
        retrain_config=cfg.retrain_config(),
        input_extents=cfg.input_extents(),
    )
    save_model(out / "pruned.bin", result.model, meta={"kind": "pruned"})
    report = {
        "compression": result.compression.to_dict(),
        "requested_survival": result.requested_survival,
        "achieved_survival": result.achieved_survival,
        "rounds": [
            {
                "round": r.round,
                "ratio": r.ratio,
                "victims": r.victims,
                "units_before": r.units_before,
                "units_after": r.units_after,
                "retrain_ortho": r.retrain_ortho,
                "val_acc": r.val_acc,
            }
            for r in result.rounds
        ],
    }
    _write_json(out / "report.json", report)
    write_manifest(
        out / "manifest.json", text, "prune", {"model": "pruned.bin", "report": "report.json"}
    )
    c = result.compression
    print(
        f"pruned to {len(result.rounds)} rounds: compression={c.compression_ratio:.2f}x "
        f"flops_reduction={c.flops_reduction:.3f} efficiency={c.efficiency:.2f}"
    )
    return 0


def cmd_ebt(args) -> int:
    cfg, text = _config(args)
    out = _outdir(args)
    model = cfg.build_model()
    dataset = cfg.build_dataset()
    result = early_bird_search(
        model,
        dataset,
        cfg.train_config(),
        fraction=cfg.get("prune", "target"),
        metric=cfg.get("prune", "metric"),
        threshold=args.threshold,
        patience=args.patience,
    )
    save_model(out / "ticket.bin", model, meta={"kind": "ticket", "epoch": result.found_epoch})
    _write_json(out / "plan.json", result.plan.to_dict())
    _write_json(
        out / "report.json",
        {
            "found_epoch": result.found_epoch,
            "converged": result.converged,
            "overlaps": result.overlaps,
            "epochs_trained": len(result.history),
        },
    )
    write_manifest(
        out / "manifest.json",
        text,
        "ebt",
        {"ticket": "ticket.bin", "plan": "plan.json", "report": "report.json"},
    )
    print(
        f"ticket found at epoch {result.found_epoch} "
        f"(converged={result.converged}, overlaps={['%.3f' % o for o in result.overlaps]})"
    )
    return 0


def cmd_exp_reliability(args) -> int:
    cfg, text = _config(args)
    out = _outdir(args)
    model = _load_or_build(args, cfg)
    dataset = cfg.build_dataset()
    result = reliability_experiment(
        model,
        dataset.val_images,
        dataset.val_labels,
        group_size=args.group_size,
        n_groups=args.groups,
        seed=args.seed,
    )
    payload = result.to_dict()
    payload["estimates"] = result.estimates.tolist()
    payload["truths"] = result.truths.tolist()
    _write_json(out / "reliability.json", payload)
    write_manifest(out / "manifest.json", text, "exp-reliability", {"result": "reliability.json"})
    print(f"reliability r={result.r:.4f} over {args.groups} groups of {args.group_size}")
    return 0


def cmd_exp_parcorr(args) -> int:
    cfg, text = _config(args)
    out = _outdir(args)
    model = _load_or_build(args, cfg)
    dataset = cfg.build_dataset()
    stats = partial_correlation_stats(model, dataset.val_images, ridge=args.ridge)
    _write_json(out / "parcorr.json", stats)
    write_manifest(out / "manifest.json", text, "exp-parcorr", {"result": "parcorr.json"})
    for name, entry in stats.items():
        print(f"{name}: median|pcorr|={entry['median_abs']:.4f} over {entry['channels']} channels")
    return 0


def cmd_exp_gram(args) -> int:
    cfg, text = _config(args)
    out = _outdir(args)
    model = _load_or_build(args, cfg)
    stats = gram_experiment(model)
    _write_json(out / "gram.json", stats)
    write_manifest(out / "manifest.json", text, "exp-gram", {"result": "gram.json"})
    for name, entry in stats.items():
        print(f"{name}: mean|cos|={entry['mean_abs']:.4f} over {entry['filters']} filters")
    return 0


def cmd_report(args) -> int:
    original, _, _ = load_model(args.original)
    pruned, _, _ = load_model(args.pruned)
    rep = compression_report(original, pruned, (args.height, args.width))
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(0)

    def conv_case():
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), dtype=np.float64)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.4, dtype=np.float64, requires_grad=True)
        return lambda: en.sum_all(en.relu(en.conv2d(x, w, pad=1))), [w]

    def bn_case():
        x = Tensor(rng.normal(size=(3, 4, 5, 5)), dtype=np.float64, requires_grad=True)
        scale = Tensor(rng.uniform(0.5, 1.5, size=4), dtype=np.float64, requires_grad=True)
        shift = Tensor(rng.normal(size=4) * 0.2, dtype=np.float64, requires_grad=True)
        rm = np.zeros(4)
        rv = np.ones(4)
        return (
            lambda: en.sum_all(
                en.mul(
                    en.batchnorm(x, scale, shift, rm.copy(), rv.copy(), training=True),
                    en.batchnorm(x, scale, shift, rm.copy(), rv.copy(), training=True),
                )
            ),
            [x, scale, shift],
        )

    def ce_case():
        logits_in = Tensor(rng.normal(size=(5, 4)), dtype=np.float64, requires_grad=True)
        labels = np.array([0, 1, 2, 3, 1])
        return lambda: en.softmax_cross_entropy(logits_in, labels), [logits_in]

    def penalty_case():
        w = Tensor(rng.normal(size=(5, 2, 2, 2)) * 0.5, dtype=np.float64, requires_grad=True)
        return lambda: gram_penalty(w), [w]

    worst = 0.0
    failed = False
    for name, case in [
        ("conv_relu", conv_case),
        ("batchnorm", bn_case),
        ("cross_entropy", ce_case),
        ("gram_penalty", penalty_case),
    ]:
        fn, params = case()
        rel = finite_difference_check(fn, params)
        worst = max(worst, rel)
        status = "ok" if rel < 1e-3 else "FAIL"
        if rel >= 1e-3:
            failed = True
        print(f"gradcheck {name}: max_rel_err={rel:.3e} [{status}]")
    print(f"gradcheck worst={worst:.3e}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthoprune",
        description="Structured filter pruning with orthonormality-regularized training.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p, with_out=True):
        p.add_argument("-c", "--config", required=True, help="path to an INI configuration")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one configuration value",
        )
        if with_out:
            p.add_argument("-o", "--out", required=True, help="output directory")

    p = sub.add_parser("init-config", help="write a default configuration file")
    p.add_argument("-o", "--out", required=True, help="path for the new file")
    p.set_defaults(fn=cmd_init_config)

    p = sub.add_parser("train", help="train a model from scratch")
    add_run_args(p)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="train, prune over a schedule, retrain")
    add_run_args(p)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("ebt", help="search for an early pruning ticket")
    add_run_args(p)
    p.add_argument("--threshold", type=float, default=0.9, help="mask overlap threshold")
    p.add_argument("--patience", type=int, default=2, help="stable epochs required")
    p.set_defaults(fn=cmd_ebt)

    p = sub.add_parser("exp-reliability", help="correlate group estimates with exact loss changes")
    add_run_args(p)
    p.add_argument("--model", help="saved model to evaluate (default: fresh build)")
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--groups", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_exp_reliability)

    p = sub.add_parser("exp-parcorr", help="partial correlations between filter activations")
    add_run_args(p)
    p.add_argument("--model", help="saved model to evaluate (default: fresh build)")
    p.add_argument("--ridge", type=float, default=1e-4)
    p.set_defaults(fn=cmd_exp_parcorr)

    p = sub.add_parser("exp-gram", help="off-diagonal mass of filter Gram matrices")
    add_run_args(p)
    p.add_argument("--model", help="saved model to evaluate (default: fresh build)")
    p.set_defaults(fn=cmd_exp_gram)

    p = sub.add_parser("report", help="compression report between two saved models")
    p.add_argument("--original", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference self-check of gradients")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def _one_line(err: BaseException) -> str:
    return "; ".join(part.strip() for part in str(err).splitlines() if part.strip())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"error: {_one_line(err)}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as err:
        print(f"error: {_one_line(err)}", file=sys.stderr)
        return 1
