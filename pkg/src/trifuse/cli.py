"""Command-line interface.

Commands: ``train``, ``cv``, ``synth``, ``verify``, ``params``, ``segment``.
Exit codes: 0 success, 1 verification/validation failure, 2 usage error,
3 runtime or data error. Artifacts are written atomically (temp + rename) and
every report embeds the resolved configuration, seeds and library version.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile

from . import __version__, config, data, models, train, verify
from .fusion import FusionSpec, param_count

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class _Atomic:
    """Stage artifacts in a temp dir, swap into place only on success."""

    def __init__(self, final: str):
        self.final = final

    def __enter__(self):
        os.makedirs(os.path.dirname(os.path.abspath(self.final)), exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".tmp-", dir=os.path.dirname(os.path.abspath(self.final)))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if os.path.exists(self.final):
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory (default: $TRIFUSE_OUT)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--profile", choices=config.PROFILES, help="desk: small widths and epochs; full: reference protocol")
    p.add_argument("--task", help="experiment label embedded in reports")


def _add_data(p: argparse.ArgumentParser):
    p.add_argument("--data", dest="manifest", help="dataset manifest (trials or segments kind)")
    p.add_argument("--synth", choices=data.GENERATORS, help="generate synthetic data instead of loading a manifest")
    p.add_argument("--trials", type=int, help="synthetic trial count")
    p.add_argument("--segments-per-trial", type=int, help="synthetic segments per trial")
    p.add_argument("--noise", type=float, help="synthetic noise level")
    p.add_argument("--subjects", type=int, help="synthetic subject count")
    p.add_argument("--shuffle-labels", action="store_true", default=None,
                   help="permute labels (chance-level control)")


def _add_model(p: argparse.ArgumentParser):
    p.add_argument("--model", choices=["eeg", "oxy", "deoxy", "lf", "tf", "pf"],
                   help="single-modal classifier or fusion kind")
    p.add_argument("--order", type=int, help="polynomial order p (PF)")
    p.add_argument("--rank", type=int, help="CP rank R (TF/PF factorized)")
    p.add_argument("--symmetric", action="store_true", default=None, help="share one PF factor tensor")
    p.add_argument("--path", choices=["full", "factorized"], help="fusion weight representation")
    p.add_argument("--output-dim", type=int, help="fused vector length")
    p.add_argument("--l2-normalize", action="store_true", default=None,
                   help="L2-normalize the fused vector even for LF")


def _add_train(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--trial-vote", action="store_true", default=None,
                   help="also report majority vote over each trial's segments")


def _model_override(args) -> dict | None:
    if args.model is None:
        return None
    if args.model in ("eeg", "oxy", "deoxy"):
        return {"type": "single", "modality": args.model}
    fusion = {"kind": args.model.upper()}
    for key, val in (("order", args.order), ("rank", args.rank), ("symmetric", args.symmetric),
                     ("path", args.path), ("output_dim", args.output_dim)):
        if val is not None:
            fusion[key] = val
    model = {"type": "fused", "fusion": fusion}
    if args.l2_normalize is not None:
        model["l2_normalize"] = args.l2_normalize
    return model


def _overrides(args) -> dict:
    out = {
        "out": getattr(args, "out", None), "seed": getattr(args, "seed", None),
        "profile": getattr(args, "profile", None), "task": getattr(args, "task", None),
        "jobs": getattr(args, "jobs", None), "k": getattr(args, "k", None),
        "epochs": getattr(args, "epochs", None), "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None), "trial_vote": getattr(args, "trial_vote", None),
        "manifest": getattr(args, "manifest", None),
        "shuffle_labels": getattr(args, "shuffle_labels", None),
        "model": _model_override(args) if hasattr(args, "model") else None,
    }
    if getattr(args, "synth", None) is not None:
        synth = {"generator": args.synth}
        for key, val in (("n_trials", args.trials), ("segments_per_trial", args.segments_per_trial),
                         ("noise", args.noise), ("n_subjects", args.subjects)):
            if val is not None:
                synth[key] = val
        out["synth"] = synth
    return out


def _resolve(args) -> config.RunConfig:
    return config.resolve(path=args.config if getattr(args, "config", None) else None,
                          overrides=_overrides(args))


def _require_out(cfg: config.RunConfig) -> str:
    if not cfg.out:
        raise config.ConfigError("no output directory: pass --out, set 'out' in the config, or export TRIFUSE_OUT")
    return cfg.out


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = _resolve(args)
    if not cfg.model:
        raise config.ConfigError("train needs a model (--model or config 'model')")
    out = _require_out(cfg)
    ds = config.load_dataset(cfg)
    plan = data.make_folds(ds, k=cfg.k, seed=cfg.seed)
    split = data.fold_indices(ds, plan, fold=0)
    model = models.build_from_spec(cfg.model, seed=cfg.seed)
    report = train.train(model, ds, split, cfg.train, fingerprint=cfg.fingerprint(), fold=0)
    with _Atomic(out) as tmp:
        models.save_model(model, os.path.join(tmp, "checkpoint"))
        train.write_report(report, os.path.join(tmp, "train_report.json"))
    acc = "n/a" if report.test_accuracy is None else f"{report.test_accuracy:.4f}"
    print(f"trained {cfg.model.get('type')} model: held-out accuracy {acc} "
          f"({report.n_train} train / {report.n_test} test segments)")
    print(f"artifacts: {out}/checkpoint, {out}/train_report.json")
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _resolve(args)
    if not cfg.model:
        raise config.ConfigError("cv needs a model (--model or config 'model')")
    out = _require_out(cfg)
    ds = config.load_dataset(cfg)
    report = train.cross_validate(cfg.model, ds, k=cfg.k, config=cfg.train,
                                  fingerprint=cfg.fingerprint(), jobs=cfg.jobs)
    with _Atomic(out) as tmp:
        train.write_report(report, os.path.join(tmp, "cv_report.json"))
        train.write_fold_offset_csv(report, os.path.join(tmp, "folds.csv"))
    print(f"{cfg.k}-fold accuracy: {report.mean_accuracy:.4f} +/- {report.std_accuracy:.4f} "
          f"(folds: {', '.join(f'{a:.4f}' for a in report.fold_accuracies)})")
    print(f"artifacts: {out}/cv_report.json, {out}/folds.csv")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _require_out(cfg)
    if "synth" not in cfg.data:
        raise config.ConfigError("synth needs a generator (--synth or config data.synth)")
    ds = config.load_dataset(cfg)
    with _Atomic(out) as tmp:
        data.save_segments_manifest(ds, tmp)
    print(f"wrote {len(ds)} segments ({ds.labels.mean():.2%} positive) to {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _resolve(args)
    out = _require_out(cfg)
    if "manifest" not in cfg.data:
        raise config.ConfigError("segment needs --data pointing at a trials manifest")
    ds = data.load_manifest(cfg.data["manifest"])
    with _Atomic(out) as tmp:
        data.save_segments_manifest(ds, tmp)
    n_trials = len(set(ds.trial_ids.tolist()))
    print(f"segmented {n_trials} trials into {len(ds)} windows -> {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_checks(name_filter=args.filter, checkpoint=args.checkpoint)
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(name) for name, _, _ in results)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:{width}}  {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def cmd_params(args) -> int:
    dims = tuple(args.dims)
    o = args.output_dim if args.output_dim is not None else 128
    rows = [
        ("LF", FusionSpec("LF", dims, o)),
        ("TF full", FusionSpec("TF", dims, o, path="full")),
        ("TF factorized", FusionSpec("TF", dims, o, rank=args.rank or 16)),
        (f"PF p={args.order or 5} full", FusionSpec("PF", dims, o, order=args.order or 5, path="full")),
        (f"PF p={args.order or 5} factorized",
         FusionSpec("PF", dims, o, rank=args.rank or 16, order=args.order or 5)),
        (f"PF p={args.order or 5} symmetric",
         FusionSpec("PF", dims, o, rank=args.rank or 16, order=args.order or 5, symmetric=True)),
    ]
    print(f"fusion parameter counts for feature lengths {dims}, fused length {o}:")
    for label, spec in rows:
        print(f"  {label:24} {param_count(spec):>18,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trifuse",
        description="Tri-modal EEG/NIRS fusion classifiers: train, cross-validate and verify.",
    )
    parser.add_argument("--version", action="version", version=f"trifuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model on fold 0 and checkpoint it")
    for add in (_add_common, _add_data, _add_model, _add_train):
        add(p)
    p.add_argument("--k", type=int, help="fold count used to carve the held-out split")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross validation")
    for add in (_add_common, _add_data, _add_model, _add_train):
        add(p)
    p.add_argument("--k", type=int, help="fold count")
    p.add_argument("--jobs", type=int, help="folds trained in parallel (default 1, deterministic)")
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("synth", help="generate a synthetic dataset manifest")
    for add in (_add_common, _add_data):
        add(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("segment", help="slice a trials manifest into 3s windows")
    for add in (_add_common, _add_data):
        add(p)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("verify", help="run the oracle suite (identities, reconstruction, gradients)")
    p.add_argument("--filter", help="run only checks whose name contains this substring")
    p.add_argument("--checkpoint", help="also digest-check and reconstruct a saved model")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("params", help="parameter-count table for the fusion layers")
    p.add_argument("--dims", type=int, nargs=3, default=[120, 144, 144],
                   help="feature lengths A B C (default: 120 144 144)")
    p.add_argument("--output-dim", type=int, help="fused vector length (default 128)")
    p.add_argument("--rank", type=int, help="CP rank (default 16)")
    p.add_argument("--order", type=int, help="polynomial order (default 5)")
    p.set_defaults(fn=cmd_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, train.TrainingDiverged, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
