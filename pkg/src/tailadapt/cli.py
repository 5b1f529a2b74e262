"""Command-line entry point.

Subcommands: synth, stage1, stage2, eval, probe, gradcheck. Config files are
JSON; flags override file values only when given explicitly. Every run
writes a config snapshot next to its outputs. Exit codes: 0 success, 2
validation error, 3 training divergence, 4 gradient-check failure.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import dataio, gradcheck, metrics, pipeline
from .errors import (
    ConfigurationError,
    DivergenceError,
    InvalidConfigError,
    TailAdaptError,
)
from .model import ENSEMBLE_MODES, HeadConfig, linear_probe_train
from .pipeline import ProbeCheckpoint, RunConfig, Stage1Checkpoint, Stage2Checkpoint
from .sampling import SAMPLER_KINDS

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_GRADCHECK = 4

_DEF = RunConfig()


def _write_snapshot(out_dir: Path, subcommand: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"subcommand": subcommand, **payload}
    (out_dir / "config_snapshot.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_json_config(path: str | None, allowed: set[str], what: str) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(doc) - allowed
    if unknown:
        raise InvalidConfigError(f"unknown {what} config keys: {sorted(unknown)}")
    return doc


def _run_config(args) -> RunConfig:
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    values = _load_json_config(getattr(args, "config", None), fields, "run")
    for name in ("batch_size", "lr0", "momentum", "weight_decay", "eta_min",
                 "tau", "gamma", "seed"):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "epochs", None) is not None:
        field = "epochs_stage1" if args.command in ("stage1", "probe") else "epochs_stage2"
        values[field] = args.epochs
    return RunConfig(**values)


def _add_run_flags(parser: argparse.ArgumentParser, epochs_default: int) -> None:
    # Flags default to None so a config file is overridden only by explicit flags;
    # the effective defaults are stated in the help text.
    parser.add_argument("--config", help="JSON file with run config fields")
    parser.add_argument("--epochs", type=int, default=None,
                        help=f"training epochs (default: {epochs_default})")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                        help=f"mini-batch size (default: {_DEF.batch_size})")
    parser.add_argument("--lr", dest="lr0", type=float, default=None,
                        help=f"initial learning rate (default: {_DEF.lr0})")
    parser.add_argument("--momentum", type=float, default=None,
                        help=f"SGD momentum (default: {_DEF.momentum})")
    parser.add_argument("--weight-decay", dest="weight_decay", type=float, default=None,
                        help=f"coupled L2 weight decay (default: {_DEF.weight_decay})")
    parser.add_argument("--eta-min", dest="eta_min", type=float, default=None,
                        help=f"cosine-annealing floor (default: {_DEF.eta_min})")
    parser.add_argument("--tau", type=float, default=None,
                        help=f"cosine-head temperature (default: {_DEF.tau})")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"master RNG seed (default: {_DEF.seed})")


def cmd_synth(args) -> int:
    fields = {f.name for f in dataclasses.fields(dataio.SynthConfig)}
    overrides = _load_json_config(args.config, fields, "synth")
    if args.seed is not None:
        overrides.setdefault("distortion_seed", args.seed)
        overrides.setdefault("sample_seed", args.seed)
    cfg = dataio.SynthConfig(**overrides)
    train, test, bank, manifest = dataio.synth_generate(cfg)
    out_dir = Path(args.out)
    manifest_path = dataio.write_dataset(out_dir, train, test, bank, manifest)
    _write_snapshot(out_dir, "synth", dataclasses.asdict(cfg))
    print(f"wrote {manifest_path}")
    print(f"{'class':<12}{'train':>8}{'subset':>10}")
    for name, count, subset in zip(
        manifest.class_names, manifest.train_counts, manifest.subsets()
    ):
        print(f"{name:<12}{count:>8}{subset.value:>10}")
    print(f"test: {test.num_samples} samples, {cfg.test_per_class} per class")
    return EXIT_OK


def cmd_stage1(args) -> int:
    cfg = _run_config(args)
    manifest = dataio.load_manifest(args.manifest)
    ckpt = pipeline.train_stage1(manifest, args.sampler, cfg)
    out_dir = Path(args.out)
    pipeline.save_checkpoint(out_dir, ckpt)
    _write_snapshot(out_dir, "stage1",
                    {"manifest": str(args.manifest), "sampler": args.sampler,
                     **dataclasses.asdict(cfg)})
    loss = "n/a" if ckpt.final_loss is None else f"{ckpt.final_loss:.6f}"
    print(f"stage1[{args.sampler}] done: epochs={ckpt.epochs} final_loss={loss} -> {out_dir}")
    return EXIT_OK


def cmd_stage2(args) -> int:
    cfg = _run_config(args)
    manifest = dataio.load_manifest(args.manifest)
    ckpt_w = pipeline.load_checkpoint(args.wrs)
    ckpt_r = pipeline.load_checkpoint(args.rus)
    if not isinstance(ckpt_w, Stage1Checkpoint) or not isinstance(ckpt_r, Stage1Checkpoint):
        raise ConfigurationError("--wrs/--rus must point at stage-I checkpoints")
    ckpt = pipeline.train_stage2(ckpt_w, ckpt_r, args.mode, manifest, cfg)
    out_dir = Path(args.out)
    pipeline.save_checkpoint(out_dir, ckpt)
    _write_snapshot(out_dir, "stage2",
                    {"manifest": str(args.manifest), "mode": args.mode,
                     "wrs": str(args.wrs), "rus": str(args.rus), **dataclasses.asdict(cfg)})
    loss = "n/a" if ckpt.final_loss is None else f"{ckpt.final_loss:.6f}"
    print(f"stage2[{args.mode}] done: epochs={ckpt.epochs} final_loss={loss} -> {out_dir}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _run_config(args)
    manifest = dataio.load_manifest(args.manifest)
    train = manifest.load_train()
    weight, bias = linear_probe_train(
        train, manifest.num_classes, cfg.hyper(cfg.epochs_stage1),
        cfg.epochs_stage1, cfg.batch_size, cfg.seed,
    )
    ckpt = ProbeCheckpoint(weight=weight, bias=bias, epochs=cfg.epochs_stage1, seed=cfg.seed)
    out_dir = Path(args.out)
    pipeline.save_checkpoint(out_dir, ckpt)
    _write_snapshot(out_dir, "probe",
                    {"manifest": str(args.manifest), **dataclasses.asdict(cfg)})
    print(f"probe done: epochs={cfg.epochs_stage1} -> {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    test = manifest.load_test()
    bank = manifest.load_bank()
    tau = args.tau if args.tau is not None else _DEF.tau
    if args.model == "zero-shot":
        preds = pipeline.predict_zero_shot(bank, test.features, HeadConfig(tau=tau))
    else:
        if args.checkpoint is None:
            raise ConfigurationError(f"--checkpoint is required for model {args.model!r}")
        ckpt = pipeline.load_checkpoint(args.checkpoint)
        if args.model == "stage1":
            if not isinstance(ckpt, Stage1Checkpoint):
                raise ConfigurationError("checkpoint is not a stage-I directory")
            preds = pipeline.predict_stage1(ckpt, bank, test.features)
        elif args.model == "stage2":
            if not isinstance(ckpt, Stage2Checkpoint):
                raise ConfigurationError("checkpoint is not a stage-II directory")
            preds = pipeline.predict_stage2(ckpt, bank, test.features)
        else:
            if not isinstance(ckpt, ProbeCheckpoint):
                raise ConfigurationError("checkpoint is not a probe directory")
            preds = pipeline.predict_probe(ckpt, test.features)
    rep = pipeline.evaluate_predictions(preds, test, manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_report(out_dir / "report.json", rep)
    _write_snapshot(out_dir, "eval",
                    {"manifest": str(args.manifest), "model": args.model,
                     "checkpoint": None if args.checkpoint is None else str(args.checkpoint),
                     "tau": tau})
    subset = {k: (f"{v:.4f}" if v is not None else "n/a") for k, v in rep.subset_acc.items()}
    print(f"overall_acc={rep.overall_acc:.4f} macro_f1={rep.macro_f1:.4f} "
          f"many={subset['many']} medium={subset['medium']} few={subset['few']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = gradcheck.run_gradcheck(trials=args.trials, seed=args.seed,
                                     step=args.step, tol=args.tol)
    if result.passed:
        print(f"PASS max_rel_err={result.max_rel_err:.3e} ({result.trials} trials)")
        return EXIT_OK
    print(f"FAIL max_rel_err={result.max_rel_err:.3e} at {result.worst_case}", file=sys.stderr)
    return EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailadapt",
        description="Two-stage long-tailed classification on precomputed embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic long-tailed benchmark")
    p.add_argument("--config", help="JSON file with synth config fields")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None,
                   help="sets distortion and sample seeds unless the config overrides them")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stage1", help="train one adapter branch")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--sampler", required=True, choices=SAMPLER_KINDS,
                   help="re-balancing sampler for the training stream")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    _add_run_flags(p, _DEF.epochs_stage1)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="train the branch ensembler")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--wrs", required=True, help="stage-I checkpoint trained with WRS")
    p.add_argument("--rus", required=True, help="stage-I checkpoint trained with RUS")
    p.add_argument("--mode", required=True, choices=ENSEMBLE_MODES,
                   help="fusion level for the ensembler")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--gamma", type=float, default=None,
                   help=f"focal-loss focusing parameter (default: {_DEF.gamma})")
    _add_run_flags(p, _DEF.epochs_stage2)
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("probe", help="train the linear-probe baseline on raw embeddings")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    _add_run_flags(p, _DEF.epochs_stage1)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="evaluate a model on the test split")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--model", required=True, choices=("zero-shot", "probe", "stage1", "stage2"))
    p.add_argument("--checkpoint", default=None, help="checkpoint directory (not for zero-shot)")
    p.add_argument("--tau", type=float, default=None,
                   help=f"temperature for the zero-shot head (default: {_DEF.tau})")
    p.add_argument("--out", required=True, help="directory for report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients against central finite differences")
    p.add_argument("--trials", type=int, default=20, help="number of random instances")
    p.add_argument("--seed", type=int, default=0, help="RNG seed for the instances")
    p.add_argument("--step", type=float, default=gradcheck.DEFAULT_STEP,
                   help="finite-difference step")
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL,
                   help="max relative error allowed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (TailAdaptError, FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
