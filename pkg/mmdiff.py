"""
Command-line entry point for the multimodal diffusion super-resolution
pipeline.

Subcommands cover data generation, the two training stages, sampling, the
modality / guidance / connector ablations, the temperature sweep, the
connector complexity benchmark and the information-theory checks. All
relative paths are resolved against --workdir.

Exit codes: 0 success, 1 usage or configuration, 2 data or format,
3 numeric divergence.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from threadpoolctl import threadpool_limits

sys.path.append(str(Path(__file__).parent))

from mmdiff_config import RunConfig, config_hash, load_config, parse_config, worker_count
from src.benchmark import DEFAULT_M_LIST, bench_mmlc, write_bench_json
from src.diffusion import DiffusionTrainer, MultimodalSRModel, load_model, prepare_training_data, save_model
from src.errors import ContractError, exit_code_for
from src.experiments import (
    METRIC_FIELDS, ablate_guidance, ablate_mmlc, ablate_modalities, guidance_degradation, sweep_rows,
    sweep_temperature, write_csv,
)
from src.information import entropy_check
from src.metrics import evaluate
from src.mmlc import SEGMENTS, TemperatureConfig
from src.sampler import GuidanceConfig, bundle_for, ddim_sample, lr_only_bundle
from src.synth_data import (
    MODALITIES, SamplePair, generate_samples, load_ppm, read_dataset, read_sample, save_pgm, save_ppm,
    write_samples,
)
from src.vq_tokenizer import VqTokenizer, compare_token_paths, load_vq, reconstruction_scores, save_vq, train_vq

logger = logging.getLogger("mmdiff")

GUIDANCE_MODE_CHOICES = ["cfg", "mnull-cfg", "m∅-cfg", "m0-cfg", "m-cfg"]


class _ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _path(args, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else Path(args.workdir) / path


def _progress() -> bool:
    return logger.getEffectiveLevel() <= logging.INFO


def _config(args) -> RunConfig:
    return load_config(_path(args, getattr(args, "config", None)))


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_temps(text: Optional[str], base: Optional[TemperatureConfig] = None) -> TemperatureConfig:
    """
    Parses "depth=0.5,text=2" into a temperature config, starting from `base`.

    Raises:
        ContractError: Malformed entry or unknown segment.
        DomainError: Value outside [0.4, 10].
    """
    temps = base or TemperatureConfig()
    if not text:
        return temps
    for item in text.split(","):
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep or name not in SEGMENTS:
            raise ContractError(f"Bad temperature entry {item!r}; expected <segment>=<value> with segment in {SEGMENTS}")
        try:
            number = float(value)
        except ValueError:
            raise ContractError(f"Temperature for {name} is not a number: {value!r}") from None
        temps = temps.with_value(name, number)
    return temps


def _guidance(config: RunConfig, args) -> GuidanceConfig:
    sample = config.sample
    temps = TemperatureConfig(**sample.temps.model_dump())
    return GuidanceConfig(
        mode=getattr(args, "mode", None) or sample.mode,
        w=sample.w if getattr(args, "w", None) is None else args.w,
        steps=sample.steps if getattr(args, "steps", None) is None else args.steps,
        temps=parse_temps(getattr(args, "temps", None), temps),
        seed=sample.seed if getattr(args, "seed", None) is None else args.seed,
    )


def _checkpoint_config(manifest: Dict, args) -> RunConfig:
    """Config of the run that produced a checkpoint; --config overrides it."""
    if getattr(args, "config", None):
        return _config(args)
    return parse_config(manifest.get("config") or {})


def _heldout(config: RunConfig, args) -> List[SamplePair]:
    if getattr(args, "heldout", None):
        return read_dataset(_path(args, args.heldout))
    return generate_samples(config.data.heldout_n, config.data.heldout_seed, config.data.hr_res,
                            config.data.scale, n_jobs=worker_count(), progress=_progress())


def _pooled_maps(samples: List[SamplePair]):
    return [s.modalities[kind] for s in samples for kind in MODALITIES]


def _new_tokenizer(config: RunConfig) -> VqTokenizer:
    vq = config.vq
    return VqTokenizer(codes=vq.K, d_tok=vq.d_tok, grid=vq.g, resolution=config.data.hr_res,
                       blocks=vq.blocks, heads=vq.heads, seed=config.data.seed)


def _fit_tokenizer(config: RunConfig, samples: List[SamplePair], log_path: Optional[Path] = None) -> VqTokenizer:
    tokenizer = _new_tokenizer(config)
    vq = config.vq
    train_vq(_pooled_maps(samples), tokenizer, epochs=vq.epochs, lr=vq.lr, batch_size=vq.batch, beta=vq.beta,
             seed=config.data.seed, restart_dead_codes=vq.restart_dead_codes, log_path=log_path,
             progress=_progress())
    return tokenizer


def _model_kwargs(config: RunConfig) -> Dict:
    return {
        **config.model.model_dump(),
        "grid": config.vq.g,
        "resolution": config.data.hr_res,
        "scale": config.data.scale,
        "d_tok": config.vq.d_tok,
        "token_mode": config.vq.token_mode,
        "seed": config.train.seed,
    }


def _check_tokenizer(tokenizer: VqTokenizer, config: RunConfig) -> None:
    expected = (config.vq.K, config.vq.d_tok, config.vq.g, config.data.hr_res)
    found = (tokenizer.codes, tokenizer.d_tok, tokenizer.grid_size, tokenizer.resolution)
    if expected != found:
        raise ContractError(f"Tokenizer checkpoint (K, d_tok, g, resolution)={found} does not match the config {expected}")


def _print_rows(rows: List[Dict], fields: List[str]) -> None:
    print(",".join(fields))
    for row in rows:
        print(",".join(f"{row[f]:.4f}" if isinstance(row[f], float) else str(row[f]) for f in fields))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config = _config(args)
    data = config.data
    n, seed = (data.heldout_n, data.heldout_seed) if args.heldout else (data.n, data.seed)
    samples = generate_samples(n, seed, data.hr_res, data.scale, n_jobs=worker_count(), progress=_progress())
    out = write_samples(samples, _path(args, args.out))
    if args.export:
        export_dir = out.parent / f"{out.stem}_export"
        for i, sample in enumerate(samples[:args.export]):
            save_ppm(export_dir / f"{i:05d}_hr.ppm", sample.hr)
            save_ppm(export_dir / f"{i:05d}_lr.ppm", sample.lr)
            for kind in MODALITIES:
                save_pgm(export_dir / f"{i:05d}_{kind}.pgm", sample.modalities[kind])
        logger.info(f"Exported {min(args.export, n)} samples to {export_dir}")
    print(f"Wrote {n} samples (seed {seed}) to {out}")
    return 0


def cmd_train_vq(args) -> int:
    config = _config(args)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = read_dataset(_path(args, args.data))
    tokenizer = _fit_tokenizer(config, samples, log_path=out / "vq_log.jsonl")
    save_vq(tokenizer, out, config.model.d_model,
            extra={"config_hash": config_hash(config), "config": config.model_dump(mode="json")})

    heldout_maps = _pooled_maps(_heldout(config, args))
    rows = compare_token_paths(tokenizer, heldout_maps)
    write_csv(rows, out / "token_paths.csv", ["modality", "count", "discrete_error", "continuous_error"])
    scores = reconstruction_scores(tokenizer, heldout_maps)
    logger.info(f"Held-out reconstruction (discrete): {scores}")
    print(json.dumps({"checkpoint": str(out), **scores}))
    return 0


def cmd_train_diff(args) -> int:
    config = _config(args)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer, _ = load_vq(_path(args, args.vq))
    _check_tokenizer(tokenizer, config)
    samples = read_dataset(_path(args, args.data))

    model = MultimodalSRModel(**_model_kwargs(config))
    data = prepare_training_data(samples, tokenizer, model.d_model, model.token_mode)
    logger.info(f"Training diffusion model ({model.num_parameters()} parameters) on {len(data)} samples")
    train = config.train
    trainer = DiffusionTrainer(model, lr=train.lr, drop_p=train.drop_p, joint_drop_p=train.joint_drop_p,
                               seed=train.seed)
    history = trainer.fit(data, train.steps, train.batch, log_every=train.log_every,
                          log_path=out / "train_log.jsonl", progress=_progress())
    save_model(model, tokenizer, out, config_hash(config), config.model_dump(mode="json"))
    print(json.dumps({"checkpoint": str(out), "final_loss": history[-1]["loss"]}))
    return 0


def cmd_sample(args) -> int:
    model, tokenizer, manifest = load_model(_path(args, args.ckpt))
    config = _checkpoint_config(manifest, args)
    guidance = _guidance(config, args)

    report = None
    if args.lr_file:
        lr = load_ppm(_path(args, args.lr_file))
        if args.modality_source == "lr":
            bundle = lr_only_bundle(lr, guidance.mode, tokenizer, model)
        else:
            bundle = lr_only_bundle(lr, guidance.mode)
        image = ddim_sample(model, bundle, guidance, progress=_progress())
    else:
        if not args.data:
            raise ContractError("sample --index needs --data")
        sample = read_sample(_path(args, args.data), args.index)
        bundle = bundle_for(sample, tokenizer, model, guidance.mode, source=args.modality_source)
        image = ddim_sample(model, bundle, guidance, progress=_progress())
        report = evaluate(image, sample.hr, sample.modalities["edge"].grid)

    out = save_ppm(_path(args, args.out), image)
    line = {"out": str(out), "mode": guidance.mode, "w": guidance.w, "seed": guidance.seed}
    line.update(report.as_row() if report else {field: None for field in METRIC_FIELDS})
    print(json.dumps(line))
    return 0


def cmd_ablate_modalities(args) -> int:
    model, tokenizer, manifest = load_model(_path(args, args.ckpt))
    guidance = _guidance(_checkpoint_config(manifest, args), args)
    samples = read_dataset(_path(args, args.data), limit=args.limit)
    rows = ablate_modalities(model, tokenizer, samples, guidance, n_jobs=worker_count(), progress=_progress())
    fields = ["mask"] + METRIC_FIELDS
    write_csv(rows, _path(args, args.out), fields)
    _print_rows(rows, fields)
    return 0


def cmd_ablate_guidance(args) -> int:
    model, tokenizer, manifest = load_model(_path(args, args.ckpt))
    guidance = _guidance(_checkpoint_config(manifest, args), args)
    samples = read_dataset(_path(args, args.data), limit=args.limit)
    rows = ablate_guidance(model, tokenizer, samples, guidance, n_jobs=worker_count(), progress=_progress())
    fields = ["mode", "w"] + METRIC_FIELDS
    write_csv(rows, _path(args, args.out), fields)
    _print_rows(rows, fields)
    for mode in ("cfg", "m-cfg"):
        logger.info(f"edge_f1 drop from w=2 to w=14 under {mode}: {guidance_degradation(rows, mode):.4f}")
    return 0


def cmd_ablate_mmlc(args) -> int:
    config = _config(args)
    samples = read_dataset(_path(args, args.data))
    if args.vq:
        tokenizer, _ = load_vq(_path(args, args.vq))
        _check_tokenizer(tokenizer, config)
    else:
        tokenizer = _fit_tokenizer(config, samples)
    heldout = _heldout(config, args)
    train = config.train
    rows = ablate_mmlc(
        samples, heldout, tokenizer,
        model_kwargs=_model_kwargs(config),
        train_kwargs={"lr": train.lr, "drop_p": train.drop_p, "joint_drop_p": train.joint_drop_p, "seed": train.seed},
        config=_guidance(config, args),
        steps=args.steps or train.steps,
        batch_size=train.batch,
        n_jobs=worker_count(),
        progress=_progress(),
    )
    fields = ["variant", "cond_length", "forward_ms", "parameters"] + METRIC_FIELDS
    write_csv(rows, _path(args, args.out), fields)
    _print_rows(rows, fields)
    return 0


def cmd_sweep_temp(args) -> int:
    model, tokenizer, manifest = load_model(_path(args, args.ckpt))
    guidance = _guidance(_checkpoint_config(manifest, args), args)
    sample = read_sample(_path(args, args.data), args.index)
    points = sweep_temperature(model, tokenizer, sample, guidance, args.modality, args.values)
    out = _path(args, args.out)
    for point in points:
        save_ppm(out / f"{args.modality}_{point.value:g}.ppm", point.image)
    rows = sweep_rows(points)
    fields = ["value"] + METRIC_FIELDS
    write_csv(rows, out / "sweep.csv", fields)
    _print_rows(rows, fields)
    return 0


def cmd_bench_mmlc(args) -> int:
    report = bench_mmlc(args.M_list, n=args.N, d=args.D, heads=args.heads, trials=args.trials, seed=args.seed)
    if args.out:
        write_bench_json(report, _path(args, args.out))
    print("M,macs,formula_match,ns,baseline_macs,baseline_ns")
    for p in report["points"]:
        print(f"{p['M']},{p['macs']},{p['formula_match']},{p['ns']:.0f},{p['baseline_macs']},{p['baseline_ns']:.0f}")
    print(f"slope={report['slope']:.4f} r2={report['r2']:.6f} "
          f"baseline_slope={report['baseline_slope']:.4f} baseline_r2={report['baseline_r2']:.6f}")
    return 0


def cmd_entropy_check(args) -> int:
    result = entropy_check(args.trials, args.seed)
    for failure in result.failures:
        logger.error(failure)
    print(result.summary())
    return 0 if result.ok else 3


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_guidance_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=GUIDANCE_MODE_CHOICES, default=None,
                        help="Guidance mode (default: sample.mode of the config)")
    parser.add_argument("--w", type=float, default=None, help="Guidance scale")
    parser.add_argument("--steps", type=int, default=None, help="DDIM steps")
    parser.add_argument("--temps", default=None, help="Connector temperatures, e.g. depth=0.5,text=2")
    parser.add_argument("--seed", type=int, default=None, help="Sampling seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="mmdiff", description="Multimodal diffusion super-resolution toolkit.")
    parser.add_argument("--workdir", default=".", help="Base directory for relative paths (default: .)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate a synthetic MMDS dataset")
    p.add_argument("--config", default=None, help="JSON run configuration (default: built-in defaults)")
    p.add_argument("--out", required=True, help="Output .mmds file")
    p.add_argument("--heldout", action="store_true", help="Generate the held-out split (data.heldout_n/heldout_seed)")
    p.add_argument("--export", type=int, default=0, help="Also export the first N samples as PPM/PGM")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train-vq", help="Stage 1: train the modality tokenizer")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="Training MMDS dataset")
    p.add_argument("--out", required=True, help="Checkpoint directory")
    p.add_argument("--heldout", default=None, help="Held-out MMDS dataset (default: generated from the config)")
    p.set_defaults(handler=cmd_train_vq)

    p = sub.add_parser("train-diff", help="Stage 2: train the conditioned diffusion model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="Training MMDS dataset")
    p.add_argument("--vq", required=True, help="Stage-1 checkpoint directory")
    p.add_argument("--out", required=True, help="Checkpoint directory")
    p.set_defaults(handler=cmd_train_diff)

    p = sub.add_parser("sample", help="Super-resolve one image")
    p.add_argument("--ckpt", required=True, help="Stage-2 checkpoint directory")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--index", type=int, help="Sample index in --data")
    source.add_argument("--lr-file", help="LR image as PPM")
    p.add_argument("--data", default=None, help="MMDS dataset for --index")
    p.add_argument("--modality-source", choices=["scene", "lr"], default="scene",
                   help="Exact scene maps or maps extracted from the LR image")
    p.add_argument("--config", default=None, help="Override the config stored in the checkpoint")
    p.add_argument("--out", required=True, help="Output PPM")
    _add_guidance_flags(p)
    p.set_defaults(handler=cmd_sample)

    for name, handler, default_out in (("ablate-modalities", cmd_ablate_modalities, "ablate_modalities.csv"),
                                       ("ablate-guidance", cmd_ablate_guidance, "ablate_guidance.csv")):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on one checkpoint")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True, help="Evaluation MMDS dataset")
        p.add_argument("--limit", type=int, default=None, help="Use only the first N samples")
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=default_out, help="CSV output")
        _add_guidance_flags(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("ablate-mmlc", help="Train with and without the latent connector and compare")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="Training MMDS dataset")
    p.add_argument("--vq", default=None, help="Stage-1 checkpoint (default: train one from the config)")
    p.add_argument("--heldout", default=None, help="Held-out MMDS dataset (default: generated from the config)")
    p.add_argument("--train-steps", dest="steps", type=int, default=None, help="Override train.steps")
    p.add_argument("--out", default="ablate_mmlc.csv", help="CSV output")
    p.set_defaults(handler=cmd_ablate_mmlc)

    p = sub.add_parser("sweep-temp", help="Sample one image over a range of connector temperatures")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--modality", required=True, choices=list(SEGMENTS))
    p.add_argument("--values", required=True, type=_float_list, help="Comma-separated temperatures")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="sweep", help="Output directory")
    _add_guidance_flags(p)
    p.set_defaults(handler=cmd_sweep_temp)

    p = sub.add_parser("bench-mmlc", help="Connector MAC/time complexity benchmark")
    p.add_argument("--M-list", dest="M_list", type=_int_list, default=list(DEFAULT_M_LIST))
    p.add_argument("--N", type=int, default=8, help="Latent tokens")
    p.add_argument("--D", type=int, default=4, help="Model width")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="Optional JSON report")
    p.set_defaults(handler=cmd_bench_mmlc)

    p = sub.add_parser("entropy-check", help="Exact conditional mutual information checks")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_entropy_check)
    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        with threadpool_limits(limits=worker_count()):
            return args.handler(args)
    except Exception as error:
        logger.error(f"{args.command} failed: {error}")
        logger.debug("Traceback:", exc_info=True)
        return exit_code_for(error)


if __name__ == "__main__":
    sys.exit(main())
