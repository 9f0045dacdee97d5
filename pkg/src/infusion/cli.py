"""Command-line driver.

Subcommands share one output directory; each reads what earlier steps wrote::

    infusion-lab gen-world   --preset grid25 --out runs/g
    infusion-lab train-base  --preset grid25 --out runs/g
    infusion-lab customize   --preset grid25 --out runs/g --method infusion
    infusion-lab sample      --preset grid25 --out runs/g --method infusion --steps 50 --guidance 8
    infusion-lab eval        --preset grid25 --out runs/g --method infusion
    infusion-lab curves      --config fig10.json
    infusion-lab plot        --out runs/g

Exit status: 0 success, 1 usage/config/contract error, 2 numeric or integrity failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .customization import METHODS
from .errors import ContractError, IntegrityError, MigrationError, NumericError
from .experiments import (
    PLACEHOLDER,
    Evaluator,
    check_seed,
    ExperimentConfig,
    MethodModel,
    curves_csv,
    customization_data,
    experiment_prompts,
    load_config,
    load_world,
    loss_csv,
    overfitting_curves,
    points_csv,
    preset,
    read_curves_csv,
    read_points_csv,
    rng_for,
    run_method,
    train_base_model,
)
from .persist import (
    load_checkpoint,
    residual_checkpoint,
    save_checkpoint,
    token_checkpoint,
    weights_checkpoint,
    write_atomic,
)
from .svg import PALETTE, Style, render_curves_svg, render_scatter_svg

log = logging.getLogger("infusion")

SUBCOMMANDS = ("gen-world", "train-base", "customize", "sample", "eval", "curves", "plot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="infusion-lab", description="Toy-scale concept customization laboratory.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--preset", help="named preset (four-peak, grid25, paper-sd15)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--method", help="customization method, or 'base' for sample/eval")
        p.add_argument("--steps", type=int, help="training steps (train/customize) or sampler steps (sample)")
        p.add_argument("--guidance", type=float, help="classifier-free guidance scale")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.preset:
            cfg = preset(args.preset, cfg)
    else:
        cfg = preset(args.preset or "four-peak")
    if args.seed is not None:
        check_seed(args.seed)
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    return cfg


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    """Checkpoint metadata: the config echo (without the output location) and its hash."""
    config = cfg.to_dict()
    del config["out"]
    return {"config_hash": cfg.config_hash(), "config": config, **extra}


def _methods(args, allow_base: bool = False) -> list[str]:
    if args.method is None:
        raise ContractError("--method is required")
    allowed = METHODS + (("base",) if allow_base else ())
    if args.method not in allowed:
        raise ContractError(f"unknown method {args.method!r}; choose from {list(allowed)}")
    return [args.method]


def _load_base(out: Path):
    path = out / "base.ckpt.json"
    if not path.exists():
        raise ContractError(f"{path} not found; run train-base first")
    return load_checkpoint(path).weights()


def _load_artifact(out: Path, method: str, base):
    path = out / f"{method}.ckpt.json"
    if not path.exists():
        raise ContractError(f"{path} not found; run customize --method {method} first")
    ckpt = load_checkpoint(path)
    if method == "infusion":
        return ckpt.residual(base)
    if method == "full-finetune":
        return ckpt.weights()
    token, emb = ckpt.token_embedding()
    if ckpt.payload["base_fingerprint"] != base.fingerprint():
        raise ContractError("token embedding was learned against a different base model")
    return emb


def cmd_gen_world(cfg: ExperimentConfig, args) -> None:
    world = load_world(cfg)
    doc = world.to_dict()
    doc["config_hash"] = cfg.config_hash()
    write_atomic(Path(cfg.out) / "world.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_train_base(cfg: ExperimentConfig, args) -> None:
    if args.steps is not None:
        cfg = replace(cfg, base=replace(cfg.base, steps=args.steps))
    out = Path(cfg.out)
    weights, losses = train_base_model(cfg)
    save_checkpoint(weights_checkpoint(weights, **_meta(cfg, step=len(losses))), out / "base.ckpt.json")
    write_atomic(out / "base_loss.csv", loss_csv(losses, cfg.config_hash()))


def cmd_customize(cfg: ExperimentConfig, args) -> None:
    if args.steps is not None:
        cfg = replace(cfg, customize=replace(cfg.customize, steps=args.steps))
    out = Path(cfg.out)
    base = _load_base(out)
    world = load_world(cfg)
    prompts = experiment_prompts(cfg, world)
    data = customization_data(cfg, world)
    fp = base.fingerprint()
    for method in _methods(args):
        final, run = run_method(method, cfg, base, data, prompts)
        keep = set(cfg.metrics.eval_steps)
        for step, artifact in run.checkpoints:
            if step in keep:
                ckpt = _artifact_checkpoint(method, artifact, fp, _meta(cfg, step=step, method=method))
                save_checkpoint(ckpt, out / "checkpoints" / method / f"step_{step:05d}.ckpt.json")
        save_checkpoint(_artifact_checkpoint(method, final, fp, _meta(cfg, step=cfg.customize.steps, method=method)), out / f"{method}.ckpt.json")
        write_atomic(out / f"{method}_loss.csv", loss_csv(run.losses, cfg.config_hash()))


def _artifact_checkpoint(method: str, artifact, base_fp: str, meta: dict):
    if method == "infusion":
        return residual_checkpoint(artifact, **meta)
    if method == "full-finetune":
        return weights_checkpoint(artifact, kind="finetuned-weights", **meta)
    return token_checkpoint(PLACEHOLDER, artifact, base_fp, **meta)


def cmd_sample(cfg: ExperimentConfig, args) -> None:
    sampler = cfg.sampler
    if args.steps is not None:
        sampler = replace(sampler, steps=args.steps)
    if args.guidance is not None:
        sampler = replace(sampler, guidance=args.guidance)
    cfg = replace(cfg, sampler=sampler)
    out = Path(cfg.out)
    base = _load_base(out)
    world = load_world(cfg)
    prompts = experiment_prompts(cfg, world)
    for method in _methods(args, allow_base=True):
        if method == "base":
            model = MethodModel("full-finetune", base, base, prompts)
        else:
            model = MethodModel(method, base, _load_artifact(out, method, base), prompts)
        pts = model.sample(cfg.schedule.build(), cfg.sampler, cfg.metrics.n_samples, rng_for(cfg, "eval-samples"))
        pts.label = method
        write_atomic(out / f"samples_{method}.csv", points_csv(pts, cfg.config_hash()))


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.out)
    base = _load_base(out)
    world = load_world(cfg)
    prompts = experiment_prompts(cfg, world)
    evaluator = Evaluator(cfg, world, base, prompts)
    for method in _methods(args):
        metrics = evaluator.evaluate(method, _load_artifact(out, method, base))
        report = {
            "format_version": 1,
            "method": method,
            "metrics": metrics,
            "samples": cfg.metrics.n_samples,
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
        }
        write_atomic(out / f"report_{method}.json", json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_curves(cfg: ExperimentConfig, args) -> None:
    if args.steps is not None:
        cfg = replace(cfg, customize=replace(cfg.customize, steps=args.steps))
    out = Path(cfg.out)
    world = load_world(cfg)
    base_path = out / "base.ckpt.json"
    if base_path.exists():
        base = load_checkpoint(base_path).weights()
    else:
        base, losses = train_base_model(cfg, world)
        save_checkpoint(weights_checkpoint(base, **_meta(cfg, step=len(losses))), base_path)
        write_atomic(out / "base_loss.csv", loss_csv(losses, cfg.config_hash()))
    prompts = experiment_prompts(cfg, world)
    data = customization_data(cfg, world)
    methods = _methods(args) if args.method else list(cfg.methods)
    steps = tuple(s for s in cfg.metrics.eval_steps if s <= cfg.customize.steps)
    runs = {m: run_method(m, cfg, base, data, prompts)[1] for m in methods}
    evaluator = Evaluator(cfg, world, base, prompts)
    series = overfitting_curves(runs, evaluator, steps)
    write_atomic(out / "curves.csv", curves_csv(series, cfg.config_hash()))
    summary = {
        "format_version": 1,
        "config_hash": cfg.config_hash(),
        "base_fingerprint": base.fingerprint(),
        "curves": {c.method: {"steps": c.steps, **c.values} for c in series},
    }
    write_atomic(out / "curves.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_plot(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.out)
    meta = f"config_hash={cfg.config_hash()}"
    made = 0
    curves_path = out / "curves.csv"
    if curves_path.exists():
        series = read_curves_csv(curves_path.read_text())
        for metric in ("fisher", "w2", "coverage"):
            render_curves_svg(
                {c.method: (c.steps, c.values[metric]) for c in series},
                out / f"curve_{metric}.svg",
                title=f"{metric} vs customization steps",
                ylabel=metric,
                meta=meta,
            )
            made += 1
    sample_files = sorted(out.glob("samples_*.csv"))
    if sample_files:
        world = load_world(cfg)
        centers = world.modality_centers()
        lim = float(abs(centers).max()) + 1.5
        for i, path in enumerate(sample_files):
            pts = read_points_csv(path.read_text())
            layers = [(centers, Style("modality centers", "#000000", 2.5, 1.0)), (pts, Style(pts.label or path.stem, PALETTE[i % len(PALETTE)]))]
            render_scatter_svg(layers, (-lim, lim, -lim, lim), out / f"{path.stem}.svg", title=path.stem, meta=meta)
            made += 1
    if not made:
        raise ContractError(f"nothing to plot in {out}; run curves or sample first")


HANDLERS = {
    "gen-world": cmd_gen_world,
    "train-base": cmd_train_base,
    "customize": cmd_customize,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "curves": cmd_curves,
    "plot": cmd_plot,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg, args)
    except (IntegrityError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, MigrationError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
