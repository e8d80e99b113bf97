"""Command-line entry point: ``loda <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import gradcheck
from .adaptation import MODES, LoDaModel, parameter_counts
from .backbones import init_frozen, load_frozen, save_frozen
from .config import RunConfig, load_config, write_config
from .data import dataset_from_spec, generate_dataset, load_dataset
from .exceptions import LodaError
from .spectrum import compare_profiles, write_plot_data
from .training import (
    SplitPlan,
    build_model,
    cross_dataset,
    evaluate,
    preprocess,
    run_splits,
    train,
)
from .tensor import no_grad
from .weights import load_weights, save_weights

logger = logging.getLogger("loda")

SWEEPS = {
    "latent": ("latent_dim", (16, 32, 48, 64, 80)),
    "heads": ("heads", (2, 4, 8)),
    "interactions": ("interaction_count", None),  # divisors of num_layers
    "modes": ("mode", ("linear_probe", "extractor_only", "full_finetune", "loda")),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--mode", choices=MODES, help="trainable set (train.mode)")
    p.add_argument("--epochs", type=int, help="train.epochs")


def _data_args(p: argparse.ArgumentParser, flag: str = "--data") -> None:
    p.add_argument(flag, help="dataset directory or manifest; default: synthetic set from [data]")
    if flag == "--data":
        p.add_argument("--data-seed", type=int, default=0, help="seed for the in-memory synthetic set")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loda", description="Local-distortion-aware ViT adaptation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic distortion dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data-seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model and save its weights and epoch log")
    _common(p)
    _data_args(p)
    p.add_argument("--eval-data", help="held-out set evaluated after each epoch")
    p.add_argument("--frozen-weights", help="frozen backbone weight file to use instead of seeded init")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate saved weights, or run the repeated split protocol")
    _common(p)
    _data_args(p)
    p.add_argument("--weights", help="directory written by 'train'")
    p.add_argument("--splits", type=int, default=10)

    p = sub.add_parser("cross-eval", help="train on one dataset, evaluate on another")
    _common(p)
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--seeds", type=int, default=3)

    p = sub.add_parser("ablate", help="sweep latent dim, heads, interactions or modes")
    _common(p)
    _data_args(p)
    p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    p.add_argument("--splits", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--e2e-seeds", type=int)

    p = sub.add_parser("fourier", help="compare feature spectra of a ViT baseline and LoDa")
    _common(p)
    _data_args(p)
    p.add_argument("--baseline", choices=MODES, default="full_finetune")
    p.add_argument("--images", type=int, default=128)
    p.add_argument("--untrained", action="store_true", help="skip training both models")
    p.add_argument("--out", required=True, help="plot-data CSV path")

    p = sub.add_parser("params", help="print trainable and total parameter counts")
    _common(p)
    return parser


def _run_config(args) -> RunConfig:
    overrides = list(args.overrides)
    for flag, key in (("seed", "train.seed"), ("mode", "train.mode"), ("epochs", "train.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def _dataset(path, cfg: RunConfig, data_seed: int = 0):
    if path:
        return load_dataset(path)
    return dataset_from_spec(cfg.data, data_seed)


def _fmt(x) -> str:
    return repr(float(x))


def cmd_gen_data(args, out) -> int:
    cfg = _run_config(args)
    manifest = generate_dataset(cfg.data, args.data_seed, args.out)
    print(f"wrote {len(manifest)} images to {args.out}", file=out)
    return 0


def cmd_train(args, out) -> int:
    cfg = _run_config(args)
    dataset = _dataset(args.data, cfg, args.data_seed)
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    frozen = load_frozen(args.frozen_weights, cfg.vit, cfg.cnn) if args.frozen_weights else None
    model = build_model(cfg.train, cfg.vit, cfg.cnn, frozen)
    result = train(model, dataset, cfg.train, eval_set)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "epoch_log.csv").write_text(result.log_text())
    save_weights(model.state_dict(), dest / "trainable.lodaw", namespace="trainable")
    save_frozen(model.frozen, dest / "frozen.lodaw")
    write_config(cfg, dest / "config.ini")
    last = result.log[-1]
    print(f"trained {result.steps} steps; final loss {_fmt(last['loss'])}; train_srcc {_fmt(last['train_srcc'])}",
          file=out)
    return 0


def load_trained(directory) -> tuple[LoDaModel, RunConfig]:
    directory = Path(directory)
    cfg = load_config(directory / "config.ini")
    frozen = load_frozen(directory / "frozen.lodaw", cfg.vit, cfg.cnn)
    model = build_model(cfg.train, cfg.vit, cfg.cnn, frozen)
    model.load_state_dict(load_weights(directory / "trainable.lodaw", namespace="trainable"))
    return model, cfg


def _print_report(report, out) -> None:
    for i, m in enumerate(report.per_split):
        print(f"split {i} srcc {_fmt(m.srcc)} plcc {_fmt(m.plcc)}", file=out)
    print(f"median srcc {_fmt(report.median_srcc)} plcc {_fmt(report.median_plcc)}", file=out)


def cmd_eval(args, out) -> int:
    if args.weights:
        model, cfg = load_trained(args.weights)
        dataset = _dataset(args.data, cfg, args.data_seed)
        m = evaluate(model, dataset, cfg.train)
        print(f"srcc {_fmt(m.srcc)} plcc {_fmt(m.plcc)}", file=out)
        return 0
    cfg = _run_config(args)
    dataset = _dataset(args.data, cfg, args.data_seed)
    report = run_splits(dataset, cfg.train, SplitPlan(tuple(range(args.splits))), cfg.vit, cfg.cnn)
    _print_report(report, out)
    return 0


def cmd_cross_eval(args, out) -> int:
    cfg = _run_config(args)
    report = cross_dataset(load_dataset(args.train_data), load_dataset(args.eval_data), cfg.train,
                           seeds=[cfg.train.seed + k for k in range(args.seeds)], vit_cfg=cfg.vit, cnn_cfg=cfg.cnn)
    _print_report(report, out)
    return 0


def sweep_values(name: str, cfg: RunConfig) -> tuple[str, tuple]:
    key, values = SWEEPS[name]
    if values is None:
        layers = cfg.vit.num_layers
        values = tuple(n for n in range(1, layers + 1) if layers % n == 0)
    return key, values


def cmd_ablate(args, out) -> int:
    cfg = _run_config(args)
    dataset = _dataset(args.data, cfg, args.data_seed)
    key, values = sweep_values(args.sweep, cfg)
    print(f"{key},median_srcc,median_plcc,trainable", file=out)
    for value in values:
        tcfg = replace(cfg.train, **{key: value})
        report = run_splits(dataset, tcfg, SplitPlan(tuple(range(args.splits))), cfg.vit, cfg.cnn)
        print(f"{value},{_fmt(report.median_srcc)},{_fmt(report.median_plcc)},{report.trainable}", file=out)
    return 0


def cmd_gradcheck(args, out) -> int:
    results = gradcheck.run_suite(args.seeds, e2e_seeds=args.e2e_seeds, log=lambda s: print(s, file=out))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.name} seed {r.seed} rel err {r.error:.3e}", file=out)
    print("gradcheck " + ("passed" if not failed else f"failed ({len(failed)} checks)"), file=out)
    return 0 if not failed else 1


def model_layers(model: LoDaModel):
    def layers(images):
        with no_grad():
            _, toks = model(preprocess(images), return_tokens=True)
        return [t.data for t in toks]

    return layers


def cmd_fourier(args, out) -> int:
    cfg = _run_config(args)
    dataset = _dataset(args.data, cfg, args.data_seed)
    frozen = init_frozen(cfg.train.frozen_seed, cfg.vit, cfg.cnn)
    models = {}
    for mode in (args.baseline, "loda"):
        model = build_model(replace(cfg.train, mode=mode), cfg.vit, cfg.cnn, frozen)
        if not args.untrained:
            train(model, dataset, replace(cfg.train, mode=mode))
        models[mode] = model
    k = min(args.images, len(dataset))
    images = dataset.images[:k, :, :cfg.vit.image_size, :cfg.vit.image_size]
    report = compare_profiles(model_layers(models[args.baseline]), model_layers(models["loda"]), images,
                              names=(args.baseline, "loda"))
    write_plot_data(report, args.out)
    for entry in report["layers"]:
        print(f"layer {entry['layer']} high_band_diff {_fmt(entry['high_band_diff'])}", file=out)
    return 0


def cmd_params(args, out) -> int:
    cfg = _run_config(args)
    model = build_model(cfg.train, cfg.vit, cfg.cnn)
    counts = parameter_counts(model)
    print(f"mode {model.mode}", file=out)
    print(f"trainable {counts['trainable']}", file=out)
    print(f"frozen {counts['frozen']}", file=out)
    print(f"total {counts['total']}", file=out)
    print(f"trainable_fraction {counts['trainable'] / counts['total']:.6f}", file=out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "fourier": cmd_fourier,
    "params": cmd_params,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except LodaError as exc:
        print(f"loda {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
