"""Command-line entry point: ``python -m ddimedit <subcommand>``.

Exit codes: 0 success, 2 usage or argument error, 3 file-format error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datasets import DATASETS, toy_datasets
from .denoiser import DenoiserConfig, init_denoiser
from .experiments import evaluate, sweep_reconstruction
from .finetune import DivergenceError, finetune_full, finetune_stepwise, precompute_latents, train_base, write_history_csv
from .formats import FormatError, load_checkpoint, read_image, save_checkpoint, write_image, write_raw_tensor
from .guidance import EditRecipe, builtin_embedders, load_anchors, load_recipe
from .pipelines import EditSession, continuous_transition, manipulate, multi_attribute, round_trip, translate_unseen
from .sampler import ddim_invert
from .schedule import make_grid, make_linear_schedule

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGENCE = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _parse_schedule(text: str):
    try:
        T, b0, b1 = text.split(":")
        return int(T), float(b0), float(b1)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected T:beta_start:beta_end, got {text!r}") from exc


def _parse_grid(text: str):
    try:
        S_for, S_gen, t0 = (int(v) for v in text.split(":"))
        return S_for, S_gen, t0
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected S_for:S_gen:t0, got {text!r}") from exc


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("images", nargs="*", type=Path, help="input .pgm/.ppm or raw-tensor files")
    p.add_argument("--dataset", choices=DATASETS, help="use generated samples instead of files")
    p.add_argument("--count", type=int, default=8, help="number of generated samples")
    p.add_argument("--size", type=int, default=None, help="side length for image datasets")


def _add_globals(p: argparse.ArgumentParser, default) -> None:
    # subcommands repeat the global flags with suppressed defaults so either position works
    zero = 0 if default is None else default
    p.add_argument("--seed", type=int, default=zero)
    p.add_argument("--schedule", type=_parse_schedule, default=default, metavar="T:BSTART:BEND")
    p.add_argument("--grid", type=_parse_grid, default=default, metavar="S_FOR:S_GEN:T0")
    p.add_argument("--recipe", type=Path, default=default, help="key=value recipe file")
    p.add_argument("--out", type=Path, default=default, help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddimedit", description="Deterministic diffusion inversion and guided editing.")
    _add_globals(ap, None)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a base denoiser on a toy dataset")
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--arch", choices=("mlp", "unet"), default="mlp")
    p.add_argument("--widths", type=_ints, default=None)
    p.add_argument("--time-embed-dim", type=int, default=32)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=64)

    for name, text in (("invert", "write latents at the return step"), ("reconstruct", "invert and regenerate")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ckpt", type=Path, required=True)
        _add_inputs(p)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a copy of the base model toward the recipe target")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--stepwise", action="store_true", help="update at every reverse step")
    p.add_argument("--embedder", choices=("channel-stats", "linear-probe"), default="channel-stats")
    p.add_argument("--anchors", type=Path, default=None)
    p.add_argument("--history", type=Path, default=None, help="CSV of per-update losses")
    _add_inputs(p)

    p = sub.add_parser("edit", parents=[common], help="manipulate images with a fine-tuned model")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--edited", type=Path, required=True)
    _add_inputs(p)

    p = sub.add_parser("translate", parents=[common], help="project to the base domain, then manipulate")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--edited", type=Path, required=True)
    p.add_argument("--k-ddpm", type=int, default=3)
    _add_inputs(p)

    p = sub.add_parser("mix", parents=[common], help="combine several fine-tuned models")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--edited", type=Path, nargs="+", required=True)
    p.add_argument("--weights", type=_floats, required=True)
    _add_inputs(p)

    p = sub.add_parser("transition", parents=[common], help="blend base and edited predictions")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--edited", type=Path, required=True)
    p.add_argument("--gamma", type=float, required=True)
    _add_inputs(p)

    p = sub.add_parser("sweep", parents=[common], help="reconstruction MAE/SSIM over return steps and grid sizes")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--t0", type=_ints, required=True)
    p.add_argument("--S", type=_ints, required=True)
    _add_inputs(p)

    p = sub.add_parser("eval", parents=[common], help="MAE/SSIM (and S_dir) between reference and output images")
    p.add_argument("--reference", type=Path, nargs="+", required=True)
    p.add_argument("--outputs", type=Path, nargs="+", required=True)
    p.add_argument("--embedder", choices=("channel-stats",), default=None)
    return ap


def _recipe(args, T: int) -> EditRecipe:
    recipe = load_recipe(args.recipe) if args.recipe else EditRecipe()
    if args.grid:
        S_for, S_gen, t0 = args.grid
        recipe = replace(recipe, S_for=S_for, S_gen=S_gen, t0=t0)
    if recipe.t0 > T:
        raise UsageError(f"return step t0={recipe.t0} exceeds T={T}; pass --grid or a recipe")
    recipe.validate(T)
    return recipe


def _load_model(path: Path, args):
    store = load_checkpoint(path)
    if args.schedule and make_linear_schedule(*args.schedule) != store.schedule:
        raise UsageError(f"--schedule disagrees with the schedule stored in {path}")
    return store


def _inputs(args) -> tuple[list[str], list[np.ndarray]]:
    if args.dataset:
        kw = {"size": args.size} if args.size and "images" in args.dataset else {}
        data = toy_datasets(args.dataset, args.count, args.seed, **kw)
        return [f"{args.dataset}-{i:03d}" for i in range(len(data))], list(data)
    if not args.images:
        raise UsageError("give input files or --dataset")
    return [p.stem for p in args.images], [read_image(p) for p in args.images]


def _check_shapes(images, shape) -> None:
    for x in images:
        if tuple(x.shape) != tuple(shape):
            raise UsageError(f"input of shape {x.shape} does not match model data shape {tuple(shape)}")


def _out_dir(args) -> Path:
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_all(args, names, arrays, suffix: str) -> None:
    out = _out_dir(args)
    for name, arr in zip(names, arrays):
        arr = np.asarray(arr)
        is_image = arr.ndim == 3 and arr.shape[0] in (1, 3)
        target = out / f"{name}_{suffix}{'.pgm' if is_image and arr.shape[0] == 1 else '.ppm' if is_image else '.rt'}"
        write_image(target, arr)
        print(target)


def _cmd_train(args) -> None:
    T, b0, b1 = args.schedule or (1000, 1e-4, 0.02)
    s = make_linear_schedule(T, b0, b1)
    kw = {"size": args.size} if args.size and "images" in args.dataset else {}
    data = toy_datasets(args.dataset, args.n, args.seed, **kw)
    shape = tuple(data.shape[1:])
    if args.arch == "unet":
        widths = tuple(args.widths or (8, 16))
        cfg = DenoiserConfig("unet", shape, widths=widths, time_embed_dim=args.time_embed_dim, max_timestep=T)
    else:
        widths = tuple(args.widths or (64, 64))
        cfg = DenoiserConfig("mlp", shape, widths=widths, time_embed_dim=args.time_embed_dim, max_timestep=T)
    store = train_base(init_denoiser(cfg, args.seed), data, s, args.steps, args.lr, np.random.default_rng(args.seed), args.batch)
    out = args.out or Path("base.ckpt")
    save_checkpoint(out, store)
    print(f"final loss {np.mean(store.history[-20:]):.6g}; wrote {out}")


def _cmd_invert(args) -> None:
    p = _load_model(args.ckpt, args)
    recipe = _recipe(args, p.schedule.T)
    names, images = _inputs(args)
    _check_shapes(images, p.data_shape)
    grid = make_grid(recipe.t0, recipe.S_for, p.schedule.T)
    out = _out_dir(args)
    for name, x in zip(names, images):
        target = out / f"{name}_latent.rt"
        write_raw_tensor(target, ddim_invert(p, x, grid, p.schedule))
        print(target)


def _cmd_reconstruct(args) -> None:
    p = _load_model(args.ckpt, args)
    recipe = _recipe(args, p.schedule.T)
    names, images = _inputs(args)
    _check_shapes(images, p.data_shape)
    outs = [round_trip(p, x, recipe.t0, recipe.S_for, recipe.S_gen) for x in images]
    _write_all(args, names, outs, "recon")
    print(f"mean MAE {evaluate(images, outs).aggregate['mae']:.6g}")


def _embedder(args, p):
    shape = p.data_shape
    if args.embedder == "channel-stats":
        if len(shape) != 3:
            raise UsageError("channel-stats needs (C, H, W) data")
        e = builtin_embedders("channel-stats", channels=shape[0])
    else:
        e = builtin_embedders("linear-probe", data_shape=shape, seed=args.seed)
    if getattr(args, "anchors", None):
        for name, vec in load_anchors(args.anchors).items():
            e.add_anchor(name, vec)
    return e


def _cmd_finetune(args) -> None:
    p = _load_model(args.ckpt, args)
    recipe = _recipe(args, p.schedule.T)
    _, images = _inputs(args)
    _check_shapes(images, p.data_shape)
    e = _embedder(args, p)
    cache = precompute_latents(p, images, recipe)
    tune = finetune_stepwise if args.stepwise else finetune_full
    store = tune(p, cache, e, recipe, np.random.default_rng(args.seed))
    out = args.out or Path(f"{recipe.y_tar}.ckpt")
    save_checkpoint(out, store)
    if args.history:
        write_history_csv(args.history, store.history)
    print(f"final directional loss {store.history[-1]['directional']:.6g}; wrote {out}")


def _session(args, base, edited_paths, recipe):
    tuned = {}
    for i, path in enumerate(edited_paths):
        tuned[f"model{i}"] = _load_model(path, args)
    recipes = {k: replace(recipe, y_tar=k) for k in tuned}
    return EditSession(base, tuned, base.schedule, args.seed, recipes)


def _cmd_edit(args) -> None:
    base = _load_model(args.ckpt, args)
    recipe = _recipe(args, base.schedule.T)
    sess = _session(args, base, [args.edited], recipe)
    names, images = _inputs(args)
    _check_shapes(images, base.data_shape)
    _write_all(args, names, [manipulate(sess, x, "model0") for x in images], "edit")


def _cmd_translate(args) -> None:
    base = _load_model(args.ckpt, args)
    recipe = _recipe(args, base.schedule.T)
    sess = _session(args, base, [args.edited], recipe)
    names, images = _inputs(args)
    _check_shapes(images, base.data_shape)
    rng = np.random.default_rng(args.seed)
    _write_all(args, names, [translate_unseen(sess, x, args.k_ddpm, "model0", rng) for x in images], "translate")


def _cmd_mix(args) -> None:
    base = _load_model(args.ckpt, args)
    recipe = _recipe(args, base.schedule.T)
    if len(args.weights) != len(args.edited):
        raise UsageError(f"{len(args.weights)} weights for {len(args.edited)} models")
    sess = _session(args, base, args.edited, recipe)
    names, images = _inputs(args)
    _check_shapes(images, base.data_shape)
    keys = [f"model{i}" for i in range(len(args.edited))]
    _write_all(args, names, [multi_attribute(sess, x, keys, args.weights, recipe) for x in images], "mix")


def _cmd_transition(args) -> None:
    base = _load_model(args.ckpt, args)
    recipe = _recipe(args, base.schedule.T)
    sess = _session(args, base, [args.edited], recipe)
    names, images = _inputs(args)
    _check_shapes(images, base.data_shape)
    outs = [continuous_transition(sess, x, "model0", args.gamma) for x in images]
    _write_all(args, names, outs, f"gamma{args.gamma:g}")


def _cmd_sweep(args) -> None:
    p = _load_model(args.ckpt, args)
    _, images = _inputs(args)
    _check_shapes(images, p.data_shape)
    table = sweep_reconstruction(p, images, args.t0, args.S)
    out = args.out or Path("sweep.csv")
    table.write_csv(out)
    for t0, S, rep in table.rows:
        agg = rep.aggregate
        print(f"t0={t0:<5d} S={S:<4d} mae={agg['mae']:.6g} ssim={agg['ssim']:.6g}")


def _cmd_eval(args) -> None:
    if len(args.reference) != len(args.outputs):
        raise UsageError("--reference and --outputs need the same number of files")
    refs = [read_image(p) for p in args.reference]
    outs = [read_image(p) for p in args.outputs]
    e = builtin_embedders("channel-stats", channels=refs[0].shape[0]) if args.embedder else None
    recipe = load_recipe(args.recipe) if args.recipe else EditRecipe()
    report = evaluate(refs, outs, e, recipe.y_ref, recipe.y_tar)
    out = args.out or Path("metrics.csv")
    report.write_csv(out)
    print(" ".join(f"{k}={v:.6g}" for k, v in report.aggregate.items()))


COMMANDS = {
    "train": _cmd_train,
    "invert": _cmd_invert,
    "reconstruct": _cmd_reconstruct,
    "finetune": _cmd_finetune,
    "edit": _cmd_edit,
    "translate": _cmd_translate,
    "mix": _cmd_mix,
    "transition": _cmd_transition,
    "sweep": _cmd_sweep,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
