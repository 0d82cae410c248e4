"""``voxdiff`` command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 missing artifact,
4 numerical failure.  Errors go to standard error with the config path.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from .autodiff import CheckpointError
from .config import RunConfig, load_config
from .dataset import ToySceneConfig, generate_toy_scenes, height_crop, import_raw, load_preset
from .denoiser import build_unet, load_model, save_model
from .diffusion import stream
from .export import write_ply, write_slice_csv
from .grid import GridFormatError, SemanticGrid, load_sgrid, save_sgrid
from .metrics import evaluate, retrieve_nearest
from .pyramid import GenerateOptions, PyramidModels, generate_many
from .subdivision import generate_infinite
from .training import (
    FinetunePlan,
    ScaleData,
    TrainingDiverged,
    finetune,
    pyramid_scale_data,
    train_scale,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


# -- helpers --------------------------------------------------------------------


def _grid_files(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise MissingArtifact(f"{path} does not exist")
    files = sorted(path.glob("*.sgrid"))
    if not files:
        raise MissingArtifact(f"no .sgrid files in {path}")
    return files


def _load_grids(path) -> tuple[list[str], list[SemanticGrid]]:
    files = _grid_files(path)
    return [f.name for f in files], [load_sgrid(f) for f in files]


def _checkpoint(cfg: RunConfig, level: int, infinite=False, directory=None) -> Path:
    root = Path(directory) if directory else cfg.checkpoint_dir(infinite)
    return root / f"scale{level}.vdck"


def _load_models(cfg: RunConfig, start=1, infinite=False, directory=None) -> PyramidModels:
    models = []
    for level in range(1, cfg.pyramid.levels + 1):
        if level < start:
            models.append(None)
            continue
        path = _checkpoint(cfg, level, infinite, directory)
        if not path.exists():
            raise MissingArtifact(f"checkpoint {path} not found; run `voxdiff train` first")
        model = load_model(path)
        if model.num_classes != cfg.num_classes:
            raise ValueError(f"{path} has K={model.num_classes}, config says {cfg.num_classes}")
        need = cfg.condition_channels(level, infinite)
        if model.condition_channels != need:
            raise ValueError(f"{path} takes {model.condition_channels} condition channels, config needs {need}")
        models.append(model)
    return PyramidModels(models)


def _save_outputs(per_seed, seeds, out, intermediates: bool) -> list[Path]:
    """One file per seed: ``out`` itself for a single scene, else ``out/sample_<seed>.sgrid``."""
    out = Path(out)
    single = len(seeds) == 1 and out.suffix == ".sgrid"
    written = []
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for seed, scales in zip(seeds, per_seed):
        target = out if single else out / f"sample_{seed:05d}.sgrid"
        target.parent.mkdir(parents=True, exist_ok=True)
        save_sgrid(scales[-1], target)
        written.append(target)
        if intermediates:
            for level, g in enumerate(scales[:-1], start=1):
                save_sgrid(g, target.with_name(f"{target.stem}.scale{level}.sgrid"))
    return written


def _seeds(args, cfg: RunConfig) -> list[int]:
    base = cfg.seed if args.seed is None else args.seed
    return [base + i for i in range(args.count)]


# -- commands -------------------------------------------------------------------


def cmd_make_toy(args, cfg: RunConfig):
    dims = tuple(args.dims) if args.dims else cfg.pyramid.scales[-1].dims
    shift = {}
    for item in args.shift or []:
        name, _, value = item.partition("=")
        shift[name] = float(value)
    toy = ToySceneConfig(dims, cfg.num_classes, cfg.seed if args.seed is None else args.seed, shift=shift)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(generate_toy_scenes(toy, args.count, args.start)):
        save_sgrid(g, out / f"scene_{args.start + i:05d}.sgrid")
    print(f"wrote {args.count} scenes of {dims} to {out}")


def cmd_preprocess(args, cfg: RunConfig):
    remap = load_preset(args.remap) if args.remap else None
    K = remap.num_classes if remap else cfg.num_classes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            inputs += sorted(q for q in p.iterdir() if q.suffix in (".bin", ".label"))
        elif p.exists():
            inputs.append(p)
        else:
            raise MissingArtifact(f"{p} does not exist")
    for p in inputs:
        g = import_raw(p, args.dims, K, args.dtype, remap)
        if args.keep_layers:
            g = height_crop(g, args.keep_layers)
        save_sgrid(g, out / (p.stem + ".sgrid"))
    print(f"wrote {len(inputs)} scenes to {out}")


def _scale_data(cfg: RunConfig, level: int, infinite: bool) -> ScaleData:
    if infinite:
        coarse = cfg.pyramid.scales[level - 2].dims if level > 1 else None
        return ScaleData(cfg.pyramid.scales[level - 1].dims, coarse, None, cfg.pyramid.saf_mode, cfg.infinite_overlap)
    if cfg.layout is not None and level == cfg.pyramid.levels:
        tile = cfg.layout.tiles[0].dims
        return pyramid_scale_data(cfg.pyramid, level, tile, cfg.layout.overlap_ratio)
    return pyramid_scale_data(cfg.pyramid, level)


def cmd_train(args, cfg: RunConfig):
    infinite = args.mode == "infinite"
    names, scenes = _load_grids(args.data or cfg.path("data"))
    finest = cfg.pyramid.scales[-1].dims
    for name, g in zip(names, scenes):
        if g.dims != finest or g.num_classes != cfg.num_classes:
            raise ValueError(f"{name}: {g.dims} K={g.num_classes}; config expects {finest} K={cfg.num_classes}")
    out = Path(args.checkpoints) if args.checkpoints else cfg.checkpoint_dir(infinite)
    out.mkdir(parents=True, exist_ok=True)
    levels = args.scales or list(range(1, cfg.pyramid.levels + 1))
    bad = [lv for lv in levels if not 1 <= lv <= cfg.pyramid.levels]
    if bad:
        raise ValueError(f"scales {bad} are outside 1..{cfg.pyramid.levels}")

    def log(level):
        def emit(stats):
            if not args.quiet:
                print(f"scale {level} epoch {stats.epoch}: loss {stats.mean_total:.5f}", file=sys.stderr)
        return emit

    if args.finetune_from:
        src = [_checkpoint(cfg, lv, infinite, args.finetune_from) for lv in range(1, cfg.pyramid.levels + 1)]
        for p in src:
            if not p.exists():
                raise MissingArtifact(f"checkpoint {p} not found")
        plan = FinetunePlan(src, levels, cfg.train.epochs)
        models = finetune(plan, scenes, cfg.train, cfg.pyramid, cfg.schedule, lambda lv: _scale_data(cfg, lv, infinite))
        for level, model in enumerate(models.models, start=1):
            save_model(model, out / f"scale{level}.vdck")
        print(f"fine-tuned scales {sorted(set(levels))}; checkpoints in {out}")
        return
    for level in levels:
        cond = cfg.condition_channels(level, infinite)
        # three-part key keeps initialisation apart from the epoch/step streams
        model = build_unet(cfg.model, cfg.num_classes, cond, rng=stream(cfg.train.seed, level, 0, 0))
        start = time.perf_counter()
        result = train_scale(
            model, scenes, cfg.schedule, cfg.train, _scale_data(cfg, level, infinite),
            csv_path=out / f"scale{level}_loss.csv", dump_dir=out, log=log(level),
        )
        save_model(result.model, out / f"scale{level}.vdck")
        final = result.curve[-1].mean_total
        print(f"scale {level}: {result.steps} steps in {time.perf_counter() - start:.1f}s, final loss {final:.5f}")


def cmd_sample(args, cfg: RunConfig):
    models = _load_models(cfg, directory=args.checkpoints)
    seeds = _seeds(args, cfg)
    opts = GenerateOptions(
        deterministic=args.deterministic or cfg.deterministic,
        layout=cfg.layout,
        keep_intermediates=args.intermediates,
    )
    out = generate_many(models, cfg.pyramid, cfg.schedule, seeds, opts)
    for path in _save_outputs(out, seeds, args.out, args.intermediates):
        print(path)


def cmd_refine(args, cfg: RunConfig):
    coarse = load_sgrid(args.coarse)
    dims = [s.dims for s in cfg.pyramid.scales[:-1]]
    if coarse.dims not in dims:
        raise ValueError(f"coarse scene {coarse.dims} matches none of the scales {dims}")
    start = dims.index(coarse.dims) + 2
    models = _load_models(cfg, start, directory=args.checkpoints)
    seeds = _seeds(args, cfg)
    opts = GenerateOptions(
        deterministic=args.deterministic or cfg.deterministic,
        start_from_scale=start,
        coarse_scene=coarse,
        layout=cfg.layout,
        keep_intermediates=args.intermediates,
    )
    out = generate_many(models, cfg.pyramid, cfg.schedule, seeds, opts)
    for path in _save_outputs(out, seeds, args.out, args.intermediates):
        print(path)


def cmd_infinite(args, cfg: RunConfig):
    models = _load_models(cfg, infinite=True, directory=args.checkpoints)
    seed = cfg.seed if args.seed is None else args.seed
    ratio = cfg.infinite_overlap if args.overlap is None else args.overlap
    out = generate_infinite(
        models, cfg.pyramid, cfg.schedule, (args.rows, args.cols), seed, ratio,
        deterministic=args.deterministic or cfg.deterministic, keep_intermediates=True,
    )
    written = _save_outputs([out], [seed], args.out, args.intermediates)
    print(f"{written[0]} {out[-1].dims}")


def _flat_report(report: dict) -> list[tuple[str, object]]:
    rows = []
    for key, value in report.items():
        if isinstance(value, dict):
            rows += [(f"{key}.{k}", v) for k, v in value.items()]
        elif isinstance(value, list):
            rows += [(f"{key}.{i}", v) for i, v in enumerate(value)]
        else:
            rows.append((key, value))
    return rows


def cmd_eval(args, cfg: RunConfig):
    gen_names, gen = _load_grids(args.gen)
    ref_names, ref = _load_grids(args.ref)
    pairs = None
    if sorted(gen_names) == sorted(ref_names):
        by_name = dict(zip(ref_names, ref))
        pairs = [(g, by_name[n]) for n, g in zip(gen_names, gen)]
    ev = cfg.raw["eval"]
    report = evaluate(gen, ref, pairs, ev.get("ignore_index", 0), sigma=ev.get("sigma"))
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            writer.writerows(_flat_report(report))


def cmd_retrieve(args, cfg: RunConfig):
    q_names, queries = _load_grids(args.gen)
    c_names, corpus = _load_grids(args.corpus)
    res = retrieve_nearest(queries, corpus, args.percentiles)
    print("percentile,ssim")
    for p, v in res.percentiles.items():
        print(f"{p},{v:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query", "match", "ssim"])
            for name, idx, s in zip(q_names, res.index, res.best_ssim):
                writer.writerow([name, c_names[idx], repr(float(s))])


def cmd_export(args, cfg: RunConfig):
    g = load_sgrid(args.input)
    out = Path(args.out)
    count = write_ply(g, out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".slices.csv")
    write_slice_csv(g, csv_path)
    print(f"{out}: {count} points; {csv_path}")


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--threads", type=int, help="cap numeric threads (fallback: VOXDIFF_THREADS)")

    parser = argparse.ArgumentParser(prog="voxdiff", description="Pyramid discrete diffusion for semantic voxel scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", parents=[common], help="write procedural toy scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--shift", action="append", metavar="PRIMITIVE=MULT",
                   help="density multiplier, e.g. vehicle=3")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("preprocess", parents=[common], help="raw label volumes to .sgrid")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, required=True)
    p.add_argument("--dtype", default="u1", choices=["u1", "u2"])
    p.add_argument("--remap", help="preset name or JSON table")
    p.add_argument("--keep-layers", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train per-scale denoisers")
    p.add_argument("--data")
    p.add_argument("--checkpoints")
    p.add_argument("--mode", choices=["pyramid", "infinite"], default="pyramid")
    p.add_argument("--scales", type=int, nargs="+", help="1-based scales to train (default all)")
    p.add_argument("--finetune-from", help="checkpoint directory to fine-tune from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("sample", cmd_sample, "unconditional generation"),
        ("refine", cmd_refine, "generation from a given coarse scene"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "refine":
            p.add_argument("--coarse", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--count", type=int, default=1)
        p.add_argument("--out", required=True, help=".sgrid file (one scene) or directory")
        p.add_argument("--checkpoints")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--intermediates", action="store_true", help="also write every coarser scale")
        p.set_defaults(func=func)

    p = sub.add_parser("infinite", parents=[common], help="tile an unbounded scene")
    p.add_argument("--rows", type=int, default=2)
    p.add_argument("--cols", type=int, default=2)
    p.add_argument("--overlap", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoints")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--intermediates", action="store_true")
    p.set_defaults(func=cmd_infinite)

    p = sub.add_parser("eval", parents=[common], help="metric report")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", parents=[common], help="nearest-neighbour SSIM table")
    p.add_argument("--gen", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--percentiles", type=float, nargs="+", default=[10, 50, 90])
    p.add_argument("--csv")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("export", parents=[common], help="PLY point cloud and per-slice CSV")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_export)
    return parser


def _thread_limit(args):
    n = args.threads
    if n is None and os.environ.get("VOXDIFF_THREADS"):
        n = int(os.environ["VOXDIFF_THREADS"])
    if n is None:
        return nullcontext()
    if n < 1:
        raise ValueError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    where = args.config or "<defaults>"

    def fail(code, exc):
        print(f"voxdiff {args.command}: error: {exc} [config: {where}]", file=sys.stderr)
        return code

    try:
        with _thread_limit(args):
            cfg = load_config(args.config, args.set)
            args.func(args, cfg)
    except (FloatingPointError, TrainingDiverged) as exc:
        return fail(EXIT_NUMERIC, exc)
    except (FileNotFoundError, CheckpointError, GridFormatError) as exc:
        return fail(EXIT_MISSING, exc)
    except (ValueError, KeyError, TypeError) as exc:
        return fail(EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
