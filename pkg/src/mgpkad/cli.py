"""Command-line driver.

Exit codes: 0 success, 1 validation error (bad config, inputs or files),
2 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, RunConfig, load_config
from .envelope import FormatError
from .geometry import write_obj
from .metrics import EmptyInputError
from .model import ABLATIONS, VARIANTS, load_checkpoint
from .numcore import DimensionError, NumericalError
from .prior import EmptyCategoryError, load_library

log = logging.getLogger("mgpkad")


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors; 2 is reserved for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--profile", choices=("desk", "paper"), help="default hyper-parameter set")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mgpkad", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    _common(p)

    p = sub.add_parser("build-priors", help="select and encode one prototype per category")
    _common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--library", type=Path, help="prototype library (required unless the variant drops the prior)")
    p.add_argument("--ablate", choices=("none",) + ABLATIONS, default="none")
    p.add_argument("--steps", type=int, help="override the step budget")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")

    p = sub.add_parser("reconstruct", help="extract a mesh for one instance")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--resolution", type=int, default=64)

    p = sub.add_parser("eval", help="evaluate a checkpoint, or run the ablation study")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--library", type=Path)
    p.add_argument("--split", choices=P.SPLITS, default="test")
    p.add_argument("--ablate", choices=("all",) + tuple(VARIANTS))
    p.add_argument("--steps", type=int, help="per-run step budget for the ablation study")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds for the ablation study")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable module")
    _common(p, out_required=False)
    return ap


def _config(args) -> RunConfig:
    return load_config(args.config, args.profile, args.seed)


def _check_compatible(ds: P.Dataset, cfg: RunConfig) -> None:
    if ds.n_categories != cfg.n_categories:
        raise DimensionError(f"dataset has {ds.n_categories} categories, config expects {cfg.n_categories}")
    if ds.depths.shape[1] != cfg.image_res ** 2:
        raise DimensionError(f"dataset images have {ds.depths.shape[1]} pixels, config expects {cfg.image_res ** 2}")


def _library_raw(path, cfg: RunConfig, needed: bool):
    if path is None:
        if needed:
            raise ConfigError("this variant uses the geometric prior: pass --library")
        return None, None
    lib = load_library(path)
    if lib.n_categories != cfg.n_categories:
        raise DimensionError(f"library has {lib.n_categories} categories, config expects {cfg.n_categories}")
    return lib.raw, P.file_hash(path)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = P.generate_dataset(cfg)
    m = P.save_dataset(ds, args.out, cfg)
    log.info("wrote %d instances to %s (%s)", m["n_instances"], args.out, m["split_counts"])
    return 0


def cmd_build_priors(args) -> int:
    cfg = _config(args)
    ds = P.load_dataset(args.data)
    _check_compatible(ds, cfg)
    library, rows = P.build_priors(ds, cfg)
    P.write_priors(library, rows, args.out, cfg, P.file_hash(Path(args.data) / "dataset.mgpd"))
    log.info("prototypes: %s", ", ".join(library.prototype_ids))
    return 0


def cmd_train(args) -> int:
    variant = "full" if args.ablate == "none" else args.ablate
    if args.resume is not None:
        _, _, meta = load_checkpoint(args.resume)
        cfg = RunConfig.from_dict(meta["config"])
        variant = meta["variant"]
    else:
        cfg = _config(args)
    ds = P.load_dataset(args.data)
    _check_compatible(ds, cfg)
    raw, lib_hash = _library_raw(args.library, cfg, VARIANTS[variant][1] and args.resume is None)
    result = P.train(ds, raw, cfg, variant, cfg.seed, args.steps, args.out, args.resume, log.info)
    inputs = {"dataset": P.file_hash(Path(args.data) / "dataset.mgpd")}
    if lib_hash:
        inputs["library"] = lib_hash
    if args.resume is not None:
        inputs["resume"] = P.file_hash(args.resume)
    P.write_train_manifest(result, args.out, cfg, inputs)
    return 0


def cmd_reconstruct(args) -> int:
    model, _, meta = load_checkpoint(args.checkpoint)
    ds = P.load_dataset(args.data)
    _check_compatible(ds, model.cfg)
    if args.resolution < 2:
        raise ConfigError("resolution must be at least 2")
    i = ds.find(args.instance)
    mesh, _ = P.reconstruct(model, ds, i, args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obj = out / f"{args.instance}.obj"
    write_obj(obj, mesh)
    P.write_json(out / "manifest.json", {
        "command": "reconstruct",
        "instance": args.instance,
        "resolution": args.resolution,
        "inputs": {"checkpoint": P.file_hash(args.checkpoint), "dataset": P.file_hash(Path(args.data) / "dataset.mgpd")},
        "vertices": int(len(mesh.vertices)),
        "triangles": int(len(mesh.triangles)),
        "outputs": {obj.name: P.file_hash(obj)},
    })
    if mesh.empty:
        log.warning("reconstructed mesh for %s is empty", args.instance)
    return 0


def cmd_eval(args) -> int:
    ds = P.load_dataset(args.data)
    data_hash = P.file_hash(Path(args.data) / "dataset.mgpd")
    if args.ablate is None:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint, or --ablate to run the ablation study")
        model, _, meta = load_checkpoint(args.checkpoint)
        _check_compatible(ds, model.cfg)
        reports, agg = P.evaluate(model, ds, model.cfg, args.split)
        P.write_eval_outputs(reports, agg, args.out, {
            "command": "eval", "split": args.split, "variant": model.variant,
            "param_count": model.num_params(),
            "inputs": {"checkpoint": P.file_hash(args.checkpoint), "dataset": data_hash},
        })
        log.info("mean: %s", agg.mean)
        return 0
    cfg = _config(args)
    _check_compatible(ds, cfg)
    variants = tuple(VARIANTS) if args.ablate == "all" else (args.ablate,)
    needs_prior = any(VARIANTS[v][1] for v in variants)
    raw, lib_hash = _library_raw(args.library, cfg, needs_prior)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad --seeds value {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    study = P.ablation_study(ds, raw, cfg, seeds, args.steps, variants, log.info)
    inputs = {"dataset": data_hash}
    if lib_hash:
        inputs["library"] = lib_hash
    manifest = P.write_ablation_outputs(study, args.out, {
        "command": "eval", "ablate": args.ablate, "config": cfg.to_dict(), "seeds": list(seeds),
        "steps": study["steps"], "inputs": inputs,
    })
    if manifest.get("inversions"):
        log.warning("full model does not beat every ablation: %s", ", ".join(manifest["inversions"]))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    summary = P.gradcheck_summary(P.run_gradchecks(cfg, cfg.seed))
    for name, r in summary["modules"].items():
        print(f"{name:20s} max_rel_err={r['max_rel_err']:.3e} {'ok' if r['passed'] else 'FAIL'}")
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        P.write_json(Path(args.out) / "gradcheck.json", summary)
    return 0 if summary["passed"] else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-priors": cmd_build_priors,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DimensionError, FormatError, EmptyInputError, EmptyCategoryError,
            FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
