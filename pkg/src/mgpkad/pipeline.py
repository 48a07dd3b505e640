"""End-to-end stages: dataset generation, prior construction, training, reconstruction and evaluation.

Every stage is a pure function of its config, seed and input files.
Wall-clock timings are kept out of manifests so reruns compare byte-for-byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, metrics
from .config import RunConfig
from .decoder import Decoder, sdf_loss
from .envelope import read_envelope, write_envelope
from .fusion import FusionAttention
from .geometry import FAMILIES, AnalyticShape, Mesh
from .kan import KANLinear, KANStack
from .model import VARIANTS, Model, load_checkpoint, make_optimizer, save_checkpoint
from .numcore import (
    GradcheckReport,
    Linear,
    NumericalError,
    Param,
    gradcheck,
    make_rng,
    silu,
    softplus,
    step_decay_lr,
)
from .prior import (
    PrototypeEncoder,
    PrototypeLibrary,
    ShapeInstance,
    build_library,
    canonical_surface,
    pca_projection,
    save_library,
    write_pca_csv,
)
from .spline import DegenerateRangeError

DATA_MAGIC = b"MGPD"
DATA_VERSION = 1
SPLITS = ("train", "val", "test")


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class Dataset:
    instances: list[dict]   # id, category, family, split, shape
    depths: np.ndarray      # (n, res*res)
    samples: np.ndarray     # (n, P, 4)
    surface: np.ndarray     # (n, N, 3)
    n_categories: int

    def shape(self, i: int) -> AnalyticShape:
        return AnalyticShape.from_dict(self.instances[i]["shape"])

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, inst in enumerate(self.instances) if inst["split"] == split], dtype=np.int64)

    def categories(self) -> np.ndarray:
        return np.array([inst["category"] for inst in self.instances], dtype=np.int64)

    def find(self, instance_id: str) -> int:
        for i, inst in enumerate(self.instances):
            if inst["id"] == instance_id:
                return i
        raise KeyError(f"no instance named {instance_id!r}")


def split_counts(n: int, train: float, val: float) -> tuple[int, int, int]:
    """Largest-remainder rounding of ``n`` into train/val/test counts."""
    target = np.array([train, val, 1.0 - train - val]) * n
    counts = np.floor(target).astype(int)
    order = np.argsort(-(target - counts), kind="stable")
    for j in order[: n - counts.sum()]:
        counts[j] += 1
    return int(counts[0]), int(counts[1]), int(counts[2])


def assign_splits(categories: np.ndarray, n_categories: int, train: float, val: float,
                  rng: np.random.Generator) -> list[str]:
    """Stratified split: instances are shuffled within category, interleaved across categories, then cut."""
    per_cat = [rng.permutation(np.nonzero(categories == c)[0]) for c in range(n_categories)]
    interleaved = []
    for r in range(max(len(p) for p in per_cat)):
        interleaved.extend(int(p[r]) for p in per_cat if r < len(p))
    n_tr, n_va, _ = split_counts(len(categories), train, val)
    out = [""] * len(categories)
    for rank, i in enumerate(interleaved):
        out[i] = "train" if rank < n_tr else ("val" if rank < n_tr + n_va else "test")
    return out


def generate_dataset(cfg: RunConfig) -> Dataset:
    instances, depths, samples, surface = [], [], [], []
    cats = []
    for c in range(cfg.n_categories):
        for j in range(cfg.instances_per_category):
            rng = make_rng(cfg.seed, 1, c, j)
            shape = geometry.random_shape(c, rng)
            inst_seed = int(rng.integers(2**31 - 1))
            instances.append({"id": f"{FAMILIES[c].name}_{j:03d}", "category": c, "family": FAMILIES[c].name,
                              "shape": shape.to_dict(), "seed": inst_seed})
            cats.append(c)
            depths.append(geometry.render_depth(shape, cfg.image_res).flat())
            samples.append(geometry.sample_training_points(shape, cfg.samples_per_shape, inst_seed))
            surface.append(canonical_surface(shape, cfg.surface_points, inst_seed))
    splits = assign_splits(np.array(cats), cfg.n_categories, cfg.split_train, cfg.split_val,
                           make_rng(cfg.seed, 2))
    for inst, s in zip(instances, splits):
        inst["split"] = s
    return Dataset(instances, np.stack(depths), np.stack(samples), np.stack(surface), cfg.n_categories)


def save_dataset(ds: Dataset, out_dir, cfg: RunConfig) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"instances": ds.instances, "n_categories": ds.n_categories}
    write_envelope(out / "dataset.mgpd", DATA_MAGIC, DATA_VERSION, meta,
                   {"depths": ds.depths, "samples": ds.samples, "surface": ds.surface})
    counts = {s: int(len(ds.indices(s))) for s in SPLITS}
    manifest = {
        "command": "gen-data",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "n_instances": len(ds.instances),
        "split_counts": counts,
        "split_categories": {s: sorted({ds.instances[i]["category"] for i in ds.indices(s)}) for s in SPLITS},
        "outputs": {"dataset.mgpd": file_hash(out / "dataset.mgpd")},
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(data_dir) -> Dataset:
    path = Path(data_dir)
    if path.is_dir():
        path = path / "dataset.mgpd"
    meta, arrays = read_envelope(path, DATA_MAGIC, DATA_VERSION)
    return Dataset(meta["instances"], arrays["depths"], arrays["samples"], arrays["surface"], meta["n_categories"])


# ---------------------------------------------------------------------------
# Priors


def build_priors(ds: Dataset, cfg: RunConfig) -> tuple[PrototypeLibrary, list]:
    """Select one prototype per category from the train split only and encode it."""
    train = set(ds.indices("train").tolist())
    by_cat: list[list[ShapeInstance]] = [[] for _ in range(cfg.n_categories)]
    for i, inst in enumerate(ds.instances):
        if i in train:
            by_cat[inst["category"]].append(
                ShapeInstance(inst["id"], inst["category"], ds.shape(i), ds.surface[i], inst["seed"]))
    encoder = PrototypeEncoder(cfg.d_p, make_rng(cfg.seed, 102))
    library = build_library(by_cat, cfg.prototype_points, encoder, cfg.seed)
    return library, pca_projection(library)


def write_priors(library: PrototypeLibrary, pca_rows, out_dir, cfg: RunConfig, data_hash: str) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_library(out / "library.mgpk", library)
    write_pca_csv(out / "pca.csv", pca_rows)
    manifest = {
        "command": "build-priors",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {"dataset": data_hash},
        "prototype_ids": library.prototype_ids,
        "shape": [library.n_categories, library.points_per_prototype, library.feature_dim],
        "outputs": {f: file_hash(out / f) for f in ("library.mgpk", "pca.csv")},
    }
    write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    lrs: list[float]
    steps: int
    checkpoints: list[str] = field(default_factory=list)
    adaptations: list[int] = field(default_factory=list)
    seconds: float = 0.0


def sample_batch(ds: Dataset, train_idx: np.ndarray, cfg: RunConfig, seed: int, step: int):
    """Instances and query points for one step; depends only on ``(seed, step)``."""
    rng = make_rng(seed, 2000, step)
    inst = rng.choice(train_idx, cfg.batch_size, replace=len(train_idx) < cfg.batch_size)
    q = rng.integers(0, ds.samples.shape[1], size=(cfg.batch_size, cfg.queries_per_shape))
    rows = ds.samples[inst[:, None], q].reshape(-1, 4)
    index = np.repeat(np.arange(cfg.batch_size), cfg.queries_per_shape)
    return inst, rows[:, :3], rows[:, 3:4], index


def train(ds: Dataset, library_raw, cfg: RunConfig, variant: str = "full", seed: int | None = None,
          steps: int | None = None, out_dir=None, resume=None, log=None) -> TrainResult:
    seed = cfg.seed if seed is None else seed
    train_idx = ds.indices("train")
    total = steps if steps is not None else cfg.train_steps(len(train_idx))
    start = 0
    if resume is not None:
        model, opt, meta = load_checkpoint(resume)
        start = meta["step"]
        total = meta.get("extra", {}).get("total_steps", total)
    else:
        model = Model(cfg, library_raw, variant, seed)
        opt = make_optimizer(model, cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, [], [], total)
    cats = ds.categories()
    adapt_until = int(cfg.adapt_fraction * total)
    last_good = str(resume) if resume is not None else None
    t0 = time.perf_counter()
    for step in range(start, total):
        inst, pts, gt, index = sample_batch(ds, train_idx, cfg, model.seed, step)
        opt.zero_grad()
        pred = model.forward(ds.depths[inst], cats[inst], pts, index)
        loss, g = sdf_loss(pred, gt, cfg.delta)
        if not math.isfinite(loss) or not np.all(np.isfinite(pred)):
            raise NumericalError(f"non-finite loss at step {step + 1}; last good checkpoint: {last_good or 'none'}")
        model.backward(g)
        lr = step_decay_lr(cfg.lr, step, total)
        opt.set_lr(lr)
        opt.step()
        result.losses.append(loss)
        result.lrs.append(lr)
        n = step + 1
        if n % cfg.adapt_every == 0 and n <= adapt_until:
            try:
                if model.decoder.adapt_grids(cfg.grid_eps, cfg.grid_normalize):
                    result.adaptations.append(n)
            except DegenerateRangeError:
                pass
        if out is not None and (n % cfg.ckpt_every == 0 or n == total):
            path = out / f"ckpt_{n:06d}.mgpc"
            save_checkpoint(path, model, opt, n, {"total_steps": total})
            result.checkpoints.append(path.name)
            last_good = str(path)
        if log is not None and (n % 100 == 0 or n == total):
            log(f"step {n}/{total} loss {loss:.6f} lr {lr:.3g}")
    result.seconds = time.perf_counter() - t0
    if out is not None:
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for i, (l, r) in enumerate(zip(result.losses, result.lrs)):
                w.writerow([start + i + 1, repr(l), repr(r)])
        if result.checkpoints:
            (out / "model.mgpc").write_bytes((out / result.checkpoints[-1]).read_bytes())
    return result


def write_train_manifest(result: TrainResult, out_dir, cfg: RunConfig, inputs: dict) -> dict:
    out = Path(out_dir)
    m = result.model
    manifest = {
        "command": "train",
        "config": cfg.to_dict(),
        "seed": m.seed,
        "variant": m.variant,
        "steps": result.steps,
        "inputs": inputs,
        "param_count": m.num_params(),
        "param_groups": m.group_param_counts(),
        "grid_adaptations": result.adaptations,
        "loss_first": result.losses[0] if result.losses else None,
        "loss_last": result.losses[-1] if result.losses else None,
        "checkpoints": {name: file_hash(out / name) for name in result.checkpoints},
        "outputs": {f: file_hash(out / f) for f in ("loss.csv", "model.mgpc") if (out / f).exists()},
    }
    write_json(out / "manifest.json", manifest)
    write_json(out / "timing.json", {"train_seconds": result.seconds})
    return manifest


# ---------------------------------------------------------------------------
# Reconstruction and evaluation


def predict_grid(model: Model, ds: Dataset, i: int, resolution: int) -> np.ndarray:
    f_img, f_geo = model.encode(ds.depths[i : i + 1], [ds.instances[i]["category"]])
    vals = model.decode(geometry.grid_points(resolution), f_img, f_geo)
    return vals.reshape(resolution, resolution, resolution)


def reconstruct(model: Model, ds: Dataset, i: int, resolution: int = 64) -> tuple[Mesh, np.ndarray]:
    grid = predict_grid(model, ds, i, resolution)
    if not np.all(np.isfinite(grid)):
        raise NumericalError(f"non-finite SDF predicted for {ds.instances[i]['id']}")
    return geometry.marching_cubes(grid, 0.0), grid


def eval_config(cfg: RunConfig) -> metrics.EvalConfig:
    return metrics.EvalConfig(cfg.eval_samples, cfg.fscore_tau, cfg.delta, cfg.eval_resolution,
                              cfg.gt_resolution, cfg.seed)


class GroundTruthCache:
    """Ground-truth surface samples are expensive (a fine marching-cubes pass); compute each once."""

    def __init__(self, ds: Dataset, ecfg: metrics.EvalConfig):
        self.ds, self.ecfg, self._store = ds, ecfg, {}

    def __getitem__(self, i: int):
        if i not in self._store:
            self._store[i] = metrics.gt_surface(self.ds.shape(i), self.ecfg)
        return self._store[i]


def evaluate(model: Model, ds: Dataset, cfg: RunConfig, split: str = "test",
             gt: GroundTruthCache | None = None) -> tuple[list[metrics.MetricReport], metrics.Aggregate]:
    ecfg = eval_config(cfg)
    gt = gt or GroundTruthCache(ds, ecfg)
    reports = []
    for i in ds.indices(split):
        mesh, grid = reconstruct(model, ds, int(i), ecfg.grid_resolution)
        inst = ds.instances[i]
        reports.append(metrics.evaluate_instance(mesh, grid, ds.shape(int(i)), ecfg, inst["category"],
                                                 inst["id"], None if mesh.empty else gt[int(i)]))
    return reports, metrics.aggregate(reports)


TABLE_COLUMNS = (("CD", "cd"), ("F-score", "fscore"), ("NC", "nc"), ("IoU", "iou"), ("PSNR-proxy", "psnr_sdf"))


def write_eval_outputs(reports, agg: metrics.Aggregate, out_dir, manifest_extra: dict) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [c for c, _ in TABLE_COLUMNS])
        for cat, vals in agg.per_category.items():
            w.writerow([FAMILIES[cat].name] + [repr(vals[k]) for _, k in TABLE_COLUMNS])
        w.writerow(["mean"] + [repr(agg.mean[k]) for _, k in TABLE_COLUMNS])
    report = {
        "instances": [r.to_dict() for r in reports],
        "per_category": {FAMILIES[c].name: v for c, v in agg.per_category.items()},
        "mean": agg.mean,
        "excluded": agg.excluded,
    }
    write_json(out / "report.json", report)
    manifest = dict(manifest_extra)
    manifest["outputs"] = {f: file_hash(out / f) for f in ("metrics.csv", "report.json")}
    write_json(out / "manifest.json", manifest)
    return report


# ---------------------------------------------------------------------------
# Ablation study


def ablation_study(ds: Dataset, library_raw, cfg: RunConfig, seeds=(0, 1, 2), steps: int | None = None,
                   variants=tuple(VARIANTS), log=None) -> dict:
    """Train and evaluate every variant under identical seeds, data order and step budget."""
    steps = steps if steps is not None else cfg.ablation_budget(len(ds.indices("train")))
    gt = GroundTruthCache(ds, eval_config(cfg))
    rows: dict[str, dict] = {}
    timing: dict[str, float] = {}
    for v in variants:
        per_seed = []
        for s in seeds:
            t0 = time.perf_counter()
            res = train(ds, library_raw, cfg, v, s, steps)
            _, agg = evaluate(res.model, ds, cfg, "test", gt)
            timing[f"{v}/{s}"] = time.perf_counter() - t0
            per_seed.append({"seed": s, "loss_last": res.losses[-1], **agg.mean, "excluded": agg.excluded})
            if log:
                log(f"{v} seed {s}: cd {agg.mean['cd']:.4f} nc {agg.mean['nc']:.4f}")
        model = res.model
        rows[v] = {
            "param_count": model.num_params(),
            "head_param_count": model.decoder.head_params(),
            "per_seed": per_seed,
            "median": {k: float(np.median([r[k] for r in per_seed])) for k in metrics.METRIC_KEYS},
        }
    study = {"steps": steps, "seeds": list(seeds), "variants": rows}
    if "full" in rows:
        full = rows["full"]["median"]
        checks = {}
        for v in rows:
            if v == "full":
                continue
            m = rows[v]["median"]
            checks[v] = {"cd_better": full["cd"] < m["cd"], "nc_better": full["nc"] > m["nc"]}
        study["ordering"] = checks
        study["inversions"] = sorted(f"{v}:{k}" for v, c in checks.items() for k, ok in c.items() if not ok)
        study["full_beats_all"] = not study["inversions"]
    if "mlp-head" in rows and "full" in rows:
        ratio = rows["mlp-head"]["head_param_count"] / rows["full"]["head_param_count"]
        study["mlp_head_ratio"] = ratio
    study["_timing"] = timing
    return study


def write_ablation_outputs(study: dict, out_dir, manifest_extra: dict) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = study.pop("_timing", {})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "params"] + [c for c, _ in TABLE_COLUMNS])
        for v, row in study["variants"].items():
            w.writerow([v, row["param_count"]] + [repr(row["median"][k]) for _, k in TABLE_COLUMNS])
    write_json(out / "ablation.json", study)
    manifest = dict(manifest_extra)
    manifest["param_counts"] = {v: r["param_count"] for v, r in study["variants"].items()}
    manifest["ordering"] = study.get("ordering")
    manifest["inversions"] = study.get("inversions")
    manifest["outputs"] = {f: file_hash(out / f) for f in ("ablation.csv", "ablation.json")}
    write_json(out / "manifest.json", manifest)
    write_json(out / "timing.json", timing)
    return manifest


# ---------------------------------------------------------------------------
# Gradient checks


def _jitter(named, rng, scale=0.1):
    for _, p in named:
        p.value += rng.normal(0.0, scale, size=p.shape)


def run_gradchecks(cfg: RunConfig, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                   max_entries: int = 48) -> dict[str, GradcheckReport]:
    """Finite-difference checks over every differentiable building block and the full pipeline.

    Small-init output layers are jittered first so that every path carries
    a gradient well above roundoff.
    """
    rng = make_rng(seed, 404)
    reports: dict[str, GradcheckReport] = {}

    def elementwise(fn_name, fn, grad_fn):
        x = Param(rng.normal(0.0, 3.0, size=(6, 5)), "x")
        x.value[0, 0], x.value[0, 1] = 35.0, -35.0

        def bwd(g):
            x.grad += g * grad_fn(x.value)

        reports[fn_name] = gradcheck(lambda: fn(x.value), bwd, [("x", x)], h, tol, seed)

    from .numcore import silu_grad, softplus_grad
    elementwise("silu", silu, silu_grad)
    elementwise("softplus", softplus, softplus_grad)

    lin = Linear(7, 5, rng, "lin")
    lin.b.value[...] = rng.normal(size=lin.b.shape)
    xl = Param(rng.normal(size=(4, 7)), "x")

    def lin_b(g):
        xl.grad += lin.backward(g)

    reports["linear"] = gradcheck(lambda: lin.forward(xl.value), lin_b, lin.named_params() + [("x", xl)], h, tol, seed)

    kl = KANLinear(5, 4, grid_size=cfg.grid_size, spline_order=cfg.spline_order, rng=rng, bias=True)
    kl.w_spline.value[...] = rng.normal(0.0, 0.5, size=kl.w_spline.shape)
    kl.spline_scaler.value[...] = rng.uniform(0.5, 1.5, size=kl.spline_scaler.shape)
    xk = Param(rng.uniform(-0.9, 0.9, size=(8, 5)), "x")

    def kl_b(g):
        xk.grad += kl.backward(g)

    reports["kan_linear"] = gradcheck(lambda: kl.forward(xk.value), kl_b, kl.named_params() + [("x", xk)], h, tol, seed)

    ks = KANStack(cfg.kan_dims, cfg.grid_size, cfg.spline_order, rng)
    _jitter(ks.named_params(), rng)
    xs = Param(rng.uniform(-1.0, 1.0, size=(6, cfg.kan_dims[0])), "x")

    def ks_b(g):
        xs.grad += ks.backward(g)

    reports["kan_stack"] = gradcheck(lambda: ks.forward(xs.value), ks_b, ks.named_params() + [("x", xs)],
                                     h, tol, seed, max_entries)

    fu = FusionAttention(cfg.d_img, cfg.n_categories, cfg.d_p, cfg.d_model, cfg.d_geo, cfg.heads, cfg.alpha, rng)
    fi = Param(rng.normal(size=(3, cfg.d_img)), "f_img")
    tok = Param(rng.normal(size=(cfg.n_categories * 4, cfg.d_p)), "tokens")
    tcat = np.repeat(np.arange(cfg.n_categories), 4)
    fcat = np.arange(3) % cfg.n_categories

    def fu_b(g):
        a, b = fu.backward(g)
        fi.grad += a
        tok.grad += b

    reports["fusion"] = gradcheck(lambda: fu.forward(fi.value, fcat, tok.value, tcat), fu_b,
                                  fu.named_params() + [("f_img", fi), ("tokens", tok)], h, tol, seed, max_entries)

    pe = PrototypeEncoder(cfg.d_p, rng)
    raw = Param(rng.normal(0.0, 0.5, size=(6, 4)), "raw")

    def pe_b(g):
        raw.grad += pe.backward(g)

    reports["prototype_encoder"] = gradcheck(lambda: pe.forward(raw.value), pe_b, pe.named_params() + [("raw", raw)],
                                             h, tol, seed, max_entries)

    for head in ("kan", "mlp", "linear"):
        dec = Decoder(cfg.d_img, cfg.d_geo, cfg.kan_dims, cfg.frontend_hidden, cfg.pos_freqs, head, True,
                      cfg.grid_size, cfg.spline_order, seed)
        _jitter(dec.named_params(), rng, 0.05)
        pts = rng.uniform(-1.0, 1.0, size=(6, 3))
        di = Param(rng.normal(size=(2, cfg.d_img)), "f_img")
        dg = Param(rng.normal(size=(2, cfg.d_geo)), "f_geo")
        idx = np.array([0, 1, 0, 1, 1, 0])

        def dec_b(g, dec=dec, di=di, dg=dg):
            a, b = dec.backward(g)
            di.grad += a
            dg.grad += b

        name = "decoder" if head == "kan" else f"decoder_{head}"
        reports[name] = gradcheck(lambda dec=dec, pts=pts, di=di, dg=dg, idx=idx: dec.forward(pts, di.value, dg.value, idx),
                                  dec_b, dec.named_params() + [("f_img", di), ("f_geo", dg)], h, tol, seed, max_entries)

    raw_lib = rng.normal(0.0, 0.5, size=(cfg.n_categories, 8, 4))
    model = Model(cfg, raw_lib, "full", seed)
    _jitter(model.named_params(), rng, 0.05)
    depths = rng.uniform(0.0, 2.0, size=(2, cfg.image_res ** 2))
    mcat = np.array([0, 1])
    mpts = rng.uniform(-1.0, 1.0, size=(4, 3))
    midx = np.array([0, 1, 1, 0])
    reports["model"] = gradcheck(lambda: model.forward(depths, mcat, mpts, midx), model.backward,
                                 model.named_params(), h, tol, seed, max_entries // 2)
    return reports


def gradcheck_summary(reports: dict[str, GradcheckReport]) -> dict:
    return {
        "passed": all(r.passed for r in reports.values()),
        "modules": {k: {"max_rel_err": r.max_rel_err, "passed": r.passed, "n_checked": r.n_checked,
                        "worst": r.location} for k, r in reports.items()},
    }
