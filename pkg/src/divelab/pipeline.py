"""Pipeline stages over one output directory.

Each stage reads its declared inputs, writes its outputs, and records a
manifest fragment under ``manifests/``; ``manifest.json`` at the run root is
rebuilt atomically after every stage.  Directory layout::

    world/images/*.png  world/meta.json  world/features.dive
    subject/betas.bin  subject/meta.json  subject/ground_truth.dive
    encoder/encoder.dive  encoder/regions.json  encoder/r2.csv  encoder/loss.csv
    autoencoder/autoencoder.dive
    diffusion/diffusion.dive  diffusion/loss.csv
    clusters/<region>.csv  clusters/sets.json  clusters/silhouette.csv
    generated/<set>/chainNNN.png  activations.csv  trace.csv  snapshots/
    rankings/<set>_<source>.csv
    evaluation/specificity.csv  specificity.svg  contrast.csv
    report/specificity_table.csv  specificity_table.svg  summary.md
"""
from __future__ import annotations

import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from importlib import metadata

import numpy as np
import torch

from . import io
from .autoencoder import Autoencoder, fit_autoencoder
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import NoiseSchedule, init_denoiser, sample, train_denoiser
from .encoder import EncoderHead, evaluate_r2, fit_head
from .errors import ArgumentError, DependencyError, DiveError
from .evaluation import ImageGroup, build_prototypes, contrast_report, specificity_report
from .features import FeatureExtractor
from .guidance import generate_guided, region_objective
from .regions import (cluster_gap, cosine_to_center, normalize_rows, rank_images,
                      silhouette_report, vmf_cluster)
from .subject import (GroundTruthSubject, SubjectDataset, average_repeats, compute_tstats,
                      make_subject, normalize_sessions, preferred_mask, select_voxels,
                      simulate_recordings)
from .world import make_world, render_exemplars

log = logging.getLogger("divelab")

STAGES = ("world-gen", "subject-sim", "fit-encoder", "train-ae", "train-diffusion", "cluster",
          "generate", "rank", "evaluate", "report")
UNGUIDED = "unguided"


class LockError(DiveError, RuntimeError):
    pass


def tool_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@contextmanager
def output_lock(out):
    """At most one writer per output directory."""
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{path} exists; another command is writing to {out}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def pin_torch_threads():
    # intra-op reductions are split by thread count, which changes float bits;
    # parallelism comes from worker processes over independent jobs instead
    torch.set_num_threads(1)


class Run:
    """One output directory plus the config it was produced with."""

    def __init__(self, cfg: RunConfig, out=None):
        self.cfg = cfg
        self.out = os.path.abspath(out or cfg.out)

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def require(self, *parts):
        p = self.path(*parts)
        if not os.path.exists(p):
            raise DependencyError(f"missing upstream artifact {p}", p)
        return p

    # --------------------------------------------------------------- manifest

    def record(self, stage, outputs, seconds, extra=None):
        frag = {
            "stage": stage,
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "tool_version": tool_version(),
            "seconds": round(seconds, 3),
            "outputs": {os.path.relpath(p, self.out): file_digest(p) for p in sorted(outputs)},
        }
        if extra:
            frag.update(extra)
        io.write_json(self.path("manifests", f"{stage}.json"), frag)
        self.rebuild_manifest()
        return frag

    def rebuild_manifest(self):
        frags = {}
        d = self.path("manifests")
        for stage in STAGES:
            p = os.path.join(d, f"{stage}.json")
            if os.path.exists(p):
                frags[stage] = io.read_json(p)
        gammas = frags.get("generate", {}).get("gamma", {})
        manifest = {
            "config_hash": self.cfg.config_hash(),
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "tool_version": tool_version(),
            "gamma": gammas,
            "checkpoints": {k: v for f in frags.values() for k, v in f["outputs"].items()
                            if k.endswith(".dive")},
            "timings": {s: f["seconds"] for s, f in frags.items()},
            "stages": frags,
        }
        io.write_json(self.path("manifest.json"), manifest)

    # --------------------------------------------------------------- loaders

    def world_meta(self):
        return io.read_json(self.require("world", "meta.json"))

    def world_images(self):
        meta = self.world_meta()
        return io.read_image_dir(self.require("world", "images"), meta["ids"]), meta

    def extractor(self):
        arrays, meta = load_checkpoint(self.require("world", "features.dive"))
        f = {k.split(".", 1)[1]: v for k, v in arrays.items()}
        return FeatureExtractor.from_arrays(f, tuple(meta["image_shape"]), meta["shrinkage"])

    def raw_dataset(self):
        images, wmeta = self.world_images()
        meta = io.read_json(self.require("subject", "meta.json"))
        betas = io.read_betas(self.require("subject", "betas.bin"), meta["shape"])
        return SubjectDataset(images, wmeta["ids"], np.asarray(wmeta["labels"]),
                              tuple(wmeta["categories"]), betas, np.asarray(meta["column_image"]),
                              np.asarray(meta["column_session"]), np.asarray(meta["column_repeat"]),
                              np.asarray(meta["heldout"], dtype=bool))

    def averaged_dataset(self):
        return average_repeats(normalize_sessions(self.raw_dataset()))

    def ground_truth(self):
        arrays, meta = load_checkpoint(self.require("subject", "ground_truth.dive"))
        subs = {int(k.rsplit(".", 1)[1]): v for k, v in arrays.items()
                if k.startswith("truth.subcluster_directions.")}
        return GroundTruthSubject(arrays["truth.W"], arrays["truth.b"], arrays["truth.region"],
                                  arrays["truth.subcluster"], arrays["truth.noise_sd"],
                                  arrays["truth.prototypes"], subs, tuple(meta["categories"]))

    def head(self):
        arrays, meta = load_checkpoint(self.require("encoder", "encoder.dive"))
        return EncoderHead(arrays["encoder.W"], arrays["encoder.b"], meta.get("extractor_id", ""))

    def voxel_sets(self, include_clusters=True):
        sets = {k: np.asarray(v["indices"], dtype=np.int64)
                for k, v in io.read_json(self.require("encoder", "regions.json")).items()}
        p = self.path("clusters", "sets.json")
        if include_clusters and os.path.exists(p):
            sets.update({k: np.asarray(v["indices"], dtype=np.int64)
                         for k, v in io.read_json(p).items()})
        return sets

    def autoencoder(self):
        arrays, meta = load_checkpoint(self.require("autoencoder", "autoencoder.dive"))
        arrays = {k.split(".", 1)[1]: v for k, v in arrays.items()}
        return Autoencoder.from_arrays(arrays, tuple(meta["image_shape"]), self.cfg.autoencoder_config(),
                                       meta.get("reconstruction_mse", 0.0))

    def denoiser(self):
        arrays, meta = load_checkpoint(self.require("diffusion", "diffusion.dive"))
        schedule = NoiseSchedule.from_alpha_bar(arrays["schedule.alpha_bar"], meta["schedule_name"])
        model = init_denoiser(tuple(meta["data_shape"]), schedule, self.cfg.denoiser_config(), 0)
        state = {k[len("denoiser."):]: torch.as_tensor(v) for k, v in arrays.items()
                 if k.startswith("denoiser.")}
        model.net.load_state_dict(state)
        model.net.eval()
        return model, schedule

    def generated(self, name):
        d = self.require("generated", name)
        header, rows = io.read_csv(os.path.join(d, "activations.csv"))
        ids = [r[0] for r in rows]
        return io.read_image_dir(d, ids), ids, np.array([float(r[1]) for r in rows])


# ------------------------------------------------------------------- stages


def world_gen(run: Run):
    cfg = run.cfg
    wcfg = cfg.world_config()
    world = make_world(wcfg, cfg.seed)
    images = io.quantize(world.images)
    io.write_image_dir(run.path("world", "images"), images, world.ids)
    meta = {"ids": world.ids, "labels": world.labels.tolist(), "categories": list(world.categories),
            "families": list(wcfg.families), "size": wcfg.size}
    io.write_json(run.path("world", "meta.json"), meta)
    f = cfg["features"]
    ext = FeatureExtractor(int(f["n_components"]), float(f["shrinkage"]), images.shape[1:]).fit(images)
    save_checkpoint(run.path("world", "features.dive"),
                    {f"features.{k}": v for k, v in ext.to_arrays().items()},
                    {"image_shape": list(images.shape[1:]), "shrinkage": float(f["shrinkage"])})
    return [run.path("world", "meta.json"), run.path("world", "features.dive")], {}


def subject_sim(run: Run):
    cfg = run.cfg
    images, wmeta = run.world_images()
    from .world import World
    world = World(images, np.asarray(wmeta["labels"]), tuple(wmeta["categories"]), wmeta["ids"],
                  cfg.seed)
    ext = run.extractor()
    scfg = cfg.subject_config()
    subj = make_subject(world, ext, scfg, cfg.seed)
    s = cfg["subject"]
    ds = simulate_recordings(subj, world, int(s["sessions"]), int(s["repeats"]), cfg.seed,
                             float(s["heldout_fraction"]), scfg.session_offset_sd)
    io.write_betas(run.path("subject", "betas.bin"), ds.betas)
    io.write_json(run.path("subject", "meta.json"), {
        "shape": list(ds.betas.shape), "dtype": "float32-le", "layout": "voxels x presentations",
        "column_image": ds.column_image.tolist(), "column_session": ds.column_session.tolist(),
        "column_repeat": ds.column_repeat.tolist(), "heldout": ds.heldout.tolist(),
        "categories": list(ds.category_names)})
    arrays = {"truth.W": subj.W, "truth.b": subj.b, "truth.region": subj.region,
              "truth.subcluster": subj.subcluster, "truth.noise_sd": subj.noise_sd,
              "truth.prototypes": subj.prototypes}
    for c, dirs in sorted(subj.subcluster_directions.items()):
        arrays[f"truth.subcluster_directions.{c}"] = dirs
    save_checkpoint(run.path("subject", "ground_truth.dive"), arrays,
                    {"categories": list(subj.categories)})
    outs = [run.path("subject", p) for p in ("betas.bin", "meta.json", "ground_truth.dive")]
    return outs, {"n_voxels": int(subj.N)}


def fit_encoder(run: Run):
    cfg = run.cfg
    ds = run.averaged_dataset()
    ext = run.extractor()
    head, history = fit_head(ds, ext, cfg.fit_config(), logger=log)
    save_checkpoint(run.path("encoder", "encoder.dive"), {"encoder.W": head.W, "encoder.b": head.b},
                    {"extractor": "world/features.dive"})
    himg, hbetas = ds.heldout_arrays()
    r2 = evaluate_r2(head, ext, himg, hbetas)
    io.write_csv(run.path("encoder", "r2.csv"), ["voxel", "r2"], enumerate(r2),
                 ["held-out R^2 per voxel; empty/nan marks an undefined value"])
    io.write_csv(run.path("encoder", "loss.csv"), ["epoch", "loss"], enumerate(history))
    thr = float(cfg["subject"]["t_threshold"])
    tstats = np.stack([compute_tstats(ds, c) for c in range(len(ds.category_names))])
    regions = {}
    for c, name in enumerate(ds.category_names):
        vs = select_voxels(tstats[c], thr, preferred_mask(tstats, c, name), category=name)
        regions[name] = {"indices": vs.indices.tolist(), "provenance": vs.provenance}
    io.write_json(run.path("encoder", "regions.json"), regions)
    roi = np.unique(np.concatenate([v["indices"] for v in regions.values()])).astype(np.int64)
    med = float(np.nanmedian(r2[roi])) if roi.size else float("nan")
    outs = [run.path("encoder", p) for p in ("encoder.dive", "r2.csv", "loss.csv", "regions.json")]
    return outs, {"median_roi_r2": med, "roi_sizes": {k: len(v["indices"]) for k, v in regions.items()}}


def train_ae(run: Run):
    images, _ = run.world_images()
    acfg = run.cfg.autoencoder_config()
    ae = fit_autoencoder(images, acfg, run.cfg.seed, image_shape=images.shape[1:])
    save_checkpoint(run.path("autoencoder", "autoencoder.dive"),
                    {f"ae.{k}": v for k, v in ae.state_arrays().items()},
                    {"mode": ae.mode, "image_shape": list(ae.image_shape),
                     "latent_shape": list(ae.latent_shape),
                     "reconstruction_mse": ae.reconstruction_mse})
    return [run.path("autoencoder", "autoencoder.dive")], {"reconstruction_mse": ae.reconstruction_mse}


def train_diffusion(run: Run):
    cfg = run.cfg
    images, _ = run.world_images()
    ae = run.autoencoder()
    latents = np.concatenate([ae.encode(images[i:i + 256]) for i in range(0, len(images), 256)])
    schedule = cfg.schedule()
    model, history = train_denoiser(latents, schedule, cfg.denoiser_config(), cfg.seed,
                                    log_every=500, logger=log)
    arrays = {f"denoiser.{k}": v for k, v in model.state_arrays().items()}
    arrays["schedule.alpha_bar"] = schedule.alpha_bar
    save_checkpoint(run.path("diffusion", "diffusion.dive"), arrays,
                    {"data_shape": list(model.data_shape), "schedule_name": schedule.name})
    io.write_csv(run.path("diffusion", "loss.csv"), ["step", "loss"], enumerate(history))
    tail = float(np.mean(history[-200:])) if history else float("nan")
    return [run.path("diffusion", "diffusion.dive"), run.path("diffusion", "loss.csv")], \
        {"final_loss": tail}


def cluster(run: Run, k=None):
    cfg = run.cfg
    c = cfg["clustering"]
    k = int(k or c["k"])
    head = run.head()
    regions = run.voxel_sets(include_clusters=False)
    sets, outs, extra = {}, [], {}
    for name in c["regions"]:
        idx = regions[name]
        rows = normalize_rows(head.W[idx])
        model = vmf_cluster(rows.unit, k, cfg.seed, int(c["max_iters"]), int(c["n_restarts"]))
        vox = idx[rows.kept]
        cos = cosine_to_center(rows.unit, model)
        path = run.path("clusters", f"{name}.csv")
        io.write_csv(path, ["voxel", "cluster", "cosine_to_center"],
                     zip(vox, model.assignments, cos),
                     [f"region: {name}", f"k: {k}", f"objective: {model.objective!r}",
                      f"iterations: {model.n_iter}", f"excluded: {idx[rows.excluded].tolist()}",
                      f"reseeds: {model.reseeds}"])
        outs.append(path)
        for j in range(k):
            sets[f"{name}.c{j}"] = {"indices": vox[model.assignments == j].tolist(),
                                    "provenance": {"region": name, "cluster": j, "k": k}}
        gap = cluster_gap(model)
        path = run.path("clusters", f"{name}_gap.csv")
        io.write_csv(path, ["cluster"] + [f"c{j}" for j in range(k)],
                     [[i] + list(r) for i, r in enumerate(gap)])
        outs.append(path)
        sil = silhouette_report(rows.unit, tuple(c["silhouette_ks"]), cfg.seed)
        path = run.path("clusters", f"{name}_silhouette.csv")
        io.write_csv(path, ["k", "silhouette_cosine"], sorted(sil.items()),
                     ["informational only; k is fixed by configuration"])
        outs.append(path)
        extra[name] = {"objective": model.objective, "min_gap": float(gap[np.triu_indices(k, 1)].min())}
    io.write_json(run.path("clusters", "sets.json"), sets)
    outs.append(run.path("clusters", "sets.json"))
    return outs, {"clusters": extra}


def _write_generated(run, name, images, activation, trace=None, snapshot_chains=0, ids=None):
    d = run.path("generated", name)
    ids = ids or [f"chain{c:03d}" for c in range(len(images))]
    io.write_image_dir(d, images, ids)
    io.write_csv(os.path.join(d, "activations.csv"), ["image", "activation"], zip(ids, activation))
    outs = [os.path.join(d, "activations.csv")] + [os.path.join(d, f"{i}.png") for i in ids]
    if trace is not None:
        io.write_csv(os.path.join(d, "trace.csv"), ["step", "objective", "grad_norm"],
                     trace.mean_rows(), ["means over chains"])
        outs.append(os.path.join(d, "trace.csv"))
        for k, snap in zip(trace.snapshot_steps, trace.snapshots):
            for c in range(min(snapshot_chains, len(snap))):
                p = os.path.join(d, "snapshots", f"chain{c}_step{k}.png")
                io.write_png(p, snap[c])
    return outs


def _guided_job(job):
    S, model, schedule, ae, head, ext, gcfg, n, seed = job
    t0 = time.time()
    batch = generate_guided(model, schedule, ae, head, ext, S, gcfg, n, seed)
    return batch, time.time() - t0


def generate(run: Run, voxel_sets=None, gamma=None):
    cfg = run.cfg
    g = cfg["guidance"]
    gcfg = cfg.guidance_config()
    if gamma is not None:
        gcfg.gamma = float(gamma)
    n = int(g["n_samples"])
    model, schedule = run.denoiser()
    ae = run.autoencoder()
    head = run.head()
    ext = run.extractor()
    sets = run.voxel_sets()
    names = list(voxel_sets) if voxel_sets else list(sets)
    for name in names:
        if name not in sets:
            raise DependencyError(f"voxel set {name!r} not found (run fit-encoder/cluster first)",
                                  run.path("clusters", "sets.json"))
    outs = []
    latents = sample(model, schedule, n, gcfg.steps, gcfg.eta, cfg.seed)
    images = np.clip(ae.decode(latents), 0.0, 1.0)
    all_idx = np.arange(head.N)
    outs += _write_generated(run, UNGUIDED, images, region_objective(head, ext, all_idx, images))
    jobs = [(name, sets[name]) for name in names]
    workers = min(run.cfg.resolved_threads(), len(jobs))
    args = (model, schedule, ae, head, ext, gcfg, n, cfg.seed)
    if workers > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=pin_torch_threads) as pool:
            batches = list(pool.map(_guided_job, [(S,) + args for _, S in jobs]))
    else:
        batches = [_guided_job((S,) + args) for _, S in jobs]
    gammas = {}
    for (name, _), (batch, seconds) in zip(jobs, batches):
        gammas[name] = batch.gamma
        outs += _write_generated(run, name, batch.images, batch.activation, batch.trace,
                                 int(g["snapshot_chains"]))
        log.info("generated %s (gamma %.4g) in %.1fs", name, batch.gamma, seconds)
    calibrated = gamma is None and cfg["guidance"]["gamma"] is None
    return outs, {"gamma": gammas, "gamma_calibrated": calibrated, "voxel_sets": names}


def rank(run: Run, voxel_sets=None, k=None):
    cfg = run.cfg
    top_k = int(k or cfg["evaluation"]["rank_top_k"])
    ds = run.averaged_dataset()
    head = run.head()
    ext = run.extractor()
    sets = run.voxel_sets()
    names = list(voxel_sets) if voxel_sets else list(sets)
    outs = []
    for name in names:
        if name not in sets:
            raise DependencyError(f"voxel set {name!r} not found", run.path("encoder", "regions.json"))
        S = sets[name]
        rk = rank_images(ds.betas.T, ds.image_ids, S, min(top_k, len(ds.image_ids)), "recorded")
        p = run.path("rankings", f"{name}_recorded.csv")
        io.write_csv(p, ["rank", "image", "score"], rk.rows(), ["source: recorded"])
        outs.append(p)
        if os.path.isdir(run.path("generated", name)):
            imgs, ids, _ = run.generated(name)
            scores = region_objective(head, ext, S, imgs)
            rk = rank_images(scores[:, None], ids, [0], min(top_k, len(ids)), "generated")
            p = run.path("rankings", f"{name}_generated.csv")
            io.write_csv(p, ["rank", "image", "score"], rk.rows(), ["source: generated"])
            outs.append(p)
    return outs, {}


def _ranked_recorded(ds, S):
    order = rank_images(ds.betas.T, ds.image_ids, S, len(ds.image_ids))
    pos = {name: i for i, name in enumerate(ds.image_ids)}
    return ds.images[[pos[i] for i in order.ids]]


def _ranked_generated(run, name, head, ext, S):
    imgs, ids, _ = run.generated(name)
    scores = region_objective(head, ext, S, imgs)
    order = rank_images(scores[:, None], ids, [0], len(ids), "generated")
    pos = {n: i for i, n in enumerate(ids)}
    return imgs[[pos[i] for i in order.ids]]


def evaluate(run: Run, tier=None):
    cfg = run.cfg
    ev = cfg["evaluation"]
    ds = run.averaged_dataset()
    head = run.head()
    ext = run.extractor()
    sets = run.voxel_sets()
    wcfg = cfg.world_config()
    ex = render_exemplars(wcfg, int(ev["exemplars_per_category"]), cfg.seed)
    protos = build_prototypes(ext, {wcfg.categories[c]: io.quantize(v) for c, v in ex.items()},
                              list(wcfg.categories), ev["prototype_mode"])
    rec_tiers = [float(t) for t in ev["recorded_tiers"]]
    gen_tiers = [float(t) for t in ev["generated_tiers"]]
    if tier is not None:
        rec_tiers = gen_tiers = [float(tier)]
    rows = []
    for c, name in enumerate(ds.category_names):
        S = sets[name]
        groups = [("recorded", ImageGroup(f"{name}/recorded", _ranked_recorded(ds, S), c), rec_tiers)]
        if os.path.isdir(run.path("generated", name)):
            groups.append(("generated", ImageGroup(f"{name}/generated",
                                                   _ranked_generated(run, name, head, ext, S), c,
                                                   "generated"), gen_tiers))
        for source, grp, tiers in groups:
            rep = specificity_report([grp], protos, ext, tiers)
            for r in rep.rows:
                rows.append((name, source, r.tier, r.n, r.matched, r.unclassifiable, r.percent))
    outs = []
    p = run.path("evaluation", "specificity.csv")
    io.write_csv(p, ["category", "source", "tier", "n", "matched", "unclassifiable", "percent"], rows,
                 ["forced-choice match rate with the region's preferred category",
                  "automated image metrics stand in for human judgments"])
    outs.append(p)
    p = run.path("evaluation", "specificity.svg")
    io.write_svg(p, _specificity_svg(rows, list(ds.category_names)))
    outs.append(p)
    contrast_rows = []
    for region in cfg["clustering"]["regions"]:
        names = sorted(k for k in sets if k.startswith(region + ".c"))
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                if not all(os.path.isdir(run.path("generated", n)) for n in (names[i], names[j])):
                    continue
                a, _, _ = run.generated(names[i])
                b, _, _ = run.generated(names[j])
                metrics = ["saturation", "luminance", "dispersion", f"prototype:{region}"]
                for r in contrast_report(a, b, metrics, ext, protos, cfg.seed, int(ev["bootstrap"])):
                    contrast_rows.append((names[i], names[j], r.metric, r.mean_a, r.mean_b,
                                          r.difference, r.ci_low, r.ci_high))
    p = run.path("evaluation", "contrast.csv")
    io.write_csv(p, ["group_a", "group_b", "metric", "mean_a", "mean_b", "difference", "ci_low",
                     "ci_high"], contrast_rows,
                 ["95% percentile bootstrap CI of mean(A) - mean(B)",
                  "automated image metrics stand in for human judgments"])
    outs.append(p)
    return outs, {"n_prototypes": int(sum(len(v) for v in protos.vectors))}


def _specificity_svg(rows, categories):
    series = []
    for r in rows:
        key = f"{r[1]} {r[2]}"
        if key not in series:
            series.append(key)
    vals = [[next((r[6] for r in rows if r[0] == c and f"{r[1]} {r[2]}" == s), None)
             for s in series] for c in categories]
    return io.bar_chart_svg(categories, series, vals, "Forced-choice specificity",
                            "% matching preferred category",
                            note="automated metrics stand in for human judgments")


def report(run: Run):
    header, rows = io.read_csv(run.require("evaluation", "specificity.csv"))
    table = [(r[0], r[1], r[2], r[6]) for r in rows]
    p1 = run.path("report", "specificity_table.csv")
    io.write_csv(p1, ["category", "source", "tier", "percent"], table,
                 ["percent of top-tier images classified as the preferred category"])
    cats = list(dict.fromkeys(r[0] for r in rows))
    p2 = run.path("report", "specificity_table.svg")
    io.write_svg(p2, _specificity_svg([tuple(r[:6]) + (float(r[6]),) for r in rows], cats))
    lines = ["# Run report", "", f"config hash: `{run.cfg.config_hash()}`", "",
             "| category | source | tier | percent |", "|---|---|---|---|"]
    lines += [f"| {c} | {s} | {t} | {float(v):.1f} |" for c, s, t, v in table]
    cpath = run.path("evaluation", "contrast.csv")
    if os.path.exists(cpath):
        _, crow = io.read_csv(cpath)
        lines += ["", "| A | B | metric | A-B | 95% CI |", "|---|---|---|---|---|"]
        lines += [f"| {r[0]} | {r[1]} | {r[2]} | {float(r[5]):.4f} | [{float(r[6]):.4f}, {float(r[7]):.4f}] |"
                  for r in crow]
    mpath = run.path("manifests", "generate.json")
    if os.path.exists(mpath):
        lines += ["", "guidance scale per voxel set:", ""]
        lines += [f"- {k}: {v:.6g}" for k, v in io.read_json(mpath)["gamma"].items()]
    lines += ["", "Human studies are replaced by automated image metrics; no equivalence is claimed."]
    p3 = run.path("report", "summary.md")
    io.atomic_write_bytes(p3, ("\n".join(lines) + "\n").encode())
    return [p1, p2, p3], {"rows": len(table)}


COMMANDS = {
    "world-gen": world_gen,
    "subject-sim": subject_sim,
    "fit-encoder": fit_encoder,
    "train-ae": train_ae,
    "train-diffusion": train_diffusion,
    "cluster": cluster,
    "generate": generate,
    "rank": rank,
    "evaluate": evaluate,
    "report": report,
}


def run_stage(run: Run, stage, **options):
    """Run one stage under the output lock and record its manifest fragment."""
    if stage not in COMMANDS:
        raise ArgumentError(f"unknown stage {stage!r}")
    pin_torch_threads()
    with output_lock(run.out):
        t0 = time.time()
        outputs, extra = COMMANDS[stage](run, **{k: v for k, v in options.items() if v is not None})
        return run.record(stage, outputs, time.time() - t0, extra)


def run_all(run: Run, stages=STAGES):
    return [run_stage(run, s) for s in stages]
