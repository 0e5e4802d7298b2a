"""Command-line entry point: ``cooccur <subcommand> [--config F] [--seed S] [--threads N] [--out D]``.

Every subcommand writes its artifacts into ``--out`` together with
``run_manifest.json`` (full config, config hash, seed, artifact digests).
Failures print one line ``error: <category>: <message>`` to stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, derive_int, derive_rng, make_config, read_config_file

log = logging.getLogger("cooccur")

EXIT_CODES = {"config": 2, "input": 3, "format": 4, "data": 5, "internal": 1}
MANIFEST = "run_manifest.json"


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.data_dir)
    if not d.is_dir():
        raise CliError("config", f"data_dir does not exist: {d}")
    return d


def _load_net(cfg: RunConfig):
    from .nnet import load_params
    if not cfg.weights:
        raise CliError("config", "no weights path given")
    p = Path(cfg.weights)
    if not p.is_file():
        raise CliError("config", f"weights file not found: {p}")
    return load_params(p)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(cfg: RunConfig, command: str, out: Path, artifacts: list[Path]) -> None:
    rec = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "artifacts": {str(Path(a).relative_to(out)): _sha256(a) for a in sorted(artifacts)},
    }
    with open(out / MANIFEST, "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _mosaic_files(d: Path):
    manifest = d / "mosaics.jsonl"
    if not manifest.is_file():
        raise CliError("input", f"{d} holds no mosaics.jsonl (run gen-data with domain=patches)")
    from .data import load_image, read_pgm16
    images, regions, names = [], [], []
    with open(manifest) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                images.append(load_image(d / rec["path"]))
                regions.append(read_pgm16(d / rec["regions"]).astype(np.int64) if rec.get("regions") else None)
                names.append(rec["path"])
    if not images:
        raise CliError("input", f"{manifest} is empty")
    return images, regions, names


def _frame_data(d: Path):
    from .data import load_image, read_frame_manifest
    from .data.primitives import to_primitive
    p = d / "frames.jsonl"
    if not p.is_file():
        raise CliError("input", f"{d} holds no frames.jsonl (run gen-data with domain=frames)")
    records = read_frame_manifest(p)
    frames = [load_image(r.path) for r in records]
    return records, frames, np.stack([to_primitive(f) for f in frames])


def _photo_data(d: Path):
    from .data import load_image, read_photo_manifest
    from .data.primitives import to_primitive
    p = d / "photos.jsonl"
    if not p.is_file():
        raise CliError("input", f"{d} holds no photos.jsonl (run gen-data with domain=photos)")
    records = read_photo_manifest(p)
    photos = [load_image(r.path) for r in records]
    return records, photos, np.stack([to_primitive(f) for f in photos])


def _sample_pairs(cfg: RunConfig, n: int, stream: str, balance="C"):
    """Pairs for the configured domain, drawn from the named seed stream."""
    from .data import sample_frame_pairs, sample_geo_pairs, sample_patch_pairs
    d = _data_dir(cfg)
    rng = derive_rng(cfg.seed, stream)
    if cfg.domain == "patches":
        images, regions, _ = _mosaic_files(d)
        gt = regions if all(r is not None for r in regions) else None
        return sample_patch_pairs(images, n, rng, gt=gt, balance=balance)
    if cfg.domain == "frames":
        records, _, prims = _frame_data(d)
        return sample_frame_pairs(records, prims, n, rng)
    records, _, prims = _photo_data(d)
    return sample_geo_pairs(records, prims, n, rng)


def _positives_by_q(pairs):
    """Subset with c = 1 and a known q (the Q-evaluation protocol)."""
    keep = np.flatnonzero((pairs.c == 1) & (pairs.q >= 0))
    return pairs.subset(keep)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    from .data import write_manifest, write_pgm16, write_ppm
    from .data.synth import (GeoConfig, MosaicConfig, SceneVideoConfig, gen_geo_collection,
                             gen_mosaic_dataset, gen_scene_video)
    out = _out_dir(cfg)
    rng = derive_rng(cfg.seed, f"gen-data/{cfg.domain}")
    written = []
    if cfg.domain == "patches":
        mc = MosaicConfig(n_images=cfg.n_images, min_regions=cfg.min_regions, max_regions=cfg.max_regions)
        ds = gen_mosaic_dataset(mc, rng)
        (out / "images").mkdir(exist_ok=True)
        (out / "regions").mkdir(exist_ok=True)
        with open(out / "mosaics.jsonl", "w") as fh:
            for i, (img, lab) in enumerate(zip(ds.images, ds.regions)):
                ip, rp = f"images/{i:05d}.ppm", f"regions/{i:05d}.pgm"
                write_ppm(out / ip, img)
                write_pgm16(out / rp, lab)
                written += [out / ip, out / rp]
                fh.write(json.dumps({"path": ip, "regions": rp}, sort_keys=True) + "\n")
        written.append(out / "mosaics.jsonl")
    elif cfg.domain == "frames":
        records = []
        (out / "frames").mkdir(exist_ok=True)
        bounds = {}
        for m in range(cfg.n_movies):
            v = gen_scene_video(SceneVideoConfig(n_scenes=cfg.n_scenes, movie=f"movie{m:03d}"), rng)
            for rec, frame in zip(v.records, v.frames):
                write_ppm(out / rec.path, frame)
                written.append(out / rec.path)
            records += v.records
            bounds[f"movie{m:03d}"] = v.boundaries
        write_manifest(out / "frames.jsonl", records)
        with open(out / "scene_boundaries.json", "w") as fh:
            json.dump(bounds, fh, sort_keys=True)
        written += [out / "frames.jsonl", out / "scene_boundaries.json"]
    else:
        gc = GeoConfig(n_styles=cfg.n_styles, places_per_style=cfg.places_per_style,
                       photos_per_place=cfg.photos_per_place)
        col = gen_geo_collection(gc, rng)
        (out / "photos").mkdir(exist_ok=True)
        for rec, img in zip(col.records, col.photos):
            write_ppm(out / rec.path, img)
            written.append(out / rec.path)
        write_manifest(out / "photos.jsonl", col.records)
        written.append(out / "photos.jsonl")
    return written


def cmd_train(cfg: RunConfig) -> list[Path]:
    from .nnet import SiameseNet, TrainConfig, save_params, train
    out = _out_dir(cfg)
    pairs = _sample_pairs(cfg, cfg.n_pairs, f"train/pairs/{cfg.domain}")
    init = derive_int(cfg.seed, "train/init")
    net = SiameseNet.for_patches(init) if cfg.domain == "patches" else SiameseNet.for_frames(init)
    tc = TrainConfig(learning_rate=cfg.learning_rate, momentum=cfg.momentum, batch_size=cfg.batch_size,
                     epochs=cfg.epochs, lr_decay_factor=cfg.lr_decay_factor,
                     lr_decay_every=cfg.lr_decay_every or None, seed=derive_int(cfg.seed, "train/sgd"),
                     label_source=cfg.label_source)
    if cfg.label_source == "Q" and not pairs.has_q:
        raise CliError("data", "label_source=Q but the dataset carries no Q labels")
    net, history = train(net, pairs, tc, log=log.info)
    save_params(net, out / "weights.bin")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])
    return [out / "weights.bin", out / "loss.csv"]


def cmd_eval_affinity(cfg: RunConfig) -> list[Path]:
    from .affinity import AffinityMeasure, evaluate_C, evaluate_Q, write_report
    measures = cfg.measure_list()
    net = _load_net(cfg) if "learned" in measures else None
    out = _out_dir(cfg)
    c_set = _sample_pairs(cfg, cfg.eval_pairs, f"eval/C/{cfg.domain}")
    if cfg.domain == "patches":
        q_set = _sample_pairs(cfg, cfg.eval_pairs, f"eval/Q/{cfg.domain}", balance="Q")
    else:
        q_set = _positives_by_q(c_set)
    rows = []
    for kind in measures:
        try:
            m = AffinityMeasure(kind, net=net if kind == "learned" else None)
        except ValueError as exc:
            raise CliError("config", str(exc)) from exc
        rows.append({"measure": kind, "task": "C", "domain": cfg.domain, "n": len(c_set), "AP": evaluate_C(m, c_set)})
        if len(q_set) and (q_set.q == 1).any():
            rows.append({"measure": kind, "task": "Q", "domain": cfg.domain, "n": len(q_set), "AP": evaluate_Q(m, q_set)})
    write_report(out / "affinity_ap.csv", rows)
    return [out / "affinity_ap.csv"]


def cmd_propose(cfg: RunConfig) -> list[Path]:
    from .data import write_ppm
    from .proposals import (PatchGraphSpec, abo, generate_proposals, gt_objects, proposals_to_json,
                            recall_at_jaccard, render_overlay, write_metrics_csv, write_proposals_json)
    net = _load_net(cfg)
    images, regions, names = _mosaic_files(_data_dir(cfg))
    out = _out_dir(cfg)
    (out / "overlays").mkdir(exist_ok=True)
    spec = PatchGraphSpec(stride=cfg.patch_stride, alpha=cfg.patch_alpha)
    records, rows, written = [], [], []
    for idx, (img, lab, name) in enumerate(zip(images, regions, names)):
        props = generate_proposals(img, net, spec, (cfg.k_min, cfg.k_max), cfg.proposal_restarts,
                                   seed=derive_int(cfg.seed, f"propose/{name}"), **cfg.eigenmap_kw())
        records.append(proposals_to_json(name, props, img.shape))
        ov = out / "overlays" / f"{idx:05d}.ppm"
        write_ppm(ov, render_overlay(img, props, cfg.overlays))
        written.append(ov)
        if lab is not None:
            gt = gt_objects(lab)
            rows.append({"image": name, "n": cfg.top_n, "abo": abo(props, gt, cfg.top_n),
                         "recall": recall_at_jaccard(props, gt, 0.5, cfg.top_n)})
    write_proposals_json(out / "proposals.json", records)
    written.append(out / "proposals.json")
    if rows:
        rows.append({"image": "mean", "n": cfg.top_n, "abo": float(np.mean([r["abo"] for r in rows])),
                     "recall": float(np.mean([r["recall"] for r in rows]))})
        write_metrics_csv(out / "proposal_metrics.csv", rows)
        written.append(out / "proposal_metrics.csv")
    return written


def _measure(cfg: RunConfig):
    from .affinity import AffinityMeasure
    try:
        return AffinityMeasure(cfg.measure, net=_load_net(cfg) if cfg.measure == "learned" else None)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc


def cmd_segment_movie(cfg: RunConfig) -> list[Path]:
    from .data import write_ppm
    from .scenes import (alpha_sweep, boundaries_from_labels, default_k, render_barcode,
                         write_boundaries_csv, write_pr_csv)
    measure = _measure(cfg)
    d = _data_dir(cfg)
    records, frames, prims = _frame_data(d)
    out = _out_dir(cfg)
    written = []
    for movie in sorted({r.movie for r in records}):
        idx = sorted((i for i, r in enumerate(records) if r.movie == movie), key=lambda i: records[i].t)
        times = [records[i].t for i in idx]
        chapters = [records[i].chapter for i in idx]
        if any(c is None for c in chapters):
            raise CliError("data", f"movie {movie} lacks chapter labels needed for ground truth")
        gt = boundaries_from_labels(times, chapters)
        k = cfg.scene_k or default_k(times)
        best, rows = alpha_sweep(times, prims[idx], measure, gt, cfg.alpha_list(), k=k,
                                 tolerance=cfg.tolerance, scaling=cfg.scaling, window=cfg.window,
                                 seed=derive_int(cfg.seed, f"segment/{movie}"),
                                 restarts=cfg.kmeans_restarts, eigenmap_kw=cfg.eigenmap_kw())
        chosen = next(r for r in rows if r.alpha == best)
        paths = [out / f"{movie}_boundaries.csv", out / f"{movie}_pr.csv", out / f"{movie}_barcode.ppm"]
        write_boundaries_csv(paths[0], chosen.boundaries)
        write_pr_csv(paths[1], rows)
        write_ppm(paths[2], render_barcode([frames[i] for i in idx], times, chosen.boundaries, gt))
        written += paths
    return written


def cmd_cluster_places(cfg: RunConfig) -> list[Path]:
    from .data import write_ppm
    from .places import (build_photo_graph, montage, purity_sweep, subsample, write_assignment_csv,
                         write_purity_csv)
    measure = _measure(cfg)
    records, photos, prims = _photo_data(_data_dir(cfg))
    keep = subsample(len(records), cfg.max_photos, derive_int(cfg.seed, "places/subsample"))
    if len(keep) < len(records):
        log.warning("subsampled %d of %d photos", len(keep), len(records))
    records = [records[i] for i in keep]
    photos = [photos[i] for i in keep]
    prims = prims[keep]
    scaling = cfg.scaling if cfg.measure == "learned" else "exponential"
    graph = build_photo_graph(prims, measure, alpha=cfg.place_alpha, scaling=scaling, cap=cfg.max_photos)
    ks = sorted(set(cfg.place_k_list()) | {cfg.place_k})
    truth = [r.place for r in records]
    have_truth = all(t is not None for t in truth)
    seed = derive_int(cfg.seed, "places/kmeans")
    results = purity_sweep(graph, truth if have_truth else [0] * len(records), ks, seed=seed,
                           restarts=cfg.kmeans_restarts, **cfg.eigenmap_kw())
    out = _out_dir(cfg)
    chosen = next(r for r in results if r.k == cfg.place_k)
    write_assignment_csv(out / "place_assignment.csv", [r.path for r in records], chosen.assignment.labels)
    written = [out / "place_assignment.csv"]
    if have_truth:
        write_purity_csv(out / "purity.csv", results)
        written.append(out / "purity.csv")
    write_ppm(out / "montage.ppm", montage(photos, chosen.assignment.labels, seed=seed))
    written.append(out / "montage.ppm")
    return written


def cmd_probe(cfg: RunConfig) -> list[Path]:
    from .probes import probe_report, write_probe_csv
    net = _load_net(cfg)
    out = _out_dir(cfg)
    pairs = _sample_pairs(cfg, 2 * cfg.probe_pairs, f"probe/{cfg.domain}")
    pos = pairs.subset(np.flatnonzero(pairs.c == 1)[:cfg.probe_pairs])
    rep = probe_report(net, pos)
    write_probe_csv(out / "probe.csv", {cfg.domain: rep})
    return [out / "probe.csv"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-affinity": cmd_eval_affinity,
    "propose": cmd_propose,
    "segment-movie": cmd_segment_movie,
    "cluster-places": cmd_cluster_places,
    "probe": cmd_probe,
}


# ---------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("config", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cooccur", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML or JSON config file (or a previous run_manifest.json)")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            p.add_argument(flag, dest=f.name, default=None, metavar=f.type.upper())
    return parser


def _setup_logging():
    level = os.environ.get("COOCCUR_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError("config", f"COOCCUR_LOG must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .data import IngestionError, ManifestError, SamplingError
    from .nnet import InputShapeError, WeightsFormatError
    from .parallel import set_threads

    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        cfg = make_config(read_config_file(args.config) if args.config else {}, overrides)
        set_threads(cfg.threads)
        t0 = time.time()
        # BLAS stays single-threaded so its reduction order never depends on --threads
        with threadpool_limits(limits=1):
            artifacts = COMMANDS[args.command](cfg)
        out = _out_dir(cfg)
        _write_manifest(cfg, args.command, out, artifacts)
        log.info("%s finished in %.1fs", args.command, time.time() - t0)
        return 0
    except CliError as exc:
        err = exc
    except ConfigError as exc:
        err = CliError("config", str(exc))
    except (WeightsFormatError, IngestionError, ManifestError) as exc:
        err = CliError("format", str(exc))
    except (InputShapeError, SamplingError) as exc:
        err = CliError("data", str(exc))
    except FileNotFoundError as exc:
        err = CliError("input", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        log.debug("unexpected failure", exc_info=True)
        err = CliError("internal", f"{type(exc).__name__}: {exc}")
    msg = " ".join(str(err).split())
    print(f"error: {err.category}: {msg}", file=sys.stderr)
    return EXIT_CODES[err.category]


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
