"""Command line entry point: ``tactisim <subcommand> ...``.

Exit status: 0 when everything succeeded, 2 when some records or samples
failed, 1 on a fatal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import pipeline
from ._io import read_json, write_json
from .config import PipelineConfig
from .fields import ScatteredField, idw_interpolate, load_field
from .flow import (
    bin_forces,
    load_feature_image,
    load_nodal_forces,
    save_feature_image,
    save_force_distribution,
)
from .geometry import load_camera_json
from .remap import (
    build_remap_table,
    grid_search_translation,
    load_fisheye_json,
    load_remap_table,
    read_pgm,
    remap_image,
    save_remap_table,
    write_pgm,
)
from .visibility import save_grid

log = logging.getLogger("tactisim")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _load_config(args) -> PipelineConfig:
    overrides = read_json(args.config) if args.config else {}
    cfg = PipelineConfig.from_dict(overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    return cfg


def cmd_config(args, cfg):
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gen_visibility(args, cfg):
    grid = pipeline.build_visibility(cfg, args.jobs)
    save_grid(grid, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_gen_dataset(args, cfg):
    records = pipeline.load_records(args.records)
    if args.augment_copies is not None:
        cfg = cfg.with_overrides({"augment": {"copies": args.augment_copies}})
    manifest = pipeline.generate_dataset(records, cfg, args.out, jobs=args.jobs)
    print(f"{len(manifest.samples)} samples, {len(manifest.failures)} failures -> {args.out}")
    return EXIT_PARTIAL if manifest.failures else EXIT_OK


def cmd_extract_features(args, cfg):
    ctx = pipeline.SampleContext(cfg, pipeline.build_visibility(cfg, args.jobs))
    scattered: ScatteredField = load_field(args.field)
    disp = idw_interpolate(scattered, ctx.grid_points, cfg.idw_power, min(cfg.idw_k, len(scattered)))
    feats = ctx.features(pipeline.GridField(ctx.grid_dims, cfg.grid_spacing, tuple(ctx.grid_points[0]), disp))
    save_feature_image(feats, args.out)
    return EXIT_OK


def cmd_bin_forces(args, cfg):
    labels = bin_forces(load_nodal_forces(args.nodes), cfg.n, cfg.surface_extent)
    save_force_distribution(labels, args.out)
    return EXIT_OK


def cmd_build_remap(args, cfg):
    model, gel_to_cam = load_fisheye_json(args.fisheye)
    if args.pinhole:
        cam, gel_to_pinhole = load_camera_json(args.pinhole)
    else:
        cam, gel_to_pinhole = cfg.camera, cfg.gel_to_pinhole
    table = build_remap_table(model, gel_to_cam, cam, gel_to_pinhole, args.z_plane)
    save_remap_table(table, args.out)
    frac = float(table.mapped.mean())
    log.info("remap table: %.1f%% of pixels mapped", 100 * frac)
    return EXIT_OK


def cmd_remap(args, cfg):
    table = load_remap_table(args.table)
    out = remap_image(table, read_pgm(args.input), "nearest" if args.nearest else "bilinear")
    write_pgm(args.output, out)
    return EXIT_OK


def cmd_refine(args, cfg):
    rcfg = cfg.raw["refine"]
    real = load_feature_image(args.real)
    if args.fisheye:
        _, gel_to_cam = load_fisheye_json(args.fisheye)
        t_init = gel_to_cam.translation
    else:
        t_init = cfg.gel_to_pinhole.translation
    x, y, depth = rcfg["contact_mm"]
    rec = pipeline.IndentationRecord("refine", ((x, y, depth),))
    ctx = pipeline.SampleContext(cfg, pipeline.build_visibility(cfg, args.jobs))
    make_features = pipeline.translation_probe(ctx, rec, t_init)
    res = grid_search_translation(
        make_features,
        real,
        t_init,
        radius=rcfg["radius_mm"],
        step=rcfg["step_mm"],
        strategy=rcfg["strategy"],
        jobs=args.jobs,
    )
    out = {
        "translation_mm": res.translation.tolist(),
        "offset_mm": res.offset.tolist(),
        "mse": res.mse,
        "evaluations": res.n_evaluations,
    }
    write_json(args.out, out)
    print(json.dumps(out))
    return EXIT_OK


def cmd_validate(args, cfg):
    report = pipeline.validate_manifest(args.manifest)
    for s in report["samples"]:
        status = "ok" if s["ok"] else "FAIL " + "; ".join(s["errors"])
        print(f"{s['id']}: {status}")
    return EXIT_OK if report["ok"] else EXIT_PARTIAL


def cmd_augment(args, cfg):
    acfg = cfg.raw["augment"]
    alpha = acfg["alpha"] if args.alpha is None else args.alpha
    sigma = acfg["sigma"] if args.sigma is None else args.sigma
    img = load_feature_image(args.input)
    save_feature_image(pipeline.elastic_deform(img, alpha, sigma, np.random.default_rng(cfg.seed)), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master RNG seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config overrides")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="tactisim", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(func=func)
        return p

    add("config", cmd_config, "print the effective configuration")

    p = add("gen-visibility", cmd_gen_visibility, "Monte Carlo visibility grid")
    p.add_argument("--out", required=True)

    p = add("gen-dataset", cmd_gen_dataset, "generate a dataset from indentation records")
    p.add_argument("--records", required=True, help="records CSV or JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--augment-copies", type=int, default=None, help="bake N augmented copies per sample")

    p = add("extract-features", cmd_extract_features, "features from a displacement field CSV")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)

    p = add("bin-forces", cmd_bin_forces, "labels from a nodal force CSV")
    p.add_argument("--nodes", required=True)
    p.add_argument("--out", required=True)

    p = add("build-remap", cmd_build_remap, "fisheye -> pinhole remap table")
    p.add_argument("--fisheye", required=True, help="fisheye calibration JSON")
    p.add_argument("--pinhole", help="pinhole camera JSON (default: config camera)")
    p.add_argument("--z-plane", type=float, default=None, help="back-projection depth (default t_z)")
    p.add_argument("--out", required=True)

    p = add("remap", cmd_remap, "apply a remap table to a PGM image")
    p.add_argument("--table", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--nearest", action="store_true", help="nearest-neighbour sampling")

    p = add("refine-extrinsics", cmd_refine, "grid search of the real camera translation")
    p.add_argument("--real", required=True, help="real feature file")
    p.add_argument("--fisheye", help="fisheye calibration JSON providing the initial translation")
    p.add_argument("--out", required=True)

    p = add("validate", cmd_validate, "validate a dataset manifest")
    p.add_argument("manifest")

    p = add("augment", cmd_augment, "elastic deformation of a feature file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("jobs", 1), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args)
        if args.verbose:
            log.debug("effective config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
        return args.func(args, cfg)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
