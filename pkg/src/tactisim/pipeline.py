"""Dataset orchestration: indentation records in, (features, labels) pairs out.

Per-record randomness comes from ``SeedSequence(master_seed,
spawn_key=(crc32(record_id),))`` unless the record pins its own seed, so
every output byte is fixed by the records, the config and the master seed,
whatever the degree of parallelism.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from ._io import FileFormatError, read_json, write_json
from .config import PipelineConfig
from .fields import (
    Contact,
    GridField,
    ScatteredField,
    fem_like_nodes,
    grid_dims,
    halfspace_field,
    hertz_contact_radius,
    hertz_force,
    hertz_nodal_forces,
    idw_interpolate,
    load_field,
    sample_grid,
)
from .flow import (
    FeatureImage,
    ForceDistribution,
    NodalForces,
    bin_displacements,
    bin_forces,
    flow_samples,
    load_feature_image,
    load_force_distribution,
    load_nodal_forces,
    save_feature_image,
    save_force_distribution,
    total_force,
)
from .visibility import VisibilityGrid, estimate_visibility_grid, load_grid, save_grid

__all__ = [
    "RecordError",
    "IndentationRecord",
    "SampleEntry",
    "DatasetManifest",
    "SampleContext",
    "load_records",
    "record_seed",
    "build_visibility",
    "generate_sample",
    "elastic_deform",
    "generate_dataset",
    "validate_manifest",
    "load_manifest",
    "translation_probe",
    "SCHEMA_VERSION",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class RecordError(RuntimeError):
    def __init__(self, record_id: str, cause: Exception):
        super().__init__(f"record {record_id}: {cause}")
        self.record_id = record_id
        self.cause = cause


@dataclass(frozen=True)
class IndentationRecord:
    """One indentation. ``contacts`` holds ``(x, y, depth)`` in mm; the first
    entry is the indenter pose, further entries make a multi-contact case.
    With ``field_path`` set the displacement field and ``forces_path`` nodal
    forces are read from disk instead of the analytic oracle."""

    id: str
    contacts: tuple[tuple[float, float, float], ...]
    field_path: str | None = None
    forces_path: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise ValueError(f"record id {self.id!r} must match {_ID_RE.pattern}")
        contacts = tuple(tuple(float(v) for v in c) for c in self.contacts)
        if not contacts:
            raise ValueError(f"record {self.id}: no indenter pose")
        for x, y, depth in contacts:
            if depth < 0:
                raise ValueError(f"record {self.id}: negative depth {depth}")
        object.__setattr__(self, "contacts", contacts)

    @property
    def x(self) -> float:
        return self.contacts[0][0]

    @property
    def y(self) -> float:
        return self.contacts[0][1]

    @property
    def depth(self) -> float:
        return self.contacts[0][2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contacts"] = [list(c) for c in self.contacts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IndentationRecord":
        if "contacts" in d:
            contacts = tuple(tuple(c) for c in d["contacts"])
        else:
            contacts = ((d["x"], d["y"], d["depth"]),)
        seed = d.get("seed")
        return cls(
            str(d["id"]),
            contacts,
            d.get("field_path") or None,
            d.get("forces_path") or None,
            None if seed in (None, "") else int(seed),
        )


def load_records(path) -> list[IndentationRecord]:
    """Records from JSON (a list of objects) or CSV (``id,x,y,depth`` plus
    optional ``field_path,forces_path,seed`` columns)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        rows = read_json(path)
        if isinstance(rows, dict):
            rows = rows["records"]
    else:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    records = [IndentationRecord.from_dict(r) for r in rows]
    for rec in records:
        for x, y, _ in rec.contacts:
            if not np.isfinite([x, y]).all():
                raise ValueError(f"record {rec.id}: non-finite position")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids")
    return records


def record_seed(master_seed: int, rec: IndentationRecord) -> np.random.SeedSequence:
    if rec.seed is not None:
        return np.random.SeedSequence(rec.seed)
    return np.random.SeedSequence(master_seed, spawn_key=(zlib.crc32(rec.id.encode("utf-8")),))


def build_visibility(cfg: PipelineConfig, jobs: int = 1) -> VisibilityGrid:
    vcfg = cfg.raw["visibility"]
    if vcfg.get("grid_path"):
        return load_grid(vcfg["grid_path"])
    return estimate_visibility_grid(
        cfg.layer,
        cfg.camera,
        cfg.gel_to_pinhole,
        n_configs=int(vcfg["n_configs"]),
        bin_dims=tuple(vcfg["bin_dims"]),
        rng_seed=cfg.seed,
        jobs=jobs,
    )


class SampleContext:
    """Everything a worker reuses across records."""

    def __init__(self, cfg: PipelineConfig, vis: VisibilityGrid):
        self.cfg = cfg
        self.vis = vis
        self.layer = cfg.layer
        self.camera = cfg.camera
        self.gel_to_pinhole = cfg.gel_to_pinhole
        self.material = cfg.material
        self.grid_points = sample_grid(self.layer, cfg.grid_spacing)
        self.grid_dims = grid_dims(self.layer, cfg.grid_spacing)
        (x0, x1), (y0, y1) = cfg.surface_extent
        h = cfg.force_node_spacing
        xs = np.linspace(x0, x1, int(round((x1 - x0) / h)) + 1)
        ys = np.linspace(y0, y1, int(round((y1 - y0) / h)) + 1)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        self.surface_nodes = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, cfg.surface_z)], axis=1)

    def contacts(self, rec: IndentationRecord) -> list[Contact]:
        R = self.cfg.indenter_radius
        return [
            Contact((x, y), hertz_force(d, R, self.material), hertz_contact_radius(d, R))
            for x, y, d in rec.contacts
        ]

    def grid_field(self, rec: IndentationRecord, rng: np.random.Generator) -> GridField:
        cfg = self.cfg
        if rec.field_path:
            scattered = load_field(rec.field_path)
        else:
            fcfg = cfg.raw["fields"]
            nodes = fem_like_nodes(self.layer, fcfg["fem_node_spacing_mm"], fcfg["fem_node_jitter"], rng)
            disp = halfspace_field(self.contacts(rec), self.material, nodes, cfg.surface_z)
            scattered = ScatteredField(nodes, disp)
        disp = idw_interpolate(scattered, self.grid_points, cfg.idw_power, min(cfg.idw_k, len(scattered)))
        spacing = cfg.grid_spacing
        return GridField(self.grid_dims, spacing, tuple(self.grid_points[0]), disp)

    def nodal_forces(self, rec: IndentationRecord) -> NodalForces:
        if rec.forces_path:
            return load_nodal_forces(rec.forces_path)
        if rec.field_path:
            raise ValueError("a field file needs a matching nodal-force file")
        forces = np.zeros_like(self.surface_nodes)
        for c in self.contacts(rec):
            forces += hertz_nodal_forces(c, self.surface_nodes)
        return NodalForces(self.surface_nodes, forces)

    def features(self, field: GridField, gel_to_pinhole=None) -> FeatureImage:
        T = self.gel_to_pinhole if gel_to_pinhole is None else gel_to_pinhole
        pix, dpix, w = flow_samples(self.grid_points, field.displacements, self.camera, T, self.vis)
        return bin_displacements(pix, dpix, w, self.cfg.m, self.camera.image_size)


def generate_sample(
    rec: IndentationRecord,
    cfg: PipelineConfig,
    vis: VisibilityGrid | None = None,
    ctx: SampleContext | None = None,
) -> tuple[FeatureImage, ForceDistribution]:
    """Features and labels for one record; errors carry the record id."""
    if ctx is None:
        ctx = SampleContext(cfg, vis if vis is not None else build_visibility(cfg))
    try:
        rng = np.random.default_rng(record_seed(cfg.seed, rec))
        field = ctx.grid_field(rec, rng)
        feats = ctx.features(field)
        labels = bin_forces(ctx.nodal_forces(rec), cfg.n, cfg.surface_extent)
    except (ValueError, ArithmeticError, OSError) as exc:
        raise RecordError(rec.id, exc) from exc
    return feats, labels


def elastic_deform(img: FeatureImage, alpha: float = 2.0, sigma: float = 4.0, rng_seed=None) -> FeatureImage:
    """Warp a feature image with a smooth random displacement field.

    Uniform noise per axis is Gaussian-smoothed with std ``sigma`` regions
    and rescaled so the largest displacement is ``alpha`` regions; channels
    are resampled bilinearly with border clamping.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if alpha == 0:
        return FeatureImage(img.data.copy())
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    m = img.m
    dx = gaussian_filter(rng.uniform(-1, 1, (m, m)), sigma, mode="reflect")
    dy = gaussian_filter(rng.uniform(-1, 1, (m, m)), sigma, mode="reflect")
    peak = float(np.max(np.hypot(dx, dy)))
    if peak == 0:
        return FeatureImage(img.data.copy())
    rows, cols = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(m, dtype=np.float64), indexing="ij")
    coords = np.stack([rows + dy * (alpha / peak), cols + dx * (alpha / peak)])
    out = np.stack([map_coordinates(ch, coords, order=1, mode="nearest") for ch in img.data])
    return FeatureImage(out)


@dataclass
class SampleEntry:
    id: str
    features: str
    labels: str
    record: dict
    total_force: list[float]
    augmented: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    m: int
    n: int
    config: dict
    visibility_grid: str | None = None
    samples: list[SampleEntry] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d["samples"] = [SampleEntry(**s) for s in d.get("samples", [])]
        return cls(**d)

    def save(self, path) -> None:
        write_json(path, self.to_dict())


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(read_json(path))


_WORKER: dict = {}


def _init_worker(cfg_raw: dict, vis: VisibilityGrid, out_dir: str) -> None:
    cfg = PipelineConfig.from_dict(cfg_raw)
    _WORKER["ctx"] = SampleContext(cfg, vis)
    _WORKER["out"] = Path(out_dir)


def _run_record(rec: IndentationRecord) -> tuple[SampleEntry | None, dict | None]:
    ctx: SampleContext = _WORKER["ctx"]
    out: Path = _WORKER["out"]
    cfg = ctx.cfg
    try:
        feats, labels = generate_sample(rec, cfg, ctx=ctx)
    except RecordError as exc:
        log.warning("%s", exc)
        return None, {"id": rec.id, "error": str(exc.cause)}
    fpath = f"samples/{rec.id}.features.f32"
    lpath = f"samples/{rec.id}.labels.f32"
    save_feature_image(feats, out / fpath)
    save_force_distribution(labels, out / lpath)
    # conservation reference is taken from what was actually stored
    stored = load_force_distribution(out / lpath)
    entry = SampleEntry(rec.id, fpath, lpath, rec.to_dict(), [float(v) for v in total_force(stored)])
    copies = int(cfg.raw["augment"]["copies"])
    if copies:
        streams = record_seed(cfg.seed, rec).spawn(copies + 1)[1:]
        for k, ss in enumerate(streams):
            aug = elastic_deform(feats, cfg.raw["augment"]["alpha"], cfg.raw["augment"]["sigma"], np.random.default_rng(ss))
            apath = f"samples/{rec.id}.aug{k}.features.f32"
            save_feature_image(aug, out / apath)
            entry.augmented.append(apath)
    return entry, None


def generate_dataset(
    records: list[IndentationRecord],
    cfg: PipelineConfig,
    out_dir,
    jobs: int = 1,
    vis: VisibilityGrid | None = None,
) -> DatasetManifest:
    """Write every sample plus ``manifest.json`` into ``out_dir``.

    A record that fails numerically is listed under ``failures``; I/O errors
    propagate.
    """
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    if vis is None:
        vis = build_visibility(cfg, jobs)
    save_grid(vis, out / "visibility.grid")
    write_json(out / "effective_config.json", cfg.to_dict())

    if jobs > 1 and len(records) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(cfg.raw, vis, str(out))) as pool:
            results = list(pool.map(_run_record, records, chunksize=max(1, len(records) // (4 * jobs))))
    else:
        _init_worker(cfg.raw, vis, str(out))
        results = [_run_record(r) for r in records]

    manifest = DatasetManifest(cfg.m, cfg.n, cfg.to_dict(), "visibility.grid")
    for entry, failure in results:
        if entry is not None:
            manifest.samples.append(entry)
        else:
            manifest.failures.append(failure)
    manifest.save(out / "manifest.json")
    log.info("dataset: %d samples, %d failures", len(manifest.samples), len(manifest.failures))
    return manifest


def validate_manifest(path) -> dict:
    """Check every sample's files for shape, finiteness and force totals.

    Returns ``{"ok": bool, "samples": [{"id", "ok", "errors"}]}``.
    """
    path = Path(path)
    try:
        manifest = load_manifest(path)
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ValueError(f"unreadable manifest {path}: {exc}") from exc
    root = path.parent
    report = []
    for s in manifest.samples:
        errors: list[str] = []
        try:
            feats = load_feature_image(root / s.features)
            if feats.m != manifest.m:
                errors.append(f"features: m={feats.m}, manifest says {manifest.m}")
            if not np.all(np.isfinite(feats.data)):
                errors.append("features: non-finite values")
        except (OSError, FileFormatError, ValueError, KeyError) as exc:
            errors.append(f"features: {exc}")
        try:
            labels = load_force_distribution(root / s.labels)
            if labels.n != manifest.n:
                errors.append(f"labels: n={labels.n}, manifest says {manifest.n}")
            if not np.all(np.isfinite(labels.data)):
                errors.append("labels: non-finite values")
            else:
                got = total_force(labels)
                want = np.asarray(s.total_force)
                if np.any(np.abs(got - want) > 1e-9 * np.maximum(np.abs(want), 1.0)):
                    errors.append(f"labels: total force {got.tolist()} != recorded {want.tolist()}")
        except (OSError, FileFormatError, ValueError, KeyError) as exc:
            errors.append(f"labels: {exc}")
        for a in s.augmented:
            try:
                aug = load_feature_image(root / a)
                if not np.all(np.isfinite(aug.data)):
                    errors.append(f"{a}: non-finite values")
            except (OSError, FileFormatError, ValueError, KeyError) as exc:
                errors.append(f"{a}: {exc}")
        report.append({"id": s.id, "ok": not errors, "errors": errors})
    return {"ok": all(r["ok"] for r in report), "samples": report}


def translation_probe(ctx: SampleContext, rec: IndentationRecord, t_reference):
    """Feature generator for the extrinsic grid search.

    Returns ``make_features(t)`` rendering ``rec`` with the pinhole translation
    moved by ``t - t_reference``; the displacement field is computed once.
    """
    rng = np.random.default_rng(record_seed(ctx.cfg.seed, rec))
    field = ctx.grid_field(rec, rng)
    base = ctx.gel_to_pinhole
    t_ref = np.asarray(t_reference, dtype=np.float64)

    def make_features(t) -> FeatureImage:
        return ctx.features(field, base.with_translation(base.translation + (np.asarray(t) - t_ref)))

    return make_features
