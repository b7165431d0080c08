"""Real-camera adjustment: fisheye model, remapping into the reference
pinhole view, and local refinement of the real camera's translation.

The fisheye camera frame follows the pinhole convention: the optical axis
is ``-z`` and scene points have negative depth. A point at incidence angle
``theta`` from the axis lands at radial distance ``rho(theta)`` from the
distortion centre, then goes through a 2 x 2 affine stretch.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .flow import FeatureImage
from .geometry import GeometryError, PinholeCamera, RigidTransform, invert_pinhole

__all__ = [
    "FisheyeModel",
    "RemapTable",
    "RefinementResult",
    "world2cam",
    "build_remap_table",
    "remap_image",
    "feature_mse",
    "grid_search_translation",
    "refine_translation",
    "load_fisheye_json",
    "save_fisheye_json",
    "save_remap_table",
    "load_remap_table",
    "read_pgm",
    "write_pgm",
]

log = logging.getLogger(__name__)

RADIAL_MODELS = ("theta", "tan")


@dataclass(frozen=True, eq=False)
class FisheyeModel:
    """Radially symmetric camera, ``rho = sum_k poly[k-1] * x**k``.

    ``radial_model="theta"`` uses ``x = theta`` (equidistant with polynomial
    correction); ``"tan"`` uses ``x = tan(theta)``, which with a single
    coefficient ``|f|`` is exactly a pinhole camera.
    """

    poly: tuple[float, ...]
    affine: np.ndarray = field(default_factory=lambda: np.eye(2))
    center: tuple[float, float] = (320.0, 240.0)
    image_size: tuple[int, int] = (640, 480)
    radial_model: str = "theta"
    theta_max: float = np.deg2rad(80.0)

    def __post_init__(self):
        poly = tuple(float(b) for b in self.poly)
        if not 1 <= len(poly) <= 4:
            raise ValueError("poly needs 1 to 4 coefficients")
        A = np.asarray(self.affine, dtype=np.float64).reshape(2, 2)
        if abs(np.linalg.det(A)) < 1e-12:
            raise ValueError("affine stretch is singular")
        if self.radial_model not in RADIAL_MODELS:
            raise ValueError(f"radial_model must be one of {RADIAL_MODELS}")
        limit = np.pi / 2 if self.radial_model == "tan" else np.pi
        if not 0 < self.theta_max < limit:
            raise ValueError(f"theta_max must lie in (0, {limit:.4f})")
        object.__setattr__(self, "poly", poly)
        object.__setattr__(self, "affine", A)
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        theta = np.linspace(0.0, self.theta_max, 2049)
        if np.any(np.diff(self.rho(theta)) <= 0):
            raise ValueError("rho(theta) is not strictly increasing on [0, theta_max]")

    def rho(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        x = np.tan(theta) if self.radial_model == "tan" else theta
        out = np.zeros_like(x)
        for b in reversed(self.poly):
            out = (out + b) * x
        return out

    @classmethod
    def from_pinhole(cls, cam: PinholeCamera) -> "FisheyeModel":
        """The degenerate model that reproduces ``cam`` exactly."""
        half_diag = np.hypot(*cam.image_size)
        theta_max = min(np.arctan(half_diag / abs(cam.focal)) + 0.1, np.pi / 2 - 1e-3)
        return cls((abs(cam.focal),), np.eye(2), cam.center, cam.image_size, "tan", theta_max)

    def to_dict(self) -> dict:
        return {
            "poly": list(self.poly),
            "affine": [float(a) for a in self.affine.ravel()],
            "center_px": list(self.center),
            "image_size_px": list(self.image_size),
            "radial_model": self.radial_model,
            "theta_max_rad": float(self.theta_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FisheyeModel":
        return cls(
            tuple(d["poly"]),
            np.asarray(d.get("affine", [1, 0, 0, 1]), dtype=np.float64).reshape(2, 2),
            tuple(d["center_px"]),
            tuple(d["image_size_px"]),
            d.get("radial_model", "theta"),
            d.get("theta_max_rad", np.deg2rad(80.0)),
        )


def world2cam(model: FisheyeModel, s_c, strict: bool = True) -> np.ndarray:
    """Pixel of camera-frame points ``(..., 3)``.

    Points behind the camera or beyond ``theta_max`` raise when ``strict``,
    otherwise they map to NaN.
    """
    s = np.asarray(s_c, dtype=np.float64)
    r_xy = np.hypot(s[..., 0], s[..., 1])
    theta = np.arctan2(r_xy, -s[..., 2])
    bad = ~(theta <= model.theta_max)
    if strict and np.any(bad):
        raise GeometryError("point behind the camera or outside the field of view")
    rho = model.rho(np.where(bad, 0.0, theta))
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r_xy > 0, rho / r_xy, 0.0)
    q = np.stack([s[..., 0] * scale, s[..., 1] * scale], axis=-1)
    pix = q @ model.affine.T + np.asarray(model.center)
    pix[bad] = np.nan
    return pix


@dataclass(frozen=True, eq=False)
class RemapTable:
    """Source coordinate in the fisheye image for every destination pixel.

    Coordinates are continuous (pixel ``k`` spans ``[k, k+1)``); NaN marks an
    unmapped destination pixel.
    """

    map_u: np.ndarray  # (H_dst, W_dst)
    map_v: np.ndarray
    src_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        mu = np.asarray(self.map_u, dtype=np.float64)
        mv = np.asarray(self.map_v, dtype=np.float64)
        if mu.shape != mv.shape or mu.ndim != 2:
            raise ValueError("map_u and map_v must be equal 2D arrays")
        object.__setattr__(self, "map_u", mu)
        object.__setattr__(self, "map_v", mv)
        object.__setattr__(self, "src_size", (int(self.src_size[0]), int(self.src_size[1])))

    @property
    def mapped(self) -> np.ndarray:
        return np.isfinite(self.map_u) & np.isfinite(self.map_v)

    @property
    def dst_size(self) -> tuple[int, int]:
        return self.map_u.shape[1], self.map_u.shape[0]

    @cached_property
    def _bilinear(self):
        W, H = self.src_size
        ok = self.mapped
        x = np.where(ok, self.map_u, 0.5) - 0.5
        y = np.where(ok, self.map_v, 0.5) - 0.5
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = (x - x0).astype(np.float32)
        fy = (y - y0).astype(np.float32)
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        xa, xb = np.clip(x0, 0, W - 1), np.clip(x0 + 1, 0, W - 1)
        ya, yb = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
        idx = np.stack([ya * W + xa, ya * W + xb, yb * W + xa, yb * W + xb]).reshape(4, -1)
        okf = ok.astype(np.float32)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]) * okf
        return idx, w.reshape(4, -1).astype(np.float32)

    @cached_property
    def _nearest(self):
        W, H = self.src_size
        ok = self.mapped
        xi = np.clip(np.floor(np.where(ok, self.map_u, 0.0)), 0, W - 1).astype(np.int64)
        yi = np.clip(np.floor(np.where(ok, self.map_v, 0.0)), 0, H - 1).astype(np.int64)
        return (yi * W + xi).ravel(), ok.ravel()


def build_remap_table(
    model: FisheyeModel,
    gel_to_cam: RigidTransform,
    pinhole: PinholeCamera,
    gel_to_pinhole: RigidTransform,
    z_plane: float | None = None,
) -> RemapTable:
    """For every pinhole pixel, back-project onto ``z = z_plane`` (default the
    layer bottom, ``t_z`` of the pinhole extrinsics), move the point into the
    real camera frame and project it with the fisheye model."""
    if z_plane is None:
        z_plane = float(gel_to_pinhole.translation[2])
    W, H = pinhole.image_size
    v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    sP = invert_pinhole(pinhole, np.stack([u, v], axis=-1), z_plane)
    pinhole_to_cam = gel_to_cam.compose(gel_to_pinhole.inverse())
    src = world2cam(model, pinhole_to_cam.apply(sP), strict=False)
    Ws, Hs = model.image_size
    inside = (src[..., 0] >= 0) & (src[..., 0] <= Ws) & (src[..., 1] >= 0) & (src[..., 1] <= Hs)
    src[~inside] = np.nan
    return RemapTable(src[..., 0], src[..., 1], model.image_size)


def remap_image(table: RemapTable, src: np.ndarray, interpolation: str = "bilinear") -> np.ndarray:
    """Resample an 8-bit grey image ``(H, W)`` through ``table``.

    Unmapped destination pixels are 0. Sampling outside the source pixel
    centres replicates the border.
    """
    src = np.asarray(src)
    W, H = table.src_size
    if src.shape != (H, W):
        raise ValueError(f"source image is {src.shape[::-1]}, table expects {(W, H)}")
    flat = src.ravel()
    Wd, Hd = table.dst_size
    if interpolation == "nearest":
        idx, ok = table._nearest
        out = np.where(ok, flat[idx], 0).astype(np.uint8)
    elif interpolation == "bilinear":
        idx, w = table._bilinear
        vals = flat[idx].astype(np.float32)
        acc = np.einsum("kn,kn->n", w, vals)
        out = np.clip(np.rint(acc), 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return out.reshape(Hd, Wd)


def feature_mse(a: FeatureImage, b: FeatureImage) -> float:
    da = a.data if isinstance(a, FeatureImage) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, FeatureImage) else np.asarray(b, dtype=np.float64)
    if da.shape != db.shape:
        raise ValueError(f"feature shapes differ: {da.shape} vs {db.shape}")
    return float(np.mean((da - db) ** 2))


@dataclass(frozen=True)
class RefinementResult:
    translation: np.ndarray
    offset: np.ndarray
    mse: float
    n_evaluations: int


def _candidate_key(k: tuple[int, int, int], mse: float):
    # lattice offsets are integers, so norm ties are exact
    return (mse, k[0] * k[0] + k[1] * k[1] + k[2] * k[2], k)


def grid_search_translation(
    make_features: Callable[[np.ndarray], FeatureImage],
    real_features: FeatureImage,
    t_init,
    radius: float = 2.0,
    step: float = 0.05,
    strategy: str = "coarse_to_fine",
    jobs: int = 1,
    coarse_stride: int = 8,
) -> RefinementResult:
    """Search translations ``t_init + step * k`` inside the cube of half-width
    ``radius`` for the one whose synthetic features best match ``real_features``.

    ``strategy="exhaustive"`` scores every lattice point. ``"coarse_to_fine"``
    scores a coarse sub-lattice (stride ``coarse_stride`` steps) and then
    halves the stride around the incumbent, scoring a 5 x 5 x 5 window at
    each level. Ties go to the smallest offset, then lexicographic order.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if radius < step:
        raise ValueError("radius must be at least one step")
    real = real_features.data
    if not np.all(np.isfinite(real)):
        raise ValueError("real features contain non-finite values")
    t0 = np.asarray(t_init, dtype=np.float64)
    K = int(np.floor(radius / step + 1e-9))
    scores: dict[tuple[int, int, int], float] = {}

    def score(k):
        feats = make_features(t0 + step * np.asarray(k, dtype=np.float64))
        if not np.all(np.isfinite(feats.data)):
            raise ValueError(f"non-finite synthetic features at offset {k}")
        return feature_mse(feats, real_features)

    def evaluate(cands):
        todo = [k for k in dict.fromkeys(cands) if k not in scores]
        if jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                vals = list(pool.map(score, todo))
        else:
            vals = [score(k) for k in todo]
        scores.update(zip(todo, vals))

    def best():
        return min(scores, key=lambda k: _candidate_key(k, scores[k]))

    if strategy == "exhaustive":
        rng = range(-K, K + 1)
        evaluate(itertools.product(rng, rng, rng))
    elif strategy == "coarse_to_fine":
        stride = 1
        while stride * 2 <= min(coarse_stride, K):
            stride *= 2
        ticks = sorted(set(range(0, K + 1, stride)) | set(range(0, -K - 1, -stride)))
        evaluate(itertools.product(ticks, ticks, ticks))
        while stride > 1:
            stride //= 2
            c = best()
            axes = [
                sorted({min(max(ci + j * stride, -K), K) for j in range(-2, 3)})
                for ci in c
            ]
            evaluate(itertools.product(*axes))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    k = best()
    log.debug("grid search: %d evaluations, best offset %s", len(scores), k)
    offset = step * np.asarray(k, dtype=np.float64)
    return RefinementResult(t0 + offset, offset, scores[k], len(scores))


def refine_translation(make_features, real_features, t_init, radius: float = 2.0, step: float = 0.05, **kwargs) -> np.ndarray:
    return grid_search_translation(make_features, real_features, t_init, radius, step, **kwargs).translation


def load_fisheye_json(path) -> tuple[FisheyeModel, RigidTransform]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return FisheyeModel.from_dict(d), RigidTransform.from_dict(d)


def save_fisheye_json(model: FisheyeModel, gel_to_cam: RigidTransform, path) -> None:
    Path(path).write_text(json.dumps({**model.to_dict(), **gel_to_cam.to_dict()}, indent=2), encoding="utf-8")


def save_remap_table(table: RemapTable, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, map_u=table.map_u, map_v=table.map_v, src_size=np.asarray(table.src_size))


def load_remap_table(path) -> RemapTable:
    with np.load(path) as z:
        return RemapTable(z["map_u"], z["map_v"], tuple(int(s) for s in z["src_size"]))


def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM (P5)."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("expected a 2D uint8 image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
