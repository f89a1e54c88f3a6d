"""2D slice data layer: raster IO, intensity/geometric transforms, synthetic data.

Images are H x W float arrays with intensities in [0, 1] after normalization;
masks are H x W integer label maps with 0 reserved for background. The
geometric transform is a 2x3 affine acting on (row, col) pixel coordinates,
applied by inverse mapping with zero fill outside the canvas.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import LoadError, ValidationError


@dataclass(frozen=True)
class Image2D:
    """A single grayscale slice, values expected in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"image must be 2D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class MaskMap:
    """Integer label raster paired with an Image2D of the same shape."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"mask must be 2D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"mask dtype must be integer, got {arr.dtype}")
        if arr.min(initial=0) < 0:
            raise ValidationError("mask labels must be non-negative")
        object.__setattr__(self, "data", arr.astype(np.int32))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def labels(self) -> np.ndarray:
        return np.unique(self.data)

    def binarize(self, class_id: int) -> "MaskMap":
        return MaskMap((self.data == class_id).astype(np.int32))


@dataclass(frozen=True)
class TransformParams:
    """Geometric (affine) and intensity (gamma) transform parameters.

    `affine` is a 2x3 forward map on (row, col) coordinates; the 2x2 part
    must be invertible. `gamma` is the exponent of the intensity transform.
    """

    affine: np.ndarray
    gamma: float
    seed: int = 0

    def __post_init__(self):
        mat = np.asarray(self.affine, dtype=np.float64)
        if mat.shape != (2, 3):
            raise ValidationError(f"affine must be 2x3, got {mat.shape}")
        det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
        if abs(det) <= 1e-6:
            raise ValidationError(f"affine 2x2 part is singular (det={det:g})")
        if not self.gamma > 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "affine", mat)


def identity_params(gamma: float = 1.0, seed: int = 0) -> TransformParams:
    return TransformParams(
        affine=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), gamma=gamma, seed=seed
    )


@dataclass(frozen=True)
class TransformRanges:
    """Sampling ranges for episode transforms. All are config keys."""

    rotation_deg: float = 15.0
    scale: tuple[float, float] = (0.9, 1.1)
    shear_deg: float = 5.0
    translate_px: float = 10.0
    gamma: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        if self.gamma[0] <= 0 or self.gamma[1] < self.gamma[0]:
            raise ValidationError(f"invalid gamma range {self.gamma}")
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0]:
            raise ValidationError(f"invalid scale range {self.scale}")


@dataclass
class SliceRecord:
    image: Image2D
    mask: MaskMap | None
    slice_id: str


@dataclass
class SliceDataset:
    """Ordered collection of slices sharing one spatial size."""

    slices: list[SliceRecord]
    source: str = "unknown"
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.slice_id for s in self.slices]
        if len(set(ids)) != len(ids):
            raise ValidationError("slice ids must be unique")
        shapes = {s.image.data.shape for s in self.slices}
        if len(shapes) > 1:
            raise ValidationError(f"slices disagree on spatial size: {shapes}")
        for s in self.slices:
            if s.mask is not None and s.mask.data.shape != s.image.data.shape:
                raise ValidationError(
                    f"slice {s.slice_id}: mask shape {s.mask.data.shape} "
                    f"!= image shape {s.image.data.shape}"
                )

    def __len__(self) -> int:
        return len(self.slices)

    def __getitem__(self, idx: int) -> SliceRecord:
        return self.slices[idx]


# ---------------------------------------------------------------------------
# Intensity transforms
# ---------------------------------------------------------------------------


def normalize_intensity(raw: np.ndarray) -> Image2D:
    """Min-max normalize a raster to [0, 1].

    A degenerate range (max == min, e.g. a blank slice) maps to all zeros
    instead of erroring so volumetric stacks with empty slices survive.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("raster contains NaN or Inf")
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    return Image2D(arr)


def apply_gamma(image: Image2D, gamma: float) -> Image2D:
    """Pixelwise v -> v**gamma; requires intensities in [0, 1]."""
    if gamma <= 0:
        raise ValidationError(f"gamma must be positive, got {gamma}")
    arr = image.data
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("gamma transform requires intensities in [0, 1]")
    return Image2D(np.power(arr, gamma))


# ---------------------------------------------------------------------------
# Affine warps
# ---------------------------------------------------------------------------


def make_affine(
    rotation_deg: float = 0.0,
    scale: float = 1.0,
    shear_deg: float = 0.0,
    translate: tuple[float, float] = (0.0, 0.0),
    center: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Compose a 2x3 forward affine about `center` in (row, col) coordinates."""
    th = math.radians(rotation_deg)
    sh = math.tan(math.radians(shear_deg))
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    lin = scale * rot @ shear
    cr, cc = center
    offset = np.array([cr, cc]) - lin @ np.array([cr, cc]) + np.asarray(translate)
    return np.column_stack([lin, offset])


def _inverse_affine(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lin = mat[:, :2]
    det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
    if abs(det) <= 1e-6:
        raise ValidationError(f"affine 2x2 part is singular (det={det:g})")
    inv = np.array([[lin[1, 1], -lin[0, 1]], [-lin[1, 0], lin[0, 0]]]) / det
    return inv, -inv @ mat[:, 2]


def apply_affine(inp, params: TransformParams, mode: str):
    """Warp an image or mask by the forward affine in `params`.

    Images use bilinear interpolation, masks nearest neighbor; passing the
    wrong mode for the input type is an error. Samples falling outside the
    input are filled with 0 (background).
    """
    if mode not in ("bilinear", "nearest"):
        raise ValidationError(f"unknown interpolation mode {mode!r}")
    if isinstance(inp, Image2D):
        if mode != "bilinear":
            raise ValidationError("images must be warped with bilinear mode")
        return Image2D(_warp_bilinear(inp.data, params.affine))
    if isinstance(inp, MaskMap):
        if mode != "nearest":
            raise ValidationError("masks must be warped with nearest mode")
        return MaskMap(_warp_nearest(inp.data, params.affine))
    raise ValidationError(f"unsupported input type {type(inp).__name__}")


def _source_coords(shape, mat):
    inv, off = _inverse_affine(mat)
    rows, cols = np.meshgrid(
        np.arange(shape[0], dtype=np.float64),
        np.arange(shape[1], dtype=np.float64),
        indexing="ij",
    )
    sr = inv[0, 0] * rows + inv[0, 1] * cols + off[0]
    sc = inv[1, 0] * rows + inv[1, 1] * cols + off[1]
    return sr, sc


def _warp_bilinear(arr: np.ndarray, mat: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    sr, sc = _source_coords(arr.shape, mat)
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0
    out = np.zeros_like(arr)
    # Each of the four corner taps contributes only where it lands in bounds,
    # so partially out-of-bounds samples blend toward the zero fill.
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.where(inside, arr[rr.clip(0, h - 1), cc.clip(0, w - 1)], 0.0)
        out += wgt * vals
    # corner weights sum to 1 only up to rounding; keep output inside the
    # convex hull of the input values and the zero fill
    return np.clip(out, min(arr.min(), 0.0), max(arr.max(), 0.0))


def _warp_nearest(arr: np.ndarray, mat: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    sr, sc = _source_coords(arr.shape, mat)
    rr = np.floor(sr + 0.5).astype(np.int64)
    cc = np.floor(sc + 0.5).astype(np.int64)
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    out = np.where(inside, arr[rr.clip(0, h - 1), cc.clip(0, w - 1)], 0)
    return out.astype(arr.dtype)


# ---------------------------------------------------------------------------
# Raster IO
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def write_raster(path: Path, arr: np.ndarray) -> None:
    """Write a little-endian row-major binary raster plus its JSON sidecar."""
    path = Path(path)
    arr = np.asarray(arr)
    dtype = "i32" if np.issubdtype(arr.dtype, np.integer) else "f32"
    path.write_bytes(np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes())
    sidecar = {"height": int(arr.shape[0]), "width": int(arr.shape[1]), "dtype": dtype}
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def read_raster(path: Path) -> np.ndarray:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise LoadError(f"raster or sidecar missing for {path}")
    meta = json.loads(sidecar_path.read_text())
    try:
        dtype = _DTYPES[meta["dtype"]]
        h, w = int(meta["height"]), int(meta["width"])
    except (KeyError, TypeError) as exc:
        raise LoadError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    buf = np.frombuffer(path.read_bytes(), dtype=dtype)
    if buf.size != h * w:
        raise LoadError(f"{path}: expected {h * w} values, found {buf.size}")
    return buf.reshape(h, w).astype(np.float64 if meta["dtype"] == "f32" else np.int32)


def load_slice_dataset(root_path, manifest) -> SliceDataset:
    """Load a dataset from a JSON manifest of raster entries.

    Entry paths are resolved relative to `root_path`. Image intensities are
    min-max normalized on load; masks are read untouched.
    """
    root = Path(root_path)
    manifest_path = Path(manifest)
    if not manifest_path.exists():
        raise LoadError(f"manifest not found: {manifest_path}")
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise LoadError("manifest must be a JSON list of entries")

    meta_path = manifest_path.parent / "dataset_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}

    slices = []
    for entry in entries:
        try:
            image_rel, slice_id = entry["image"], entry["id"]
        except (KeyError, TypeError) as exc:
            raise LoadError(f"malformed manifest entry {entry!r}: {exc}") from exc
        image_path = root / image_rel
        try:
            image = normalize_intensity(read_raster(image_path))
        except LoadError as exc:
            raise LoadError(f"entry {slice_id!r}: {exc}") from exc
        mask = None
        if entry.get("mask"):
            try:
                mask_arr = read_raster(root / entry["mask"])
            except LoadError as exc:
                raise LoadError(f"entry {slice_id!r}: {exc}") from exc
            if mask_arr.shape != image.data.shape:
                raise ValidationError(
                    f"entry {slice_id!r}: mask shape {mask_arr.shape} "
                    f"!= image shape {image.data.shape}"
                )
            mask = MaskMap(mask_arr.astype(np.int32))
        slices.append(SliceRecord(image=image, mask=mask, slice_id=str(slice_id)))
    return SliceDataset(
        slices=slices,
        source=meta.get("source", str(root)),
        class_names={int(k): v for k, v in meta.get("class_names", {}).items()},
    )


def write_slice_dataset(dataset: SliceDataset, root_path) -> Path:
    """Write every slice as binary rasters and return the manifest path.

    The manifest is strictly a list of {image, mask, id} entries; dataset
    metadata (source, class-name table) goes to dataset_meta.json alongside.
    """
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "dataset_meta.json").write_text(
        json.dumps(
            {
                "source": dataset.source,
                "class_names": {str(k): v for k, v in dataset.class_names.items()},
            }
        )
    )
    entries = []
    for rec in dataset.slices:
        image_rel = f"img_{rec.slice_id}.bin"
        write_raster(root / image_rel, rec.image.data.astype(np.float32))
        mask_rel = None
        if rec.mask is not None:
            mask_rel = f"msk_{rec.slice_id}.bin"
            write_raster(root / mask_rel, rec.mask.data)
        entries.append({"image": image_rel, "mask": mask_rel, "id": rec.slice_id})
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=1))
    return manifest_path


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

SYNTHETIC_CLASS_NAMES = {1: "bright_ellipse", 2: "dark_ellipse", 3: "mid_polygon"}


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic slice dataset with exact organ masks."""

    n_slices: int = 32
    height: int = 256
    width: int = 256
    shapes_per_slice: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (0.10, 0.22)  # fraction of min(H, W)
    noise_sigma: float = 0.03
    background_smoothness: float = 12.0
    blur_sigma: float = 0.6

    def __post_init__(self):
        if self.n_slices < 1 or self.height < 8 or self.width < 8:
            raise ValidationError("n_slices >= 1 and canvas >= 8x8 required")
        lo, hi = self.shapes_per_slice
        if not (0 <= lo <= hi <= len(SYNTHETIC_CLASS_NAMES)):
            raise ValidationError(f"invalid shapes_per_slice {self.shapes_per_slice}")
        rmin, rmax = self.radius_range
        if not (0 < rmin <= rmax):
            raise ValidationError(f"invalid radius_range {self.radius_range}")
        if rmax >= 0.5:
            raise ValidationError(
                f"radius_range {self.radius_range}: shape would not fit the canvas"
            )


# Per-class appearance: an intensity band plus a texture signature. The
# episode transforms include gamma shifts, which train the network to
# discount absolute intensity, so classes also need gamma-resilient cues:
# classes 1/2 are smooth at intensity extremes, class 3 carries a coarse
# blotch pattern that survives blurring and feature-stride pooling.
# Class identity is carried by intensity level: classes 1/2 sit at the
# extremes (stable under any monotone intensity shift), class 3 in the
# mid-bright band. A mid band is only identifiable when episode gamma ranges
# stay moderate; benchmarks pairing this data with wide gamma ranges push
# the transformed mid band into background territory.
_CLASS_INTENSITY = {1: (0.86, 0.98), 2: (0.02, 0.12), 3: (0.56, 0.68)}
_CLASS_NOISE = {1: 0.3, 2: 0.3, 3: 0.3}


def _ellipse_mask(shape, center, axes, angle_rad):
    rows, cols = np.meshgrid(
        np.arange(shape[0], dtype=np.float64),
        np.arange(shape[1], dtype=np.float64),
        indexing="ij",
    )
    dr = rows - center[0]
    dc = cols - center[1]
    u = dr * math.cos(angle_rad) + dc * math.sin(angle_rad)
    v = -dr * math.sin(angle_rad) + dc * math.cos(angle_rad)
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _convex_hull(points: np.ndarray) -> np.ndarray:
    # Andrew's monotone chain; returns hull vertices in CCW order.
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1])


def _polygon_mask(shape, vertices: np.ndarray):
    rows, cols = np.meshgrid(
        np.arange(shape[0], dtype=np.float64),
        np.arange(shape[1], dtype=np.float64),
        indexing="ij",
    )
    inside = np.ones(shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        r0, c0 = vertices[i]
        r1, c1 = vertices[(i + 1) % n]
        cross = (r1 - r0) * (cols - c0) - (c1 - c0) * (rows - r0)
        inside &= cross >= 0
    return inside


def _sample_shape_mask(shape, class_id, rng, radius_px):
    h, w = shape
    radius = rng.uniform(*radius_px)
    margin = radius + 2
    center = (rng.uniform(margin, h - margin), rng.uniform(margin, w - margin))
    if class_id in (1, 2):
        ratio = rng.uniform(0.6, 1.0)
        axes = (radius, radius * ratio)
        angle = rng.uniform(0, math.pi)
        return _ellipse_mask(shape, center, axes, angle), center, radius
    # evenly spaced jittered angles keep the hull chunky (no sliver polygons)
    n_pts = int(rng.integers(5, 9))
    angles = (np.arange(n_pts) + rng.uniform(0.0, 0.7, size=n_pts)) * 2 * math.pi / n_pts
    radii = rng.uniform(0.7 * radius, radius, size=n_pts)
    pts = np.column_stack(
        [center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)]
    )
    return _polygon_mask(shape, _convex_hull(pts)), center, radius


def make_synthetic_dataset(spec: SyntheticSpec, seed: int) -> SliceDataset:
    """Generate slices with 1-3 non-overlapping organ shapes and exact masks.

    Fully determined by (spec, seed): per-slice generators are derived from
    a SeedSequence so slices are independent of generation order.
    """
    slices = []
    h, w = spec.height, spec.width
    radius_px = (
        spec.radius_range[0] * min(h, w),
        spec.radius_range[1] * min(h, w),
    )
    for idx in range(spec.n_slices):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        background = gaussian_filter(
            rng.normal(0.0, 1.0, size=(h, w)), spec.background_smoothness
        )
        background = 0.36 + 0.06 * background / max(np.abs(background).max(), 1e-9)
        img = background + rng.normal(0.0, spec.noise_sigma, size=(h, w))
        mask = np.zeros((h, w), dtype=np.int32)

        n_shapes = int(rng.integers(spec.shapes_per_slice[0], spec.shapes_per_slice[1] + 1))
        class_ids = rng.permutation(sorted(SYNTHETIC_CLASS_NAMES))[:n_shapes]
        placed = []  # (center, radius) of accepted shapes, for overlap rejection
        for class_id in class_ids:
            for _ in range(20):
                shape_mask, center, radius = _sample_shape_mask(
                    (h, w), int(class_id), rng, radius_px
                )
                clear = all(
                    math.hypot(center[0] - c0, center[1] - c1) > radius + r0 + 2
                    for (c0, c1), r0 in placed
                )
                if clear:
                    base = rng.uniform(*_CLASS_INTENSITY[int(class_id)])
                    sigma = spec.noise_sigma * _CLASS_NOISE[int(class_id)]
                    img[shape_mask] = base + rng.normal(
                        0.0, sigma, size=int(shape_mask.sum())
                    )
                    mask[shape_mask] = int(class_id)
                    placed.append((center, radius))
                    break
        if spec.blur_sigma > 0:
            img = gaussian_filter(img, spec.blur_sigma)
        # clip instead of min-max stretching: organ appearance must not
        # depend on which other classes happen to share the slice
        slices.append(
            SliceRecord(
                image=Image2D(np.clip(img, 0.0, 1.0)),
                mask=MaskMap(mask),
                slice_id=f"{idx:04d}",
            )
        )
    return SliceDataset(
        slices=slices, source="synthetic", class_names=dict(SYNTHETIC_CLASS_NAMES)
    )
