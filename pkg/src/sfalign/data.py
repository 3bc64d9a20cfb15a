"""Synthetic segmentation datasets with alignment-sensitive structure.

Each scene is a slate background with shapes from four geometry families:
large convex polygons, discs, rings, and thin bars. Class identity is the
geometry family (plus a size band once the families are exhausted), while
every shape fills with a color drawn from one pool shared by all classes.
Color therefore says "foreground", never which class: a pixel deep inside a
disc looks exactly like a pixel deep inside a polygon, and telling them
apart needs enough spatial context to see the whole shape. That pushes class
evidence into the coarse levels of a feature pyramid, so segmentation
quality on this data hinges on how precisely the decoder carries coarse
semantics back to fine boundaries - thin bars and small rounded shapes are
the first casualties of upsampling misalignment.

The label map is drawn first and the image is shaded from it (per-shape pool
color, a smooth illumination ramp, gaussian pixel noise), so label boundaries
and image boundaries coincide exactly by construction. Compositing is
thin-on-top (polygons, then discs, rings, bars) so bulky shapes do not erase
the small structures.

On disk a dataset is a directory holding manifest.json plus images/%05d.ppm
and labels/%05d.pgm. Every byte is determined by (seed, parameters): samples
are rendered from independent per-index substreams, so generation order does
not matter and samples could be rendered in parallel.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

IGNORE_LABEL = 255


@dataclass(frozen=True)
class GenParams:
    """Generator knobs. Ranges are inclusive. polygon_radius and bar_length
    are fractions of image size; the other extents are in pixels."""

    noise_sigma: float = 0.05
    illumination: float = 0.15
    shapes_per_image: tuple = (5, 9)
    polygon_radius: tuple = (0.16, 0.3)
    disc_diameter: tuple = (10.0, 16.0)
    ring_diameter: tuple = (10.0, 16.0)
    ring_thickness: tuple = (2.0, 3.0)
    bar_width: tuple = (1.2, 2.2)
    bar_length: tuple = (0.4, 0.9)
    color_pool: int = 6
    size_decay: float = 0.5


def _hue_rgb(h, v, s):
    # one HSV sextant sample; h in [0, 6)
    i = int(h) % 6
    f = h - int(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t),
            (p, q, v), (t, p, v), (v, p, q)][i]


def class_palette(num_classes):
    """(C, 3) display colors in [0, 1]: dark slate background, evenly spaced
    saturated hues for the foreground classes. Predictions and error maps are
    rendered with this; rendered scenes only take the background color from
    it, foreground fills come from shape_color_pool."""
    pal = np.zeros((num_classes, 3))
    pal[0] = (0.22, 0.22, 0.25)
    for c in range(1, num_classes):
        pal[c] = _hue_rgb(6.0 * (c - 1) / (num_classes - 1), 0.78, 0.75)
    return pal


def shape_color_pool(n=6):
    """(n, 3) bright fill colors shared by every class.

    Hues sit half a step off the class palette grid to underline that fill
    color and class identity are unrelated: the class of a shape is decided
    by its geometry alone."""
    return np.array([_hue_rgb(6.0 * (i + 0.5) / n, 0.8, 0.7)
                     for i in range(n)])


def _polygon_mask(rng, xs, ys, size, params, scale=1.0):
    # vertices sit on an ellipse sorted by parameter angle, so the outline is
    # convex and an all-edges half-plane test paints it exactly
    k = int(rng.integers(3, 7))
    ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, k))
    r = size * rng.uniform(*params.polygon_radius) * scale
    sx, sy = rng.uniform(0.6, 1.4, 2)
    rot = rng.uniform(0.0, 2.0 * np.pi)
    cx = size * rng.uniform(0.15, 0.85)
    cy = size * rng.uniform(0.15, 0.85)
    px = r * sx * np.cos(ang)
    py = r * sy * np.sin(ang)
    vx = cx + px * np.cos(rot) - py * np.sin(rot)
    vy = cy + px * np.sin(rot) + py * np.cos(rot)
    pos = np.ones(xs.shape, bool)
    neg = np.ones(xs.shape, bool)
    for i in range(k):
        j = (i + 1) % k
        cross = ((vx[j] - vx[i]) * (ys - vy[i])
                 - (vy[j] - vy[i]) * (xs - vx[i]))
        pos &= cross >= 0.0
        neg &= cross <= 0.0
    return pos | neg


def _disc_mask(rng, xs, ys, size, params, scale=1.0):
    r = rng.uniform(*params.disc_diameter) * scale / 2.0
    cx = size * rng.uniform(0.1, 0.9)
    cy = size * rng.uniform(0.1, 0.9)
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _ring_mask(rng, xs, ys, size, params, scale=1.0):
    r_out = rng.uniform(*params.ring_diameter) * scale / 2.0
    r_in = max(r_out - rng.uniform(*params.ring_thickness) * scale, 0.0)
    cx = size * rng.uniform(0.1, 0.9)
    cy = size * rng.uniform(0.1, 0.9)
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return (d2 <= r_out * r_out) & (d2 > r_in * r_in)


def _bar_mask(rng, xs, ys, size, params, scale=1.0):
    theta = rng.uniform(0.0, np.pi)
    half_len = size * rng.uniform(*params.bar_length) * scale / 2.0
    half_wdt = rng.uniform(*params.bar_width) / 2.0
    cx = size * rng.uniform(0.15, 0.85)
    cy = size * rng.uniform(0.15, 0.85)
    dx, dy = np.cos(theta), np.sin(theta)
    u = (xs - cx) * dx + (ys - cy) * dy
    w = (ys - cy) * dx - (xs - cx) * dy
    return (np.abs(u) <= half_len) & (np.abs(w) <= half_wdt)


_FAMILY_MASKS = (_polygon_mask, _disc_mask, _ring_mask, _bar_mask)


def class_geometry(class_id):
    """Map a foreground class id to (family index, size band).

    Families cycle polygon, disc, ring, bar; every fourth class reuses the
    family one size band smaller (extents scaled by size_decay per band)."""
    if class_id < 1:
        raise ValueError(f"foreground class ids start at 1, got {class_id}")
    return (class_id - 1) % len(_FAMILY_MASKS), (class_id - 1) // len(_FAMILY_MASKS)


def render_sample(rng, size=64, num_classes=5, params=GenParams()):
    """Render one scene from a generator stream.

    Returns (image, label) as uint8 arrays of shape (size, size, 3) and
    (size, size). Shapes cycle through a shuffled list of the foreground ids
    so a handful of shapes already touches every class; each shape's geometry
    comes from its class and its fill color from the shared pool.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    order = 1 + rng.permutation(num_classes - 1)
    lo, hi = params.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    pool = shape_color_pool(params.color_pool)

    shapes = []
    for i in range(n_shapes):
        cls = int(order[i % (num_classes - 1)])
        family, band = class_geometry(cls)
        mask = _FAMILY_MASKS[family](rng, xs, ys, size, params,
                                     scale=params.size_decay ** band)
        color_id = int(rng.integers(params.color_pool))
        shapes.append((family, i, cls, mask, color_id))

    # composite thin-on-top regardless of draw order
    label = np.zeros((size, size), np.int64)
    color = np.full((size, size), -1, np.int64)
    for family, _, cls, mask, color_id in sorted(shapes,
                                                 key=lambda s: s[:2]):
        label[mask] = cls
        color[mask] = color_id

    img = np.empty((size, size, 3))
    img[:] = class_palette(num_classes)[0]
    fg = color >= 0
    img[fg] = pool[color[fg]]
    gx, gy = rng.uniform(-params.illumination, params.illumination, 2)
    ox, oy = rng.uniform(0.0, 1.0, 2)
    img += (gx * (xs / size - ox) + gy * (ys / size - oy))[:, :, None]
    img += rng.normal(0.0, params.noise_sigma, img.shape)
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return u8, label.astype(np.uint8)


def gen_synthetic(out_dir, seed=42, n_train=200, n_val=50, size=64,
                  num_classes=5, params=None):
    """Write a dataset directory and return its manifest dict."""
    if size <= 0 or size % 32 != 0:
        raise ConfigError("size must be a positive multiple of 32")
    if not 2 <= num_classes <= 255:
        raise ConfigError("num_classes must be in [2, 255]")
    if n_train < 1 or n_val < 0:
        raise ConfigError("need n_train >= 1 and n_val >= 0")
    if params is None:
        params = GenParams()

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    n = n_train + n_val
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        image, label = render_sample(rng, size, num_classes, params)
        write_ppm(image, out / "images" / f"{i:05d}.ppm")
        write_pgm(label, out / "labels" / f"{i:05d}.pgm")

    manifest = {
        "version": 1,
        "num_classes": num_classes,
        "class_names": ["background"]
        + [f"object-{c}" for c in range(1, num_classes)],
        "n_samples": n,
        "image_size": size,
        "seed": seed,
        "splits": {"train": list(range(n_train)),
                   "val": list(range(n_train, n))},
        "generator": dataclasses.asdict(params),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


class _SplitView:
    """Lazy, order-stable view of one split of a dataset."""

    def __init__(self, dataset, indices):
        self._dataset = dataset
        self.indices = list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, k):
        return self._dataset.sample(self.indices[k])


class SegDataset:
    """Loaded dataset handle; samples are read from disk on access."""

    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest
        self.num_classes = manifest["num_classes"]
        self.class_names = manifest["class_names"]

    def __len__(self):
        return self.manifest["n_samples"]

    def image_path(self, i):
        return self.root / "images" / f"{i:05d}.ppm"

    def label_path(self, i):
        return self.root / "labels" / f"{i:05d}.pgm"

    def sample(self, i):
        """Return (image, label): image (3, H, W) float64 in [0, 1], label
        (H, W) int64 with ids in [0, num_classes) or IGNORE_LABEL."""
        image = read_ppm(self.image_path(i))
        label = read_pgm(self.label_path(i))
        if image.shape[:2] != label.shape:
            raise DataError(
                f"{self.label_path(i)}: label shape {label.shape} does not "
                f"match image shape {image.shape[:2]}")
        bad = (label >= self.num_classes) & (label != IGNORE_LABEL)
        if bad.any():
            raise DataError(
                f"{self.label_path(i)}: label ids outside "
                f"[0, {self.num_classes}) (found {int(label[bad][0])})")
        return (image.transpose(2, 0, 1).astype(np.float64) / 255.0,
                label.astype(np.int64))

    def split(self, name):
        if name not in self.manifest["splits"]:
            raise ValueError(f"unknown split {name!r}")
        return _SplitView(self, self.manifest["splits"][name])


_MANIFEST_KEYS = ("version", "num_classes", "class_names", "n_samples",
                  "image_size", "seed", "splits", "generator")


def load_dataset(path):
    """Open a dataset directory, validating the manifest and file layout."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"{mpath}: missing manifest")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: corrupt manifest ({e})") from e

    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DataError(f"{mpath}: manifest missing fields {missing}")
    if len(manifest["class_names"]) != manifest["num_classes"]:
        raise DataError(f"{mpath}: class_names count does not match "
                        f"num_classes")
    n = manifest["n_samples"]
    splits = manifest["splits"]
    listed = sorted(i for ids in splits.values() for i in ids)
    if listed != list(range(n)):
        raise DataError(f"{mpath}: splits must be disjoint and cover "
                        f"all {n} samples exactly once")

    ds = SegDataset(root, manifest)
    for i in range(n):
        for fp in (ds.image_path(i), ds.label_path(i)):
            if not fp.is_file():
                raise DataError(f"{fp}: listed in manifest but missing")
    return ds
