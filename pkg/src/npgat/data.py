"""Samples, synthetic nuclei, augmentation, node targets and reconstruction.

DSB layout::

    <root>/<id>/images/<id>.png
    <root>/<id>/masks/*.png        one binary PNG per nucleus

Synthetic styles (``size`` = 32 gives the desk-scale set):

==================  ===========  =========  ==============================
style               radii (px)   nuclei     look
==================  ===========  =========  ==============================
fluorescent-small   1.5 - 3.0    3 - 8      bright blobs on dark ground
fluorescent-large   3.5 - 6.0    1 - 4      large bright blobs
stained-tissue      2.0 - 4.5    2 - 6      purple nuclei on pink tissue
grayscale           2.0 - 4.0    2 - 6      dark nuclei on light gray
==================  ===========  =========  ==============================

Radii scale linearly with ``size / 32``. Mean nucleus area of
fluorescent-small stays below 30 px at size 32.
"""
from __future__ import annotations

import glob
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.ndimage as ndi
from PIL import Image, UnidentifiedImageError

from .graph import footprint_means

logger = logging.getLogger(__name__)

STYLES = ("fluorescent-small", "fluorescent-large", "stained-tissue", "grayscale")
SMALL_AREA_LIMIT = 30.0
AUGMENT_OPS = ("brightness", "hflip", "vflip", "rot90")


class DataError(IOError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    instances: list = field(default_factory=list)  # (H, W) bool masks, disjoint
    source_id: str = ""
    class_tag: str = None

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(
                f"{self.source_id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )


# ----------------------------------------------------------------------
# PNG I/O


def read_png(path):
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    return arr


def to_rgb_float(arr):
    arr = np.asarray(arr)
    scale = 65535.0 if arr.dtype == np.uint16 else (255.0 if arr.dtype.kind in "ui" else 1.0)
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[..., :3]
    elif arr.shape[2] == 2:  # gray + alpha
        arr = np.repeat(arr[..., :1], 3, axis=2)
    return np.clip(arr, 0.0, 1.0)


def save_png(path, arr):
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype.kind == "f":
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_dsb_sample(root, sample_id):
    base = os.path.join(root, sample_id)
    image = to_rgb_float(read_png(os.path.join(base, "images", f"{sample_id}.png")))
    instances = []
    for path in sorted(glob.glob(os.path.join(base, "masks", "*.png"))):
        m = read_png(path)
        if m.ndim == 3:
            m = m[..., 0]
        m = m > 0
        if m.shape != image.shape[:2]:
            raise DataError(f"{path}: mask shape {m.shape} != image shape {image.shape[:2]}")
        instances.append(m)
    if not instances:
        logger.warning("%s: no instance masks", sample_id)
        mask = np.zeros(image.shape[:2], dtype=bool)
    else:
        stack = np.stack(instances)
        if (stack.sum(axis=0) > 1).any():
            logger.warning("%s: overlapping instance masks, keeping their union", sample_id)
        mask = stack.any(axis=0)
    return Sample(image, mask, instances, source_id=sample_id)


def list_dsb_ids(root):
    return sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d, "images"))
    )


def resample_square(sample, size):
    """Bilinear image / nearest-neighbor mask resampling to ``size x size``."""
    h, w = sample.mask.shape
    if (h, w) == (size, size):
        return sample
    zoom = (size / h, size / w)
    image = np.stack(
        [ndi.zoom(sample.image[..., k], zoom, order=1, grid_mode=True, mode="nearest")
         for k in range(3)], axis=2,
    )
    instances = []
    for inst in sample.instances:
        r = ndi.zoom(inst.astype(np.uint8), zoom, order=0, grid_mode=True, mode="nearest") > 0
        if r.any():
            instances.append(r)
    # nearest-neighbor resampling can make neighbours touch; earlier masks win
    taken = np.zeros((size, size), dtype=bool)
    disjoint = []
    for r in instances:
        r = r & ~taken
        if r.any():
            disjoint.append(r)
            taken |= r
    return replace(sample, image=np.clip(image, 0, 1), mask=taken, instances=disjoint)


# ----------------------------------------------------------------------
# synthetic nuclei

_STYLE_TABLE = {
    # radii, nuclei count range, background rgb, nucleus rgb, noise sigma
    "fluorescent-small": ((1.5, 3.0), (3, 8), (0.05, 0.05, 0.08), (0.55, 0.75, 0.95), 0.04),
    "fluorescent-large": ((3.5, 6.0), (1, 4), (0.06, 0.05, 0.08), (0.80, 0.85, 0.95), 0.04),
    "stained-tissue": ((2.0, 4.5), (2, 6), (0.92, 0.70, 0.82), (0.40, 0.20, 0.55), 0.05),
    "grayscale": ((2.0, 4.0), (2, 6), (0.78, 0.78, 0.78), (0.32, 0.32, 0.32), 0.05),
}


def _ellipse(size, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def synth_sample(rng, size, style, nuclei=None, source_id=""):
    (rmin, rmax), (nmin, nmax), bg, fg, sigma = _STYLE_TABLE[style]
    scale = size / 32.0
    n_target = int(rng.integers(nmin, nmax + 1)) if nuclei is None else int(nuclei)
    bg = np.array(bg) * rng.uniform(0.9, 1.1)
    taken = np.zeros((size, size), dtype=bool)
    instances = []
    tries = 0
    while len(instances) < n_target and tries < 200 * max(n_target, 1):
        tries += 1
        rx = rng.uniform(rmin, rmax) * scale
        ry = rx * rng.uniform(0.65, 1.0)
        cx, cy = rng.uniform(0, size, size=2)
        m = _ellipse(size, cy, cx, ry, rx, rng.uniform(0, np.pi))
        if m.sum() < 3:
            continue
        if (ndi.binary_dilation(m, iterations=1, structure=np.ones((3, 3))) & taken).any():
            continue
        instances.append(m)
        taken |= m
    image = np.broadcast_to(bg, (size, size, 3)).copy()
    for m in instances:
        tint = np.array(fg) * rng.uniform(0.85, 1.15)
        image[m] = tint
    image = ndi.gaussian_filter(image, sigma=(0.6, 0.6, 0))
    image += rng.normal(0.0, sigma, size=image.shape)
    return Sample(
        np.clip(image, 0.0, 1.0), taken, instances, source_id=source_id, class_tag=style
    )


def synth_generate(seed, count, size=32, style="mixed", nuclei=None):
    """``count`` synthetic samples; sample ``k`` depends only on ``(seed, k)``.

    ``style="mixed"`` cycles through all styles.
    """
    return list(synth_stream(seed, count, size, style, nuclei))


def synth_stream(seed, count, size=32, style="mixed", nuclei=None):
    if style != "mixed" and style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    for k in range(count):
        st = STYLES[k % len(STYLES)] if style == "mixed" else style
        rng = np.random.default_rng([seed, k])
        yield synth_sample(rng, size, st, nuclei, source_id=f"synth-{seed}-{k:05d}")


# ----------------------------------------------------------------------
# augmentation


def _geom(sample, fn):
    return replace(
        sample,
        image=np.ascontiguousarray(fn(sample.image)),
        mask=np.ascontiguousarray(fn(sample.mask)),
        instances=[np.ascontiguousarray(fn(m)) for m in sample.instances],
    )


def hflip(sample):
    return _geom(sample, lambda a: a[:, ::-1])


def vflip(sample):
    return _geom(sample, lambda a: a[::-1, :])


def rot90(sample, k=1):
    return _geom(sample, lambda a: np.rot90(a, k, axes=(0, 1)))


def brightness(sample, factor):
    return replace(sample, image=np.clip(sample.image * factor, 0.0, 1.0))


def augment(sample, seed, ops=AUGMENT_OPS, brightness_range=(0.8, 1.2)):
    """Randomly apply each op in ``ops``; masks follow geometric ops only."""
    unknown = set(ops) - set(AUGMENT_OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    out = sample
    if "brightness" in ops:
        out = brightness(out, rng.uniform(*brightness_range))
    if "hflip" in ops and rng.random() < 0.5:
        out = hflip(out)
    if "vflip" in ops and rng.random() < 0.5:
        out = vflip(out)
    if "rot90" in ops:
        k = int(rng.integers(0, 4))
        if k:
            out = rot90(out, k)
    return out


# ----------------------------------------------------------------------
# node targets and reconstruction


def build_node_targets(graph, mask):
    """Mean mask value over each node's footprint; returns ``(targets, empty)``."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (graph.n0, graph.n0):
        raise ValueError(f"mask shape {mask.shape} does not match graph size {graph.n0}")
    means, counts = footprint_means(graph.positions, mask)
    return means[:, 0], counts == 0


def covering_nodes(graph, m):
    """Per pixel, the index of the covering level-``m`` node (or -1).

    A pixel may fall in several footprints once nodes move; the node whose
    center is nearest wins, ties going to the lower index.
    """
    n0 = graph.n0
    sl = graph.level_slice(m)
    pos = graph.positions[sl]
    owner = np.full((n0, n0), -1, dtype=np.int64)
    best = np.full((n0, n0), np.inf)
    centers = np.arange(n0) + 0.5
    cx = pos[:, 0] * n0
    cy = pos[:, 1] * n0
    h = pos[:, 2] * n0 / 2.0
    r0 = np.clip(np.ceil(cy - h - 0.5), 0, None).astype(int)
    r1 = np.clip(np.floor(cy + h - 0.5), None, n0 - 1).astype(int)
    c0 = np.clip(np.ceil(cx - h - 0.5), 0, None).astype(int)
    c1 = np.clip(np.floor(cx + h - 0.5), None, n0 - 1).astype(int)
    for k in range(pos.shape[0]):
        if r1[k] < r0[k] or c1[k] < c0[k]:
            continue
        rs, cs = slice(r0[k], r1[k] + 1), slice(c0[k], c1[k] + 1)
        d = (centers[rs, None] - cy[k]) ** 2 + (centers[None, cs] - cx[k]) ** 2
        win = d < best[rs, cs]
        best[rs, cs] = np.where(win, d, best[rs, cs])
        owner[rs, cs] = np.where(win, sl.start + k, owner[rs, cs])
    return owner


def level_weights(levels, factor):
    w = np.power(float(factor), -np.arange(levels))
    return w / w.sum()


def reconstruct_mask(graph, probs, threshold=0.5):
    """Blend per-level node probabilities into a pixel map and threshold it.

    Returns ``(binary, raw)``. Levels that leave a pixel uncovered are dropped
    from that pixel's weighted mean.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (graph.n_nodes,):
        raise ValueError(f"expected {graph.n_nodes} node probabilities, got {probs.shape}")
    weights = level_weights(graph.levels, graph.factor)
    n0 = graph.n0
    num = np.zeros((n0, n0))
    den = np.zeros((n0, n0))
    for m in range(graph.levels):
        owner = covering_nodes(graph, m)
        hit = owner >= 0
        num[hit] += weights[m] * probs[owner[hit]]
        den[hit] += weights[m]
    raw = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return raw >= threshold, raw


# ----------------------------------------------------------------------
# visual outputs

RED = np.array([255, 0, 0], dtype=np.uint8)
BLUE = np.array([0, 0, 255], dtype=np.uint8)


def overlay_image(image, pred, color=(0.1, 0.9, 0.2), alpha=0.45):
    out = np.asarray(image, dtype=np.float64).copy()
    out[pred] = (1 - alpha) * out[pred] + alpha * np.asarray(color)
    return np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)


def difference_image(image, gt, pred):
    """Extra prediction red, missed ground truth blue, correct foreground the
    lightened original, background the darkened original."""
    img = np.asarray(image, dtype=np.float64)
    out = 0.4 * img
    both = gt & pred
    out[both] = 0.6 * img[both] + 0.4
    out = np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)
    out[pred & ~gt] = RED
    out[gt & ~pred] = BLUE
    return out
