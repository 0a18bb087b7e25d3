"""Synthetic boundary scenes, augmentation and netpbm I/O.

Images are float arrays in [0, 1], shaped (h, w) for grayscale or (h, w, 3)
for RGB.  Annotations are (h, w) uint8 masks holding 0/1.
"""

from __future__ import annotations

import logging
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, UsageError

log = logging.getLogger(__name__)


@dataclass
class Sample:
    image: np.ndarray
    annotation: np.ndarray
    id: str

    def __post_init__(self):
        self.annotation = np.asarray(self.annotation, dtype=np.uint8)
        if self.image.shape[:2] != self.annotation.shape:
            raise UsageError(
                f"sample {self.id}: image dims {self.image.shape[:2]} != annotation dims {self.annotation.shape}"
            )
        if self.annotation.size and self.annotation.max() > 1:
            raise UsageError(f"sample {self.id}: annotation is not binary")


# ---------------------------------------------------------------------------
# resampling


def _map(img, rows, cols, order):
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [rows, cols], order=order, mode="nearest")
    return np.stack([_map(img[..., c], rows, cols, order) for c in range(img.shape[2])], axis=-1)


def _resize(img, out_hw, order):
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return img.copy()
    if oh < 1 or ow < 1:
        raise UsageError(f"cannot resize to {oh}x{ow}")
    r = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    c = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    if order == 0:
        # nearest: pick the source pixel containing the target pixel centre
        ri = np.clip(np.floor((np.arange(oh) + 0.5) * (h / oh)).astype(int), 0, h - 1)
        ci = np.clip(np.floor((np.arange(ow) + 0.5) * (w / ow)).astype(int), 0, w - 1)
        return img[ri][:, ci]
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return _map(np.asarray(img, dtype=np.float64), rr, cc, 1)


def resize_bilinear(img, out_hw):
    """Bilinear resize with pixel-centre alignment."""
    return _resize(img, out_hw, 1)


def resize_nearest(img, out_hw):
    return _resize(img, out_hw, 0)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0

    def shifted(self, dy, dx):
        return Ellipse(self.cy + dy, self.cx + dx, self.ry, self.rx, self.angle)

    def contains(self, yy, xx):
        dy, dx = yy - self.cy, xx - self.cx
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


@dataclass
class Polygon:
    vertices: list  # [(y, x), ...]

    def shifted(self, dy, dx):
        return Polygon([(y + dy, x + dx) for y, x in self.vertices])

    def contains(self, yy, xx):
        """Even-odd rule on pixel centres."""
        inside = np.zeros(yy.shape, dtype=bool)
        pts = self.vertices
        for i in range(len(pts)):
            y0, x0 = pts[i]
            y1, x1 = pts[(i + 1) % len(pts)]
            if y0 == y1:
                continue
            crosses = (yy >= min(y0, y1)) & (yy < max(y0, y1))
            xint = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (xx < xint)
        return inside

    @classmethod
    def rectangle(cls, top, left, height, width):
        """Axis-aligned rectangle covering exactly ``height`` x ``width`` pixels."""
        t, l = top - 0.5, left - 0.5
        b, r = top + height - 0.5, left + width - 0.5
        return cls([(t, l), (t, r), (b, r), (b, l)])


def label_map(shapes, dims):
    """Paint shapes in order; pixel label = 1 + index of the topmost shape."""
    h, w = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int32)
    for k, shape in enumerate(shapes):
        labels[shape.contains(yy, xx)] = k + 1
    return labels


def boundary_mask(labels):
    """1-px boundaries: a pixel is marked if a 4-neighbour carries a lower label.

    The marked contour therefore lies on the inner side of the upper region
    and is 8-connected.  Canvas border pixels are never marked.
    """
    padded = np.pad(labels, 1, mode="edge")
    centre = padded[1:-1, 1:-1]
    lower = np.zeros(labels.shape, dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:1 + dy + labels.shape[0], 1 + dx:1 + dx + labels.shape[1]]
        lower |= nb < centre
    lower[0, :] = lower[-1, :] = lower[:, 0] = lower[:, -1] = False
    return lower.astype(np.uint8)


@dataclass
class SynthSpec:
    dims: tuple = (64, 64)
    shape_count: tuple = (1, 4)
    kinds: tuple = ("ellipse", "polygon")
    fill_range: tuple = (0.0, 1.0)
    min_contrast: float = 0.25
    noise_sigma: float = 0.03
    blur_sigma: float = 0.0
    annotators: int = 1
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if min(self.dims) < 16:
            raise UsageError(f"synthetic canvas must be at least 16x16, got {self.dims}")
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.jitter < 0:
            raise UsageError("noise_sigma, blur_sigma and jitter must be non-negative")
        if self.annotators < 1:
            raise UsageError("annotators must be >= 1")
        lo, hi = self.shape_count
        if lo < 0 or hi < lo:
            raise UsageError(f"bad shape_count range {self.shape_count}")


def _random_shape(rng, kind, dims, margin=2):
    h, w = dims
    rmax = max(4.0, min(h, w) / 3.0)
    r = rng.uniform(4.0, rmax)
    cy = rng.uniform(margin + r, h - 1 - margin - r)
    cx = rng.uniform(margin + r, w - 1 - margin - r)
    if kind == "ellipse":
        return Ellipse(cy, cx, r, rng.uniform(max(3.0, 0.4 * r), r), rng.uniform(0, math.pi))
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    radii = rng.uniform(0.5 * r, r, size=n)
    return Polygon([(cy + rr * math.sin(a), cx + rr * math.cos(a)) for a, rr in zip(angles, radii)])


def _pick_fill(rng, spec, taken):
    lo, hi = spec.fill_range
    v = rng.uniform(lo, hi)
    for _ in range(50):
        if all(abs(v - t) >= spec.min_contrast for t in taken):
            break
        v = rng.uniform(lo, hi)
    return v


def render_scene(shapes, fills, background, dims, noise_sigma=0.0, blur_sigma=0.0, rng=None):
    """Rasterise shapes into (image, annotation)."""
    labels = label_map(shapes, dims)
    values = np.array([background] + list(fills), dtype=np.float64)
    image = values[labels]
    if blur_sigma > 0:
        image = ndimage.gaussian_filter(image, blur_sigma, mode="nearest")
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), boundary_mask(labels)


@dataclass
class Scene:
    """A synthetic image with one annotation per simulated annotator.

    ``annotations[0]`` traces the shapes exactly as rendered; the others trace
    copies translated by up to ``jitter`` px, imitating annotator disagreement.
    """

    image: np.ndarray
    annotations: list
    id: str


def synth_scenes(spec, n):
    if n < 1:
        raise UsageError("synth_generate needs n >= 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        count = int(rng.integers(spec.shape_count[0], spec.shape_count[1] + 1))
        background = rng.uniform(*spec.fill_range)
        shapes, fills = [], []
        for _ in range(count):
            shapes.append(_random_shape(rng, spec.kinds[int(rng.integers(len(spec.kinds)))], spec.dims))
            fills.append(_pick_fill(rng, spec, [background] + fills))
        image, ann = render_scene(shapes, fills, background, spec.dims, spec.noise_sigma, spec.blur_sigma, rng)
        anns = [ann]
        jrng = np.random.default_rng([spec.seed, i, 1])
        for _ in range(spec.annotators - 1):
            moved = [sh.shifted(*jrng.uniform(-spec.jitter, spec.jitter, size=2)) for sh in shapes]
            anns.append(boundary_mask(label_map(moved, spec.dims)))
        out.append(Scene(image, anns, f"synth_{i:04d}"))
    return out


def synth_generate(spec, n):
    """Generate ``n`` deterministic synthetic samples from ``spec`` (exact annotations)."""
    return [Sample(sc.image, sc.annotations[0], sc.id) for sc in synth_scenes(spec, n)]


def expand_annotations(image, annotations, id="img"):
    """One sample per annotator, all sharing the same image."""
    samples = []
    for k, ann in enumerate(annotations):
        if np.shape(ann) != image.shape[:2]:
            raise UsageError(f"annotation {k} dims {np.shape(ann)} != image dims {image.shape[:2]}")
        samples.append(Sample(image, (np.asarray(ann) > 0).astype(np.uint8), f"{id}_a{k}"))
    return samples


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentSpec:
    scale_range: tuple = (0.7, 1.3)
    scales_per_sample: int = 1
    rotations: int = 16
    flips: tuple = (False, True)
    min_crop: int = 16
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise UsageError(f"scale range must lie in (0, inf), got {self.scale_range}")
        if self.rotations < 1 or self.scales_per_sample < 1:
            raise UsageError("rotations and scales_per_sample must be >= 1")


def largest_inscribed_rect(w, h, angle):
    """Largest axis-aligned rectangle inside a w x h rectangle rotated by ``angle`` radians.

    Returns the real-valued (width, height).
    """
    if w <= 0 or h <= 0:
        return 0.0, 0.0
    sin_a, cos_a = abs(math.sin(angle)), abs(math.cos(angle))
    if sin_a < 1e-12 or cos_a < 1e-12:
        return (float(w), float(h)) if sin_a < 1e-12 else (float(h), float(w))
    width_longer = w >= h
    long_side, short_side = (w, h) if width_longer else (h, w)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        # half-constrained: two crop corners touch the longer side
        x = 0.5 * short_side
        return (x / sin_a, x / cos_a) if width_longer else (x / cos_a, x / sin_a)
    cos_2a = cos_a * cos_a - sin_a * sin_a
    return (w * cos_a - h * sin_a) / cos_2a, (h * cos_a - w * sin_a) / cos_2a


def rotate_crop(image, annotation, k, rotations=16):
    """Rotate counter-clockwise by k * 360/rotations degrees and crop the inscribed rectangle.

    Multiples of 90 degrees are exact array rotations; other angles resample
    the image bilinearly and the annotation by nearest neighbour.
    """
    k = k % rotations
    if (4 * k) % rotations == 0:
        q = (4 * k) // rotations
        return np.rot90(image, q).copy(), np.rot90(annotation, q).copy()
    theta = 2.0 * math.pi * k / rotations
    h, w = annotation.shape
    cw, ch = largest_inscribed_rect(w, h, theta)
    cw, ch = int(math.floor(cw + 1e-9)), int(math.floor(ch + 1e-9))
    if cw < 1 or ch < 1:
        return image[:0, :0].copy(), annotation[:0, :0].copy()
    dy, dx = np.mgrid[0:ch, 0:cw].astype(np.float64)
    dy -= (ch - 1) / 2.0
    dx -= (cw - 1) / 2.0
    ct, st = math.cos(theta), math.sin(theta)
    src_x = dx * ct - dy * st + (w - 1) / 2.0
    src_y = dx * st + dy * ct + (h - 1) / 2.0
    img = _map(np.asarray(image, dtype=np.float64), src_y, src_x, 1)
    ann = _map(annotation.astype(np.float64), src_y, src_x, 0)
    return np.clip(img, 0.0, 1.0), (ann > 0.5).astype(np.uint8)


def transform_sample(sample, scale=1.0, k=0, flip=False, rotations=16):
    """Apply scale, rotation index ``k`` and optional horizontal flip."""
    image, ann = sample.image, sample.annotation
    if scale != 1.0:
        h, w = ann.shape
        hw = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
        image = np.clip(resize_bilinear(image, hw), 0.0, 1.0)
        ann = (resize_nearest(ann, hw) > 0.5).astype(np.uint8)
    image, ann = rotate_crop(image, ann, k, rotations)
    if flip:
        image, ann = image[:, ::-1].copy(), ann[:, ::-1].copy()
    return Sample(image, ann, f"{sample.id}_s{scale:.3}_r{k}_f{int(flip)}")


def sample_scales(spec, sample_id):
    """Stratified random scales, deterministic per (seed, sample id)."""
    rng = np.random.default_rng([spec.seed, zlib.crc32(sample_id.encode())])
    lo, hi = spec.scale_range
    n = spec.scales_per_sample
    u = rng.uniform(0.0, 1.0, size=n)
    return [float(lo + (j + u[j]) * (hi - lo) / n) for j in range(n)]


@dataclass
class AugmentResult:
    samples: list = field(default_factory=list)
    dropped: int = 0


def augment(sample, spec):
    """scales x rotations x flips variants of ``sample``; undersized crops are dropped."""
    result = AugmentResult()
    for scale in sample_scales(spec, sample.id):
        for k in range(spec.rotations):
            for flip in spec.flips:
                out = transform_sample(sample, scale, k, flip, spec.rotations)
                if min(out.annotation.shape) < spec.min_crop:
                    result.dropped += 1
                    continue
                result.samples.append(out)
    if result.dropped:
        log.warning("sample %s: dropped %d undersized crops", sample.id, result.dropped)
    return result


# ---------------------------------------------------------------------------
# netpbm


_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}


def _read_header(data, path):
    """Parse magic, width, height, maxval.  Returns (fields, payload offset)."""
    tokens, pos, line = [], 0, 1
    while len(tokens) < 4:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header", line)
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        if ch.isspace():
            line += ch == b"\n"
            pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], line))
    magic, tok_line = tokens[0]
    if magic not in _MAGIC:
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}", tok_line)
    fields = [magic]
    for tok, tok_line in tokens[1:]:
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: expected integer, got {tok!r}", tok_line) from None
    # exactly one whitespace byte separates the header from binary data
    return fields, pos + 1, line


def load_image(path, allow_16bit=False):
    """Read a P2/P3/P5/P6 file into floats in [0, 1].

    Only maxval 255 is accepted unless ``allow_16bit`` (used for prediction
    maps, which are stored as 16-bit P5).
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc.strerror or exc}") from exc
    (magic, w, h, maxval), offset, line = _read_header(data, path)
    channels, binary = _MAGIC[magic]
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}", line)
    if maxval != 255 and not (allow_16bit and maxval == 65535):
        raise FormatError(f"{path}: unsupported maxval {maxval} (only 255 is supported)", line)
    count = w * h * channels
    if binary:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(data) - offset < need:
            raise FormatError(f"{path}: truncated pixel data ({len(data) - offset} of {need} bytes)", line)
        vals = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.float64)
    else:
        body = b" ".join(ln.split(b"#")[0] for ln in data[offset - 1:].splitlines())
        try:
            vals = np.array([int(t) for t in body.split()], dtype=np.float64)
        except ValueError:
            raise FormatError(f"{path}: non-integer pixel value", line) from None
        if vals.size < count:
            raise FormatError(f"{path}: expected {count} samples, found {vals.size}", line)
        vals = vals[:count]
    if vals.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}", line)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return vals.reshape(shape) / maxval


def save_image(path, image, maxval=255, binary=True):
    """Write grayscale (P5/P2) or RGB (P6/P3) with values round(v * maxval)."""
    image = np.asarray(image, dtype=np.float64)
    if maxval not in (255, 65535):
        raise UsageError(f"unsupported maxval {maxval}")
    if image.ndim == 2:
        magic = "P5" if binary else "P2"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = "P6" if binary else "P3"
    else:
        raise UsageError(f"cannot save array of shape {image.shape} as netpbm")
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)
    h, w = image.shape[:2]
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode()
    if binary:
        payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    else:
        payload = "\n".join(" ".join(str(v) for v in row) for row in q.reshape(h, -1)).encode() + b"\n"
    Path(path).write_bytes(header + payload)


def load_annotation(path):
    """Binary annotation: pixel values >= 128 (of 255) are boundary."""
    img = load_image(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return (np.rint(img * 255) >= 128).astype(np.uint8)


def load_manifest(path):
    """Parse ``image<TAB>annotation`` lines; relative paths resolve against the manifest directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.rstrip("\r\n").split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise FormatError(f"{path}: expected 'image<TAB>annotation'", lineno)
        entries.append(tuple(path.parent / p.strip() for p in parts))
    return entries


def load_dataset(manifest):
    samples = []
    for img_path, ann_path in load_manifest(manifest):
        samples.append(Sample(load_image(img_path), load_annotation(ann_path), Path(img_path).stem))
    return samples


def image_suffix(image):
    return ".pgm" if image.ndim == 2 else ".ppm"


def write_dataset(samples, out_dir):
    """Write ``images/``, ``gt/`` and ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_rel = os.path.join("images", s.id + image_suffix(s.image))
        ann_rel = os.path.join("gt", s.id + ".pgm")
        save_image(out / img_rel, s.image)
        save_image(out / ann_rel, s.annotation.astype(np.float64))
        lines.append(f"{img_rel}\t{ann_rel}")
    (out / "manifest.tsv").write_text("".join(line + "\n" for line in lines))
    return out / "manifest.tsv"
