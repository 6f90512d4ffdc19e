"""Synthetic training pairs with exact ground-truth flow, manifests, loaders.

The generator mimics an affine-motion sprite dataset at desk scale: a
procedurally textured background plus one to three textured convex polygon
sprites, each layer moving under its own affine map between the two frames.
Both frames sample the same continuous textures, so photometric consistency
holds by construction up to resampling blur, and the ground-truth flow at a
pixel is the analytic displacement of the topmost layer covering it in
frame 1 (pixels occluded in frame 2 keep their layer's motion).

Manifest file: UTF-8 lines, one entry per line,
``pair_id <TAB> split <TAB> img1 <TAB> img2 [<TAB> gt.flo] [<TAB> proxy.flo]``
with ``-`` as the placeholder for an absent gt column and ``#`` comments.
Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import resize_bilinear
from .flow_io import FlowField, Image, load_flo, load_image, save_flo, save_image
from .warping import bilinear_gather

TEXTURE_MARGIN = 32           # texture overhang beyond the frame, in pixels
MAX_TRANSLATION = 12.0
MAX_ROTATION_DEG = 10.0
SCALE_RANGE = (0.95, 1.05)
TEST_EVERY = 9                # every 9th generated pair goes to the test split


# ---------------------------------------------------------------------------
# pair specification and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One moving layer: a texture, an affine motion, and (for sprites) a
    convex polygon footprint in frame-1 pixel coordinates. ``polygon`` is
    None for the background, which covers the whole frame."""

    texture: np.ndarray       # (H + 2*margin, W + 2*margin) floats in [0, 1]
    affine: np.ndarray        # 2x3, maps frame-1 (x, y, 1) to frame-2 (x, y)
    polygon: np.ndarray | None = None


@dataclass(frozen=True)
class PairSpec:
    pair_id: str
    height: int
    width: int
    layers: tuple          # bottom (background) to top


@dataclass(frozen=True)
class SamplePair:
    """One training example; grids all share extents. gt_flow, when present,
    is analytic (never estimated); proxy_flow comes from a classical pass."""

    pair_id: str
    i1: Image
    i2: Image
    gt_flow: FlowField | None = None
    proxy_flow: FlowField | None = None

    def __post_init__(self):
        shape = (self.i1.height, self.i1.width)
        for grid in (self.i2, self.gt_flow, self.proxy_flow):
            if grid is not None and (grid.height, grid.width) != shape:
                raise ValueError(f"sample {self.pair_id}: grid extents differ from {shape}")


def _make_texture(rng, th: int, tw: int) -> np.ndarray:
    """Smooth three-octave noise texture, normalized into [0.06, 0.94].

    Octave granularities and gains are sampled per texture so no two layers
    share spatial statistics."""
    octaves = (
        (int(rng.integers(6, 29)), 1.0),
        (int(rng.integers(3, 8)), rng.uniform(0.3, 0.8)),
        (2, rng.uniform(0.05, 0.25)),
    )
    acc = np.zeros((th, tw))
    for cell, gain in octaves:
        gh, gw = max(th // cell, 2) + 1, max(tw // cell, 2) + 1
        acc += gain * resize_bilinear(rng.uniform(-1.0, 1.0, (gh, gw)), th, tw)
    lo, hi = acc.min(), acc.max()
    return (0.06 + 0.88 * (acc - lo) / max(hi - lo, 1e-9)).astype(np.float32)


def _sample_affine(rng, cx: float, cy: float) -> np.ndarray:
    """Rotation + isotropic scale about (cx, cy), then translation."""
    angle = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    scale = rng.uniform(*SCALE_RANGE)
    direction = rng.uniform(0.0, 2.0 * np.pi)
    dist = rng.uniform(0.0, MAX_TRANSLATION)
    tx, ty = dist * np.cos(direction), dist * np.sin(direction)
    c, s = scale * np.cos(angle), scale * np.sin(angle)
    # A p = R (p - center) + center + t
    return np.array([
        [c, -s, cx - c * cx + s * cy + tx],
        [s, c, cy - s * cx - c * cy + ty],
    ])


def _sample_polygon(rng, width: int, height: int) -> np.ndarray:
    """Convex polygon: 3 to 6 vertices on a random ellipse, in pixel coords."""
    n = int(rng.integers(3, 7))
    cx = rng.uniform(0.15 * width, 0.85 * width)
    cy = rng.uniform(0.15 * height, 0.85 * height)
    rx = rng.uniform(0.07, 0.26) * width
    ry = rng.uniform(0.07, 0.26) * height
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)


def sample_pair_spec(seed: int, index: int, height: int, width: int,
                     pair_id: str | None = None) -> PairSpec:
    """Deterministic per (seed, index) specification of one pair."""
    rng = np.random.default_rng([seed, index])
    th, tw = height + 2 * TEXTURE_MARGIN, width + 2 * TEXTURE_MARGIN
    layers = [LayerSpec(_make_texture(rng, th, tw),
                        _sample_affine(rng, width / 2.0, height / 2.0))]
    for _ in range(int(rng.integers(1, 4))):
        poly = _sample_polygon(rng, width, height)
        cx, cy = poly.mean(axis=0)
        layers.append(LayerSpec(_make_texture(rng, th, tw),
                                _sample_affine(rng, cx, cy), poly))
    return PairSpec(pair_id or f"pair_{index:05d}", height, width, tuple(layers))


def _affine_apply(a: np.ndarray, xs, ys):
    return a[0, 0] * xs + a[0, 1] * ys + a[0, 2], a[1, 0] * xs + a[1, 1] * ys + a[1, 2]


def _affine_invert(a: np.ndarray) -> np.ndarray:
    lin = np.linalg.inv(a[:, :2])
    return np.hstack([lin, -(lin @ a[:, 2])[:, None]])


def _coverage(polygon: np.ndarray, xs, ys) -> np.ndarray:
    """Soft inside-measure of a convex polygon: 1 inside, 0 outside, a one
    pixel transition band along edges (signed distance to the hull)."""
    centroid = polygon.mean(axis=0)
    sdist = np.full(xs.shape, np.inf)
    n = len(polygon)
    for i in range(n):
        p0, p1 = polygon[i], polygon[(i + 1) % n]
        edge = p1 - p0
        normal = np.array([-edge[1], edge[0]]) / max(np.hypot(*edge), 1e-9)
        if np.dot(normal, centroid - p0) < 0:
            normal = -normal
        sdist = np.minimum(sdist, normal[0] * (xs - p0[0]) + normal[1] * (ys - p0[1]))
    return np.clip(0.5 + sdist, 0.0, 1.0)


def _render(spec: PairSpec):
    """Render both frames plus ground truth and the per-frame top-layer maps."""
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    m = TEXTURE_MARGIN

    i1 = bilinear_gather(spec.layers[0].texture, xs + m, ys + m)
    labels1 = np.zeros((h, w), dtype=np.intp)
    for li, layer in enumerate(spec.layers[1:], start=1):
        cov = _coverage(layer.polygon, xs, ys)
        i1 = cov * bilinear_gather(layer.texture, xs + m, ys + m) + (1.0 - cov) * i1
        labels1[cov > 0.5] = li

    inv0 = _affine_invert(spec.layers[0].affine)
    bx, by = _affine_apply(inv0, xs, ys)
    i2 = bilinear_gather(spec.layers[0].texture, bx + m, by + m)
    labels2 = np.zeros((h, w), dtype=np.intp)
    for li, layer in enumerate(spec.layers[1:], start=1):
        sx, sy = _affine_apply(_affine_invert(layer.affine), xs, ys)
        cov = _coverage(layer.polygon, sx, sy)
        i2 = cov * bilinear_gather(layer.texture, sx + m, sy + m) + (1.0 - cov) * i2
        labels2[cov > 0.5] = li

    u = np.empty((h, w))
    v = np.empty((h, w))
    for li, layer in enumerate(spec.layers):
        fx, fy = _affine_apply(layer.affine, xs, ys)
        sel = labels1 == li
        u[sel] = (fx - xs)[sel]
        v[sel] = (fy - ys)[sel]

    return {
        "i1": np.clip(i1, 0.0, 1.0), "i2": np.clip(i2, 0.0, 1.0),
        "u": u, "v": v, "labels1": labels1, "labels2": labels2,
    }


def render_pair(spec: PairSpec) -> SamplePair:
    parts = _render(spec)
    return SamplePair(
        pair_id=spec.pair_id,
        i1=Image(parts["i1"].astype(np.float32)),
        i2=Image(parts["i2"].astype(np.float32)),
        gt_flow=FlowField(parts["u"].astype(np.float32), parts["v"].astype(np.float32)),
    )


def consistency_mask(spec: PairSpec, margin: int = 1) -> np.ndarray:
    """Pixels whose frame-2 correspondent stays in bounds (by ``margin``)
    and lands on the same layer, i.e. where photometric consistency is
    expected to hold."""
    parts = _render(spec)
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    qx, qy = xs + parts["u"], ys + parts["v"]
    inside = ((qx >= margin) & (qx <= w - 1 - margin)
              & (qy >= margin) & (qy <= h - 1 - margin))
    rx = np.clip(np.rint(qx), 0, w - 1).astype(np.intp)
    ry = np.clip(np.rint(qy), 0, h - 1).astype(np.intp)
    return inside & (parts["labels2"][ry, rx] == parts["labels1"])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _flip_flow(f: FlowField | None) -> FlowField | None:
    if f is None:
        return None
    mask = None if f.valid_mask is None else f.valid_mask[:, ::-1]
    return FlowField(-f.u[:, ::-1], f.v[:, ::-1], mask)


def flip_sample(sample: SamplePair) -> SamplePair:
    """Horizontal mirror; u changes sign, v is mirrored unchanged. Involutive."""
    return SamplePair(
        pair_id=sample.pair_id,
        i1=Image(sample.i1.pixels[:, ::-1]),
        i2=Image(sample.i2.pixels[:, ::-1]),
        gt_flow=_flip_flow(sample.gt_flow),
        proxy_flow=_flip_flow(sample.proxy_flow),
    )


def _crop_flow(f: FlowField | None, top, left, h, w) -> FlowField | None:
    if f is None:
        return None
    mask = None if f.valid_mask is None else f.valid_mask[top:top + h, left:left + w]
    return FlowField(f.u[top:top + h, left:left + w], f.v[top:top + h, left:left + w], mask)


def crop_sample(sample: SamplePair, top: int, left: int, height: int, width: int) -> SamplePair:
    if top < 0 or left < 0 or top + height > sample.i1.height or left + width > sample.i1.width:
        raise ValueError(
            f"crop {height}x{width}@({top},{left}) exceeds image {sample.i1.height}x{sample.i1.width}")
    return SamplePair(
        pair_id=sample.pair_id,
        i1=Image(sample.i1.pixels[top:top + height, left:left + width]),
        i2=Image(sample.i2.pixels[top:top + height, left:left + width]),
        gt_flow=_crop_flow(sample.gt_flow, top, left, height, width),
        proxy_flow=_crop_flow(sample.proxy_flow, top, left, height, width),
    )


def augment(sample: SamplePair, seed, crop: tuple | None = None, flip_prob: float = 0.5,
            max_noise_sigma: float = 0.04, brightness_range: tuple = (0.8, 1.25)) -> SamplePair:
    """Sampled augmentation: horizontal flip, optional random crop, global
    brightness scale on both frames, additive Gaussian noise. Flow labels
    follow the geometry; photometric changes leave them untouched.
    Deterministic in ``seed`` (an int or a sequence of ints)."""
    if sample.gt_flow is None and sample.proxy_flow is None:
        raise ValueError(f"sample {sample.pair_id} carries no flow labels to transform")
    rng = np.random.default_rng(seed)
    out = sample
    if flip_prob > 0 and rng.random() < flip_prob:
        out = flip_sample(out)
    if crop is not None:
        ch, cw = crop
        top = int(rng.integers(0, out.i1.height - ch + 1))
        left = int(rng.integers(0, out.i1.width - cw + 1))
        out = crop_sample(out, top, left, ch, cw)
    scale = rng.uniform(*brightness_range)
    p1 = out.i1.pixels.astype(np.float64) * scale
    p2 = out.i2.pixels.astype(np.float64) * scale
    if max_noise_sigma > 0:
        sigma = rng.uniform(0.0, max_noise_sigma)
        p1 = p1 + sigma * rng.standard_normal(p1.shape)
        p2 = p2 + sigma * rng.standard_normal(p2.shape)
    return replace(out,
                   i1=Image(np.clip(p1, 0.0, 1.0).astype(np.float32)),
                   i2=Image(np.clip(p2, 0.0, 1.0).astype(np.float32)))


def downsample_flow(flow: FlowField, factor: int) -> FlowField:
    """Block-mean the displacement grids and convert the values into the
    coarse scale's pixel units (divide by ``factor``, a power of two)."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a positive power of two, got {factor}")
    if factor == 1:
        return flow
    h, w = flow.height, flow.width
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by factor {factor}")

    def pool(grid):
        return grid.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))

    mask = flow.valid_mask
    if mask is not None:
        mask = mask.reshape(h // factor, factor, w // factor, factor).all(axis=(1, 3))
    return FlowField((pool(flow.u.astype(np.float64)) / factor).astype(np.float32),
                     (pool(flow.v.astype(np.float64)) / factor).astype(np.float32),
                     mask)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    split: str
    img1: str
    img2: str
    gt: str | None = None
    proxy: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list

    def subset(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(manifest: DatasetManifest, path) -> DatasetManifest:
    """Write the manifest with paths made relative to the file's directory."""
    path = Path(path)
    base = path.parent

    def rel(p):
        return "-" if p is None else os.path.relpath(manifest.root / p, base)

    lines = ["# pair_id\tsplit\timg1\timg2\tgt\tproxy"]
    for e in manifest.entries:
        fields = [e.pair_id, e.split, rel(e.img1), rel(e.img2)]
        if e.gt is not None or e.proxy is not None:
            fields.append(rel(e.gt))
        if e.proxy is not None:
            fields.append(rel(e.proxy))
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    entries = [ManifestEntry(e.pair_id, e.split, rel(e.img1), rel(e.img2),
                             None if e.gt is None else rel(e.gt),
                             None if e.proxy is None else rel(e.proxy))
               for e in manifest.entries]
    return DatasetManifest(base, entries)


def load_manifest(path) -> DatasetManifest:
    """Parse and sanity-check a manifest. Image files must exist; gt and
    proxy paths are validated lazily when actually read, so a manifest with
    stale gt references still loads (training never touches them)."""
    path = Path(path)
    entries = []
    seen = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 4 or len(fields) > 6:
            raise ValueError(f"{path}:{lineno}: expected 4-6 tab-separated fields, got {len(fields)}")
        pair_id, split = fields[0], fields[1]
        if split not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: split must be train or test, got {split!r}")
        if pair_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate pair_id {pair_id!r}")
        seen.add(pair_id)
        opt = [None if f == "-" else f for f in fields[4:]]
        gt = opt[0] if len(opt) > 0 else None
        proxy = opt[1] if len(opt) > 1 else None
        entries.append(ManifestEntry(pair_id, split, fields[2], fields[3], gt, proxy))
    manifest = DatasetManifest(path.parent, entries)
    for e in entries:
        for img in (e.img1, e.img2):
            if not manifest.resolve(img).is_file():
                raise FileNotFoundError(f"manifest entry {e.pair_id}: missing image {img}")
    return manifest


def load_sample(manifest: DatasetManifest, entry: ManifestEntry,
                with_gt: bool = False, with_proxy: bool = True) -> SamplePair:
    gt = None
    if with_gt:
        if entry.gt is None:
            raise ValueError(f"entry {entry.pair_id} has no ground-truth flow")
        gt = load_flo(manifest.resolve(entry.gt))
    proxy = None
    if with_proxy and entry.proxy is not None:
        proxy = load_flo(manifest.resolve(entry.proxy))
    return SamplePair(
        pair_id=entry.pair_id,
        i1=load_image(manifest.resolve(entry.img1)).to_gray(),
        i2=load_image(manifest.resolve(entry.img2)).to_gray(),
        gt_flow=gt,
        proxy_flow=proxy,
    )


def iterate_batches(manifest: DatasetManifest, split: str, batch_size: int, seed: int,
                    epoch: int = 0, with_gt: bool = False, cache: dict | None = None):
    """Yield lists of SamplePairs covering one shuffled epoch.

    The order depends only on (seed, epoch); two loaders with the same seed
    see identical batches. ``cache`` (pair_id -> SamplePair) avoids
    re-reading files across epochs."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    entries = manifest.subset(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} entries")
    order = np.random.default_rng([seed, epoch]).permutation(len(entries))
    for start in range(0, len(entries), batch_size):
        batch = []
        for idx in order[start:start + batch_size]:
            e = entries[idx]
            sample = cache.get(e.pair_id) if cache is not None else None
            if sample is None:
                sample = load_sample(manifest, e, with_gt=with_gt)
                if cache is not None:
                    cache[e.pair_id] = sample
            batch.append(sample)
        yield batch


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def generate_synthetic(count: int, extents: tuple, seed: int, out_dir) -> DatasetManifest:
    """Write ``count`` synthetic pairs (PGM frames + .flo ground truth) and a
    manifest under ``out_dir``. Every 9th pair lands in the test split, so
    count = 576 gives the standard 512-train / 64-test desk-scale benchmark.
    Bit-identical on rerun for the same (count, extents, seed)."""
    height, width = extents
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if height % 64 or width % 64:
        raise ValueError(f"extents must be divisible by 64, got {height}x{width}")
    out_dir = Path(out_dir)
    (out_dir / "img").mkdir(parents=True, exist_ok=True)
    (out_dir / "flow").mkdir(parents=True, exist_ok=True)

    entries = []
    for index in range(count):
        spec = sample_pair_spec(seed, index, height, width)
        pair = render_pair(spec)
        img1 = f"img/{spec.pair_id}_1.pgm"
        img2 = f"img/{spec.pair_id}_2.pgm"
        gt = f"flow/{spec.pair_id}.flo"
        save_image(pair.i1, out_dir / img1)
        save_image(pair.i2, out_dir / img2)
        save_flo(pair.gt_flow, out_dir / gt)
        split = "test" if index % TEST_EVERY == TEST_EVERY - 1 else "train"
        entries.append(ManifestEntry(spec.pair_id, split, img1, img2, gt))

    manifest = DatasetManifest(out_dir, entries)
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest
