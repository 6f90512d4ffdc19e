"""Classical, learning-free flow estimation for manufacturing proxy labels.

Pyramidal Horn-Schunck with warping: a Gaussian pyramid handles large
motions coarse-to-fine, and at each level the classic Jacobi iteration
solves the linearized brightness-constancy + quadratic-smoothness energy
for the residual motion. Derivatives use central differences and border
replication throughout.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import resize_bilinear
from .dataset import DatasetManifest, ManifestEntry, save_manifest
from .flow_io import FlowField, Image, load_image, write_flo
from .warping import bilinear_gather


@dataclass(frozen=True)
class HSConfig:
    smoothness_alpha: float = 15.0
    iterations_per_level: int = 100
    pyramid_levels: int = 4
    pyramid_scale: float = 0.5

    def __post_init__(self):
        if self.smoothness_alpha <= 0:
            raise ValueError(f"smoothness_alpha must be positive, got {self.smoothness_alpha}")
        if self.iterations_per_level < 0:
            raise ValueError(f"iterations_per_level must be >= 0, got {self.iterations_per_level}")
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError(f"pyramid_scale must be in (0, 1), got {self.pyramid_scale}")


MIN_LEVEL_EXTENT = 8

# the data term runs in 8-bit intensity units so the customary smoothness
# weights (alpha around 10..20) sit at their classic operating point
INTENSITY_SCALE = 255.0


def _as_gray_array(img) -> np.ndarray:
    """Intensities in the estimator's internal 8-bit units."""
    if isinstance(img, Image):
        arr = img.to_gray().pixels[:, :, 0].astype(np.float64)
    else:
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected a grayscale image, got shape {arr.shape}")
    return arr * INTENSITY_SCALE


def _replicate_pad(a: np.ndarray, n: int) -> np.ndarray:
    return np.pad(a, n, mode="edge")


def _central_dx(a: np.ndarray) -> np.ndarray:
    p = _replicate_pad(a, 1)
    return 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])


def _central_dy(a: np.ndarray) -> np.ndarray:
    p = _replicate_pad(a, 1)
    return 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])


def _neighbor_avg(a: np.ndarray) -> np.ndarray:
    p = _replicate_pad(a, 1)
    return 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])


def _binomial_smooth(a: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial filter [1, 4, 6, 4, 1] / 16, edge replicated."""
    p = _replicate_pad(a, 2)
    rows = (p[:, :-4] + 4 * p[:, 1:-3] + 6 * p[:, 2:-2] + 4 * p[:, 3:-1] + p[:, 4:]) / 16.0
    return (rows[:-4] + 4 * rows[1:-3] + 6 * rows[2:-2] + 4 * rows[3:-1] + rows[4:])[:, 2:-2] / 16.0


def _hs_iterate(a1: np.ndarray, a2: np.ndarray, u: np.ndarray, v: np.ndarray,
                cfg: HSConfig, data_mask: np.ndarray | None = None):
    """Jacobi sweeps on already-converted intensity arrays.

    ``data_mask`` disables the brightness-constancy term where false: those
    pixels are filled purely by the smoothness diffusion. The pyramid uses
    it for pixels whose warp sampled outside the frame."""
    mean = 0.5 * (a1 + a2)
    ix = _central_dx(mean)
    iy = _central_dy(mean)
    it = a2 - a1
    if data_mask is not None:
        ix = np.where(data_mask, ix, 0.0)
        iy = np.where(data_mask, iy, 0.0)
        it = np.where(data_mask, it, 0.0)
    denom = cfg.smoothness_alpha ** 2 + ix * ix + iy * iy
    for _ in range(cfg.iterations_per_level):
        ua = _neighbor_avg(u)
        va = _neighbor_avg(v)
        t = (ix * ua + iy * va + it) / denom
        u = ua - ix * t
        v = va - iy * t
    return u, v


def horn_schunck_level(i1, i2, init_flow: FlowField | None, cfg: HSConfig) -> FlowField:
    """Jacobi sweeps on the single-level Horn-Schunck system.

    Spatial derivatives come from the frame average, the temporal one from
    the frame difference; each sweep replaces (u, v) at every pixel with the
    exact minimizer of the local quadratic given the current neighbor
    averages. Identical frames with zero init stay at zero flow."""
    a1 = _as_gray_array(i1)
    a2 = _as_gray_array(i2)
    if a1.shape != a2.shape:
        raise ValueError(f"frame extents differ: {a1.shape} vs {a2.shape}")
    if init_flow is None:
        u = np.zeros(a1.shape)
        v = np.zeros(a1.shape)
    else:
        if (init_flow.height, init_flow.width) != a1.shape:
            raise ValueError(f"init flow {init_flow.u.shape} does not match frames {a1.shape}")
        u = init_flow.u.astype(np.float64)
        v = init_flow.v.astype(np.float64)
    u, v = _hs_iterate(a1, a2, u, v, cfg)
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def hs_energy(i1, i2, flow: FlowField, alpha: float) -> float:
    """Discrete Horn-Schunck energy consistent with the Jacobi update:
    sum of squared linearized data terms plus (alpha^2 / 4) times the sum of
    squared forward differences of u and v."""
    a1 = _as_gray_array(i1)
    a2 = _as_gray_array(i2)
    mean = 0.5 * (a1 + a2)
    ix, iy, it = _central_dx(mean), _central_dy(mean), a2 - a1
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    data = ix * u + iy * v + it
    smooth = sum(float(np.sum(np.diff(g, axis=ax) ** 2)) for g in (u, v) for ax in (0, 1))
    return float(np.sum(data * data)) + alpha * alpha / 4.0 * smooth


def _pyramid(a: np.ndarray, cfg: HSConfig) -> list:
    """Image pyramid, finest first; the coarsest level keeps both extents
    at or above MIN_LEVEL_EXTENT."""
    levels = [a]
    while len(levels) < cfg.pyramid_levels:
        h, w = levels[-1].shape
        nh = int(round(h * cfg.pyramid_scale))
        nw = int(round(w * cfg.pyramid_scale))
        if min(nh, nw) < MIN_LEVEL_EXTENT:
            break
        levels.append(resize_bilinear(_binomial_smooth(levels[-1]), nh, nw))
    return levels


# per-level residual bound (own-level pixels): the linearized data term is
# only trustworthy for roughly pixel-scale motion, and unbounded residuals
# at occluded or out-of-frame borders otherwise snowball through the levels
RESIDUAL_CLIP = 1.5


def pyramid_flow(i1, i2, cfg: HSConfig) -> FlowField:
    """Coarse-to-fine Horn-Schunck: at each level, upsample the running
    flow (values rescaled by the resolution ratio), warp frame 2 toward
    frame 1 with it, estimate the residual motion on the warped pair, and
    accumulate.

    Two stabilizers apply on multi-level pyramids: the data term is masked
    off where the warp sampled outside the frame (no correspondence exists
    there; smoothness fills the gap), and each level's residual is clipped
    to RESIDUAL_CLIP pixels. A single-level pyramid runs neither and equals
    horn_schunck_level exactly."""
    a1 = _as_gray_array(i1)
    a2 = _as_gray_array(i2)
    if a1.shape != a2.shape:
        raise ValueError(f"frame extents differ: {a1.shape} vs {a2.shape}")
    if min(a1.shape) < 16:
        raise ValueError(f"pyramid_flow needs extents >= 16, got {a1.shape}")

    p1 = _pyramid(a1, cfg)
    p2 = _pyramid(a2, cfg)
    multi_level = len(p1) > 1
    u = np.zeros(p1[-1].shape)
    v = np.zeros(p1[-1].shape)
    for l1, l2 in zip(reversed(p1), reversed(p2)):
        h, w = l1.shape
        if u.shape != (h, w):
            u = resize_bilinear(u, h, w) * (w / u.shape[1])
            v = resize_bilinear(v, h, w) * (h / v.shape[0])
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        gx, gy = xs + u, ys + v
        warped = bilinear_gather(l2, gx, gy)
        if multi_level:
            in_bounds = (gx >= 0) & (gx <= w - 1) & (gy >= 0) & (gy <= h - 1)
            du, dv = _hs_iterate(l1, warped, np.zeros((h, w)), np.zeros((h, w)),
                                 cfg, data_mask=in_bounds)
            du = np.clip(du, -RESIDUAL_CLIP, RESIDUAL_CLIP)
            dv = np.clip(dv, -RESIDUAL_CLIP, RESIDUAL_CLIP)
        else:
            du, dv = _hs_iterate(l1, warped, np.zeros((h, w)), np.zeros((h, w)), cfg)
        u = u + du
        v = v + dv
    return FlowField(u.astype(np.float32), v.astype(np.float32))


# ---------------------------------------------------------------------------
# batch proxy generation
# ---------------------------------------------------------------------------

@dataclass
class ProxyReport:
    generated: int
    skipped: list  # (pair_id, reason)


def _proxy_for_entry(args):
    img1_path, img2_path, cfg, out_path = args
    flow = pyramid_flow(load_image(img1_path).to_gray(), load_image(img2_path).to_gray(), cfg)
    blob = write_flo(flow)
    with open(out_path, "wb") as fh:
        fh.write(blob)


def generate_proxy(manifest: DatasetManifest, cfg: HSConfig, out_dir,
                   workers: int = 1) -> tuple[DatasetManifest, ProxyReport]:
    """Run the classical estimator over every manifest entry, writing one
    ``<pair_id>.flo`` per pair into ``out_dir`` plus an updated manifest
    whose entries reference the proxies. Unreadable pairs are skipped and
    reported rather than aborting the batch; outputs are deterministic in
    the inputs and config regardless of worker count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for e in manifest.entries:
        jobs.append((str(manifest.resolve(e.img1)), str(manifest.resolve(e.img2)),
                     cfg, str(out_dir / f"{e.pair_id}.flo")))

    errors: dict[str, str] = {}
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_safe_proxy_for_entry, jobs)
        for entry, err in zip(manifest.entries, results):
            if err is not None:
                errors[entry.pair_id] = err
    else:
        for entry, job in zip(manifest.entries, jobs):
            err = _safe_proxy_for_entry(job)
            if err is not None:
                errors[entry.pair_id] = err

    kept = []
    skipped = []
    for e in manifest.entries:
        if e.pair_id in errors:
            skipped.append((e.pair_id, errors[e.pair_id]))
            continue
        proxy_rel = os.path.relpath(out_dir / f"{e.pair_id}.flo", out_dir)
        kept.append(ManifestEntry(
            e.pair_id, e.split,
            os.path.relpath(manifest.resolve(e.img1), out_dir),
            os.path.relpath(manifest.resolve(e.img2), out_dir),
            None if e.gt is None else os.path.relpath(manifest.resolve(e.gt), out_dir),
            proxy_rel,
        ))

    proxy_manifest = DatasetManifest(out_dir, kept)
    save_manifest(proxy_manifest, out_dir / "manifest.txt")
    return proxy_manifest, ProxyReport(generated=len(kept), skipped=skipped)


def _safe_proxy_for_entry(job) -> str | None:
    try:
        _proxy_for_entry(job)
        return None
    except Exception as exc:  # per-pair failures must not abort the batch
        return f"{type(exc).__name__}: {exc}"
