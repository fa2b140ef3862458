"""Synthetic multi-annotator disk shapes, shape models, TPS augmentation and dataset files.

Coordinates are image-normalized: x runs left to right and y top to bottom,
both in [0, 1].  Pixel (row i, column j) has its center at
((j + 0.5) / W, (i + 0.5) / H).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from matplotlib.path import Path
from scipy import ndimage

from .metrics import shape_variation

FORMAT_VERSION = 1
EXPERT_NAMES = ("expert1", "expert2", "expert3")


@dataclass
class SceneParams:
    J: int = 176
    H: int = 64
    W: int = 64
    n_experts: int = 3
    ambiguity_levels: tuple = (0.5, 1.0, 2.0)
    # consensus family
    harmonic_amplitude: float = 0.015
    max_rotation: float = 0.15
    # expert noise amplitude per unit ambiguity, in normalized units (two pixels at 64x64)
    noise_unit: float = 2.0 / 64
    noise_harmonics: int = 6
    min_curvature_gain: float = 0.3
    # image degradation grows with ambiguity so the image carries the cue
    blur_base: float = 0.6
    blur_per_ambiguity: float = 1.5
    pixel_noise_base: float = 0.02
    pixel_noise_per_ambiguity: float = 0.06
    texture: float = 0.03
    contrast: float = 0.45
    contrast_falloff: float = 1.0
    # boundary stretches where experts disagree fade out, in proportion to ambiguity
    edge_fade_per_ambiguity: float = 0.5
    supersample: int = 4


@dataclass
class Scene:
    record_id: str
    image: np.ndarray  # (H, W) float32
    experts: np.ndarray  # (E, J, 2)
    consensus: np.ndarray  # (J, 2)
    ambiguity: float
    split: str = "train"
    meta: dict = field(default_factory=dict)


def scene_stream(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 0xD15C]))


# -- contour geometry -------------------------------------------------------

def superellipse_contour(J, center, axes, exponent, rotation, harmonics=()):
    """Closed contour of J points at evenly spaced parameter angles.

    Point 0 sits at the +x end of the major axis, so index j refers to the
    same location on every contour.  ``harmonics`` is a list of
    (order, amplitude, phase) radial perturbations.
    """
    t = 2 * np.pi * np.arange(J) / J
    e = 2.0 / exponent
    ct, st = np.cos(t), np.sin(t)
    x = axes[0] * np.sign(ct) * np.abs(ct) ** e
    y = axes[1] * np.sign(st) * np.abs(st) ** e
    r = np.ones(J)
    for k, amp, phase in harmonics:
        r += amp * np.cos(k * t + phase)
    x, y = x * r, y * r
    c, s = np.cos(rotation), np.sin(rotation)
    return np.stack([center[0] + c * x - s * y, center[1] + s * x + c * y], axis=1)


def resample_arclength(contour, J):
    """J points at equal arc length along a closed polyline, starting at its first point."""
    closed = np.vstack([contour, contour[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.arange(J) * arc[-1] / J
    return np.stack([np.interp(target, arc, closed[:, k]) for k in range(2)], axis=1)


def curvature(contour):
    """Signed curvature of a closed polyline via periodic central differences."""
    d1 = (np.roll(contour, -1, axis=0) - np.roll(contour, 1, axis=0)) / 2.0
    d2 = np.roll(contour, -1, axis=0) - 2 * contour + np.roll(contour, 1, axis=0)
    num = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    den = np.maximum((d1 ** 2).sum(axis=1) ** 1.5, 1e-18)
    return num / den


def normals(contour):
    """Unit normals pointing away from the contour's centroid side."""
    tangent = np.roll(contour, -1, axis=0) - np.roll(contour, 1, axis=0)
    n = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-18)
    outward = np.sum(n * (contour - contour.mean(axis=0)), axis=1)
    return n * np.where(outward.sum() >= 0, 1.0, -1.0)


def smooth_periodic_noise(J, harmonics, rng):
    """Unit-RMS random Fourier series along the contour, clipped to [-3, 3]."""
    t = 2 * np.pi * np.arange(J) / J
    eta = np.zeros(J)
    for k in range(1, harmonics + 1):
        a, b = rng.normal(0.0, 1.0 / k, size=2)
        eta += a * np.cos(k * t) + b * np.sin(k * t)
    rms = np.sqrt(np.mean(eta ** 2))
    if rms > 0:
        eta /= rms
    return np.clip(eta, -3.0, 3.0)


def disagreement_gain(consensus, params):
    """Per-point noise gain in [min_curvature_gain, 1], largest where the contour bends."""
    kappa = np.abs(curvature(consensus))
    return params.min_curvature_gain + (1 - params.min_curvature_gain) * kappa / max(kappa.max(), 1e-18)


def expert_shapes(consensus, ambiguity, params, rng):
    """Consensus plus smooth normal-direction noise, stronger where the contour bends."""
    gain = disagreement_gain(consensus, params)
    n = normals(consensus)
    out = []
    for _ in range(params.n_experts):
        eta = smooth_periodic_noise(len(consensus), params.noise_harmonics, rng)
        out.append(consensus + (ambiguity * params.noise_unit * gain * eta)[:, None] * n)
    return np.stack(out)


# -- image synthesis --------------------------------------------------------

def pixel_centers(H, W, supersample=1):
    s = supersample
    xs = (np.arange(W * s) + 0.5) / (W * s)
    ys = (np.arange(H * s) + 0.5) / (H * s)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def coverage(contour, H, W, supersample=4):
    """Fraction of each pixel inside the closed contour."""
    inside = Path(contour).contains_points(pixel_centers(H, W, supersample))
    mask = inside.reshape(H * supersample, W * supersample).astype(np.float64)
    return mask.reshape(H, supersample, W, supersample).mean(axis=(1, 3))


def render_image(consensus, ambiguity, params, rng):
    H, W = params.H, params.W
    cov = coverage(consensus, H, W, params.supersample)
    texture = ndimage.gaussian_filter(rng.normal(size=(H, W)), sigma=4.0, mode="wrap")
    texture *= params.texture / max(texture.std(), 1e-12)
    contrast = params.contrast / (1.0 + params.contrast_falloff * ambiguity)
    # fade the object near boundary points with a high disagreement gain
    pix = pixel_centers(H, W)
    nearest = np.argmin(((pix[:, None, :] - consensus[None, :, :]) ** 2).sum(axis=2), axis=1)
    fade = min(params.edge_fade_per_ambiguity * ambiguity, 1.0) * disagreement_gain(consensus, params)
    visibility = (1.0 - fade[nearest]).reshape(H, W)
    img = 0.3 + texture + contrast * cov * visibility
    img = ndimage.gaussian_filter(img, sigma=params.blur_base + params.blur_per_ambiguity * ambiguity, mode="nearest")
    img += rng.normal(0.0, params.pixel_noise_base + params.pixel_noise_per_ambiguity * ambiguity, size=(H, W))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def random_consensus(J, rng, harmonic_amplitude=0.015, max_rotation=0.15):
    center = rng.uniform(0.42, 0.58, size=2)
    axes = (rng.uniform(0.24, 0.34), rng.uniform(0.11, 0.18))
    exponent = rng.uniform(2.2, 4.0)
    rotation = rng.uniform(-max_rotation, max_rotation)
    harmonics = [(k, rng.uniform(0.0, harmonic_amplitude), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4)]
    # landmarks at equal arc length, so correspondence follows the visible outline
    dense = superellipse_contour(16 * J, center, axes, exponent, rotation, harmonics)
    shape = resample_arclength(dense, J)
    meta = {"center": center.tolist(), "axes": list(axes), "exponent": exponent, "rotation": rotation}
    return shape, meta


def generate_scene(params, rng, ambiguity=None, record_id="scene"):
    """One synthetic image with its consensus contour and noisy expert contours."""
    consensus, meta = random_consensus(params.J, rng, params.harmonic_amplitude, params.max_rotation)
    if ambiguity is None:
        ambiguity = float(rng.choice(np.asarray(params.ambiguity_levels, dtype=np.float64)))
    experts = expert_shapes(consensus, ambiguity, params, rng)
    image = render_image(consensus, ambiguity, params, rng)
    meta["ambiguity"] = ambiguity
    return Scene(record_id, image, experts, consensus, float(ambiguity), meta=meta)


def generate_dataset(n_scenes, params, seed, test_fraction=0.2, ambiguities=None):
    """``n_scenes`` scenes with a random scene-level train/test split."""
    scenes = []
    for i in range(n_scenes):
        amb = None if ambiguities is None else ambiguities[i % len(ambiguities)]
        scenes.append(generate_scene(params, scene_stream(seed, i), ambiguity=amb, record_id=f"s{i:04d}"))
    n_test = int(round(test_fraction * n_scenes))
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5911])).permutation(n_scenes)
    test_ids = set(order[:n_test].tolist())
    for i, sc in enumerate(scenes):
        sc.split = "test" if i in test_ids else "train"
    return scenes


def ambiguity_table(scenes, k_max=100, seed=0):
    """Mean ground-truth shape-variation per ambiguity level."""
    from .matching import sample_gt_shapes

    rng = np.random.default_rng(seed)
    groups = {}
    for sc in scenes:
        v = shape_variation(sample_gt_shapes(sc.experts, k_max, rng)).scalar_variation
        groups.setdefault(sc.ambiguity, []).append(v)
    return {amb: (len(v), float(np.mean(v))) for amb, v in sorted(groups.items())}


# -- small images for the image autoencoder ---------------------------------

def small_image_set(n, size, rng):
    """Filled disks, squares, triangles and rings at random places, (n, size, size)."""
    centers = pixel_centers(size, size)
    out = np.zeros((n, size, size), dtype=np.float32)
    for i in range(n):
        kind = rng.integers(4)
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        r = rng.uniform(0.15, 0.3)
        x, y = centers[:, 0] - cx, centers[:, 1] - cy
        if kind == 0:
            mask = x * x + y * y <= r * r
        elif kind == 1:
            mask = (np.abs(x) <= r * 0.8) & (np.abs(y) <= r * 0.8)
        elif kind == 2:
            mask = (y <= r * 0.7) & (y >= -r * 0.9 + 2 * np.abs(x))
        else:
            d2 = x * x + y * y
            mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
        out[i] = (rng.uniform(0.6, 1.0) * mask).reshape(size, size)
    return out


# -- statistical shape model ------------------------------------------------

@dataclass
class StatisticalShapeModel:
    mean_shape: np.ndarray  # (J, 2)
    modes: np.ndarray  # (K, 2J), orthonormal rows
    mode_variances: np.ndarray  # (K,), nonincreasing
    total_variance: float

    @property
    def n_modes(self):
        return len(self.mode_variances)

    def explained_fraction(self):
        if self.total_variance <= 0:
            return 1.0
        return float(self.mode_variances.sum() / self.total_variance)


def fit_ssm(shapes, variance_fraction=0.8):
    """PCA on flattened shapes, keeping the fewest modes reaching ``variance_fraction``."""
    shapes = np.asarray(shapes, dtype=np.float64)
    if shapes.shape[0] < 2:
        raise ValueError("fit_ssm needs at least two shapes")
    if not 0 < variance_fraction <= 1:
        raise ValueError("variance_fraction must lie in (0, 1]")
    K, J = shapes.shape[:2]
    X = shapes.reshape(K, -1)
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    variances = s ** 2 / (K - 1)
    total = float(variances.sum())
    scale = max(float(np.abs(X).max()), 1.0)
    if total <= (1e-12 * scale) ** 2:
        return StatisticalShapeModel(mean.reshape(J, 2), np.zeros((0, 2 * J)), np.zeros(0), 0.0)
    cum = np.cumsum(variances) / total
    n = int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)
    n = min(n, int(np.sum(variances > 0)))
    modes = vt[:n].copy()
    # fix the sign so the largest-magnitude component of each mode is positive
    idx = np.argmax(np.abs(modes), axis=1)
    modes *= np.sign(modes[np.arange(n), idx])[:, None]
    return StatisticalShapeModel(mean.reshape(J, 2), modes, variances[:n].copy(), total)


def sample_ssm(ssm, rng, coefficients=None, truncate=3.0):
    """Mean plus modes weighted by normal coefficients truncated at ``truncate`` sigma."""
    if coefficients is None:
        sd = np.sqrt(ssm.mode_variances)
        coefficients = np.zeros(ssm.n_modes)
        for i in range(ssm.n_modes):
            b = rng.normal()
            while abs(b) > truncate:
                b = rng.normal()
            coefficients[i] = b * sd[i]
    coefficients = np.asarray(coefficients, dtype=np.float64)
    flat = ssm.mean_shape.reshape(-1) + coefficients @ ssm.modes
    return flat.reshape(ssm.mean_shape.shape)


# -- thin-plate splines -----------------------------------------------------

def _tps_kernel(r2):
    # r^2 log r = 0.5 r^2 log r^2, with the removable singularity at 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r2 > 0, 0.5 * r2 * np.log(np.where(r2 > 0, r2, 1.0)), 0.0)


class ThinPlateSpline:
    """2-D thin-plate spline from control points ``src`` to ``dst``."""

    def __init__(self, src, dst, lam=0.0):
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
            raise ValueError(f"control point arrays must both be (n, 2), got {src.shape} and {dst.shape}")
        if lam < 0:
            raise ValueError("regularization must be nonnegative")
        n = len(src)
        diff = src[:, None, :] - src[None, :, :]
        r2 = (diff ** 2).sum(axis=2)
        if lam == 0 and n > 1 and np.min(r2[np.triu_indices(n, 1)]) < 1e-24:
            raise ValueError("duplicate TPS control points; use a regularization lambda > 0")
        P = np.hstack([np.ones((n, 1)), src])
        sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
        if n < 3 or sv[-1] <= 1e-10 * sv[0]:
            raise ValueError("collinear TPS control points leave the affine part undetermined; "
                             "use more spread-out points or a regularization lambda > 0")
        A = np.zeros((n + 3, n + 3))
        A[:n, :n] = _tps_kernel(r2) + lam * np.eye(n)
        A[:n, n:] = P
        A[n:, :n] = P.T
        b = np.zeros((n + 3, 2))
        b[:n] = dst
        try:
            coef = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            raise ValueError("singular TPS system; use a regularization lambda > 0") from None
        self.src, self.dst, self.lam = src, dst, lam
        self.system, self.rhs = A, b
        self.weights, self.affine = coef[:n], coef[n:]

    def residual(self):
        """Max abs residual of the linear system actually solved."""
        coef = np.vstack([self.weights, self.affine])
        return float(np.abs(self.system @ coef - self.rhs).max())

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        r2 = ((pts[:, None, :] - self.src[None, :, :]) ** 2).sum(axis=2)
        return _tps_kernel(r2) @ self.weights + self.affine[0] + pts @ self.affine[1:]


def resample_image(image, coords):
    """Bilinear lookup of ``image`` at normalized (x, y) coordinates, (H*W, 2)."""
    H, W = image.shape
    cols = coords[:, 0] * W - 0.5
    rows = coords[:, 1] * H - 0.5
    return ndimage.map_coordinates(image.astype(np.float64), [rows, cols], order=1, mode="nearest")


def tps_warp(image, source_shape, target_shape, expert_shapes=(), lam=0.0, step=8):
    """Warp ``image`` so ``source_shape`` lands on ``target_shape``.

    Shapes are forward-mapped through the spline fitted on every ``step``-th
    correspondence point (fewer on short contours); the image is pulled back through the inverse fit.
    Returns (warped image, warped shapes with the same leading shape as
    ``expert_shapes``).
    """
    source_shape = np.asarray(source_shape, dtype=np.float64)
    target_shape = np.asarray(target_shape, dtype=np.float64)
    if source_shape.shape != target_shape.shape:
        raise ValueError(f"source and target shapes differ: {source_shape.shape} vs {target_shape.shape}")
    # keep at least eight control points on short contours
    step = max(1, min(step, len(source_shape) // 8))
    src, dst = source_shape[::step], target_shape[::step]
    forward = ThinPlateSpline(src, dst, lam)
    inverse = ThinPlateSpline(dst, src, lam)
    H, W = image.shape
    warped = resample_image(image, inverse(pixel_centers(H, W))).reshape(H, W).astype(image.dtype)
    shapes = np.asarray(expert_shapes, dtype=np.float64)
    if shapes.size:
        warped_shapes = forward(shapes.reshape(-1, 2)).reshape(shapes.shape)
    else:
        warped_shapes = shapes
    return warped, warped_shapes


def augment(scenes, ssm, count, rng, lam=0.0, step=8, margin=0.03, max_tries=1000):
    """Originals plus TPS-warped copies onto SSM-sampled shapes, ``count`` records in all."""
    scenes = list(scenes)
    if count < len(scenes):
        raise ValueError(f"augment count {count} is smaller than the original set ({len(scenes)})")
    out = list(scenes)
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > max_tries + count:
            raise RuntimeError("augmentation kept failing; check the shape model and warp settings")
        base = scenes[int(rng.integers(len(scenes)))]
        virtual = sample_ssm(ssm, rng)
        if virtual.min() < margin or virtual.max() > 1 - margin:
            continue
        try:
            image, shapes = tps_warp(base.image, base.consensus, virtual,
                                     np.concatenate([base.experts, base.consensus[None]]), lam=lam, step=step)
        except ValueError:
            continue
        rid = f"{base.record_id}_aug{len(out) - len(scenes):05d}"
        meta = {"base": base.record_id, "augmented": True}
        out.append(Scene(rid, image, shapes[:-1], shapes[-1], base.ambiguity, base.split, meta))
    return out


# -- dataset files ----------------------------------------------------------

def write_shape_csv(path, shape):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for x, y in shape:
            w.writerow([repr(float(x)), repr(float(y))])


def read_shape_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(x), float(y)] for x, y in csv.reader(fh)], dtype=np.float64)


def write_image_f32(path, image):
    np.asarray(image, dtype="<f4").tofile(path)


def read_image_f32(path, H, W):
    data = np.fromfile(path, dtype="<f4")
    if data.size != H * W:
        raise ValueError(f"{path}: expected {H * W} floats, found {data.size}")
    return data.reshape(H, W).astype(np.float32)


def write_dataset(root, scenes, params, seed=None, extra=None):
    """Write images, shape CSVs and ``manifest.json`` under ``root``."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    records = []
    for sc in scenes:
        img_rel = f"images/{sc.record_id}.f32"
        write_image_f32(os.path.join(root, img_rel), sc.image)
        shape_dir = os.path.join(root, "shapes", sc.record_id)
        os.makedirs(shape_dir, exist_ok=True)
        shapes = {}
        for i, ex in enumerate(sc.experts):
            rel = f"shapes/{sc.record_id}/expert{i + 1}.csv"
            write_shape_csv(os.path.join(root, rel), ex)
            shapes[f"expert{i + 1}"] = rel
        rel = f"shapes/{sc.record_id}/consensus.csv"
        write_shape_csv(os.path.join(root, rel), sc.consensus)
        shapes["consensus"] = rel
        records.append({"id": sc.record_id, "image": img_rel, "shapes": shapes, "split": sc.split,
                        "ambiguity": sc.ambiguity})
    manifest = {
        "format_version": FORMAT_VERSION,
        "J": int(scenes[0].consensus.shape[0]) if scenes else params.J,
        "H": params.H,
        "W": params.W,
        "image_dtype": "float32-le",
        "generator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(params).items()},
        "seed": seed,
        "records": records,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_dataset(root, split=None):
    """Load scenes listed in ``manifest.json``; optionally keep one split."""
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    J, H, W = manifest["J"], manifest["H"], manifest["W"]
    scenes = []
    for rec in manifest["records"]:
        if split is not None and rec["split"] != split:
            continue
        paths = {k: os.path.join(root, v) for k, v in rec["shapes"].items()}
        missing = [p for p in [os.path.join(root, rec["image"]), *paths.values()] if not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"record {rec['id']} references missing files: {missing}")
        experts = np.stack([read_shape_csv(paths[k]) for k in sorted(paths) if k.startswith("expert")])
        consensus = read_shape_csv(paths["consensus"])
        if consensus.shape[0] != J or experts.shape[1] != J:
            raise ValueError(f"record {rec['id']} has shapes with a point count other than J={J}")
        image = read_image_f32(os.path.join(root, rec["image"]), H, W)
        scenes.append(Scene(rec["id"], image, experts, consensus, float(rec.get("ambiguity", 0.0)), rec["split"]))
    return scenes, manifest
