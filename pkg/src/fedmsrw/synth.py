"""Synthetic multi-client lesion phantoms, patch sampling, augmentation, and I/O.

Each case is a 2-D "brain": a filled ellipse with smooth Gaussian texture,
bright lesion blobs placed inside it, and additive noise over the whole image.
Lesion blobs are Gaussian bumps thresholded at half their peak. The total
lesion area is rescaled per case until the lesion-to-brain ratio lands inside
the client's target range.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass
class ClientConfig:
    client_id: str = "c0"
    n_cases: int = 6
    image_size: int = 64
    brain_axes_range: tuple = (22.0, 29.0)
    intensity_mean: float = 0.5
    intensity_std: float = 0.05
    lesion_contrast: float = 0.6
    lesion_count_range: tuple = (1, 4)
    lesion_radius_range: tuple = (1.5, 4.0)
    target_ratio_range: tuple = (0.01, 0.03)
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        for name in ("brain_axes_range", "lesion_count_range",
                     "lesion_radius_range", "target_ratio_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy low <= high, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        lo, hi = self.target_ratio_range
        if not (0.0 < lo and hi <= 0.2):
            raise ValueError(f"target_ratio_range must lie in (0, 0.2], got {(lo, hi)}")
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class Sample:
    image: np.ndarray       # (1, H, W) float64
    label: np.ndarray       # (1, H, W) {0, 1}
    brain_mask: np.ndarray  # (1, H, W) {0, 1}
    client_id: str = ""
    case_id: str = ""


@dataclass
class Patch:
    image: np.ndarray
    label: np.ndarray
    brain_mask: np.ndarray


class InfeasibleRatioError(RuntimeError):
    pass


def _ellipse(size: int, cy, cx, ay, ax, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return u * u + v * v <= 1.0


def _blob_field(size: int, centers, sigmas) -> np.ndarray:
    """Max over blobs of exp(-r^2 / 2 sigma^2), each normalized to peak 1."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    f = np.zeros((size, size))
    for (cy, cx), sg in zip(centers, sigmas):
        f = np.maximum(f, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sg * sg)))
    return f


def _place_lesions(cfg: ClientConfig, brain: np.ndarray, rng: np.random.Generator,
                   max_tries: int = 200):
    lo, hi = cfg.target_ratio_range
    brain_area = int(brain.sum())
    # keep blob centres away from the brain edge
    inner = gaussian_filter(brain.astype(np.float64), 2.0) > 0.95
    cand = np.argwhere(inner if inner.any() else brain)
    for _ in range(max_tries):
        target = rng.uniform(lo, hi)
        n = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
        centers = cand[rng.integers(0, len(cand), size=n)].astype(np.float64)
        centers += rng.uniform(-0.5, 0.5, size=centers.shape)
        base = rng.uniform(*cfg.lesion_radius_range, size=n)

        def ratio_at(scale):
            mask = (_blob_field(cfg.image_size, centers, base * scale) >= 0.5) & brain
            return mask.sum() / brain_area

        # lesion area grows monotonically with the common scale; bisect on it
        s_lo, s_hi = 1e-3, 1.0
        while ratio_at(s_hi) < target and s_hi < 64:
            s_hi *= 2.0
        for _ in range(40):
            mid = 0.5 * (s_lo + s_hi)
            if ratio_at(mid) < target:
                s_lo = mid
            else:
                s_hi = mid
        for scale in (s_hi, s_lo):
            r = ratio_at(scale)
            if lo <= r <= hi and r > 0:
                field_ = _blob_field(cfg.image_size, centers, base * scale)
                return field_, (field_ >= 0.5) & brain
    raise InfeasibleRatioError(
        f"client {cfg.client_id}: could not hit lesion ratio range {cfg.target_ratio_range} "
        f"after {max_tries} attempts")


def generate_case(cfg: ClientConfig, rng: np.random.Generator, case_id: str) -> Sample:
    size = cfg.image_size
    ay, ax = rng.uniform(*cfg.brain_axes_range, size=2)
    ay, ax = min(ay, size / 2 - 1), min(ax, size / 2 - 1)
    cy = size / 2 - 0.5 + rng.uniform(-2, 2)
    cx = size / 2 - 0.5 + rng.uniform(-2, 2)
    brain = _ellipse(size, cy, cx, ay, ax, rng.uniform(0, np.pi))

    texture = gaussian_filter(rng.standard_normal((size, size)), 2.0)
    texture *= cfg.intensity_std / max(texture.std(), 1e-12)
    image = np.where(brain, cfg.intensity_mean + texture, 0.0)

    field_, lesion = _place_lesions(cfg, brain, rng)
    # full contrast inside the mask, linear fade to zero outside it
    ramp = np.clip(2.0 * field_, 0.0, 1.0) * brain
    image = image + cfg.lesion_contrast * cfg.intensity_mean * ramp
    image = image + cfg.noise_std * rng.standard_normal((size, size))
    return Sample(image[None].astype(np.float64), lesion[None].astype(np.float64),
                  brain[None].astype(np.float64), cfg.client_id, case_id)


def generate_client(cfg: ClientConfig) -> list[Sample]:
    rng = np.random.default_rng(cfg.seed)
    return [generate_case(cfg, rng, f"{cfg.client_id}_case{i:03d}") for i in range(cfg.n_cases)]


def lesion_ratio(p) -> Optional[float]:
    """Lesion voxels over brain voxels; ``None`` when the crop holds no brain."""
    brain = float(np.count_nonzero(p.brain_mask))
    if brain == 0:
        return None
    return float(np.count_nonzero(p.label)) / brain


def sample_patch(s, size: int, rng: np.random.Generator,
                 lesion_centered_prob: float = 0.0) -> Patch:
    H, W = s.image.shape[-2:]
    if size > H or size > W:
        raise ValueError(f"patch size {size} exceeds image size {(H, W)}")
    if lesion_centered_prob > 0 and rng.random() < lesion_centered_prob and s.label.any():
        ys, xs = np.nonzero(s.label[0])
        j = int(rng.integers(len(ys)))
        y0 = int(np.clip(ys[j] - size // 2, 0, H - size))
        x0 = int(np.clip(xs[j] - size // 2, 0, W - size))
    else:
        y0 = int(rng.integers(0, H - size + 1))
        x0 = int(rng.integers(0, W - size + 1))
    sl = (slice(None), slice(y0, y0 + size), slice(x0, x0 + size))
    return Patch(s.image[sl], s.label[sl], s.brain_mask[sl])


def augment(p: Patch, rng: np.random.Generator) -> Patch:
    """Random horizontal flip, vertical flip and k*90 degree rotation."""
    if p.image.shape[-1] != p.image.shape[-2]:
        raise ValueError("augment expects square patches")
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(0, 4))

    def tf(a):
        if hflip:
            a = a[..., :, ::-1]
        if vflip:
            a = a[..., ::-1, :]
        if k:
            a = np.rot90(a, k, axes=(-2, -1))
        return np.ascontiguousarray(a)

    return Patch(tf(p.image), tf(p.label), tf(p.brain_mask))


class PatchSampler:
    """Draws augmented patch batches from one client's training cases.

    Calling the sampler returns ``(images, labels, brain_masks)`` stacked as
    ``(B, 1, size, size)`` arrays. Cases are drawn uniformly with
    replacement; ``patches_per_case`` caps how often one case may appear in
    a single batch (``None`` means no cap).
    """

    def __init__(self, samples: Sequence, batch_size: int = 8, patch_size: int = 32,
                 augment: bool = True, lesion_centered_prob: float = 0.0,
                 patches_per_case: Optional[int] = None):
        if not samples:
            raise ValueError("PatchSampler needs at least one case")
        if patches_per_case is not None and patches_per_case * len(samples) < batch_size:
            raise ValueError(f"batch of {batch_size} impossible with {len(samples)} cases "
                             f"and patches_per_case={patches_per_case}")
        self.patches_per_case = patches_per_case
        self.samples = list(samples)
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.augment = augment
        self.lesion_centered_prob = lesion_centered_prob

    def __call__(self, rng: np.random.Generator):
        patches = []
        used = [0] * len(self.samples)
        for _ in range(self.batch_size):
            if self.patches_per_case is None:
                i = int(rng.integers(len(self.samples)))
            else:
                open_ = [j for j, n in enumerate(used) if n < self.patches_per_case]
                i = open_[int(rng.integers(len(open_)))]
            used[i] += 1
            s = self.samples[i]
            p = sample_patch(s, self.patch_size, rng, self.lesion_centered_prob)
            if self.augment:
                p = augment(p, rng)
            patches.append(p)
        return (np.stack([p.image for p in patches]),
                np.stack([p.label for p in patches]),
                np.stack([p.brain_mask for p in patches]))


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------
#
# manifest.json lists every case; each raster file is
#   b"FRAS" | u8 dtype code (0 = f64, 1 = u8) | u8 ndim | u32 * ndim | payload

RASTER_MAGIC = b"FRAS"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_CODES = {"<f8": 0, "|u1": 1}


class DatasetError(ValueError):
    pass


def _raster_bytes(arr: np.ndarray, dtype: str) -> bytes:
    a = np.ascontiguousarray(arr).astype(dtype)
    head = RASTER_MAGIC + struct.pack("<BB", _CODES[a.dtype.str], a.ndim)
    return head + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _read_raster(path: Path, expect_shape) -> np.ndarray:
    data = path.read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise DatasetError(f"{path}: bad raster magic at offset 0")
    if len(data) < 6:
        raise DatasetError(f"{path}: truncated header at offset {len(data)}")
    code, ndim = struct.unpack("<BB", data[4:6])
    if code not in _DTYPES:
        raise DatasetError(f"{path}: unknown dtype code {code} at offset 4")
    end = 6 + 4 * ndim
    if len(data) < end:
        raise DatasetError(f"{path}: truncated shape at offset {len(data)}")
    shape = struct.unpack(f"<{ndim}I", data[6:end])
    if tuple(shape) != tuple(expect_shape):
        raise DatasetError(f"{path}: declared shape {shape} at offset 6 does not match "
                           f"manifest shape {tuple(expect_shape)}")
    dt = _DTYPES[code]
    need = end + int(np.prod(shape)) * dt.itemsize
    if len(data) != need:
        raise DatasetError(f"{path}: payload size mismatch at offset {min(len(data), need)} "
                           f"(expected {need} bytes, found {len(data)})")
    return np.frombuffer(data, dtype=dt, offset=end).reshape(shape).astype(np.float64)


def save_dataset(samples: Sequence[Sample], path, config_digest: str = "") -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    for s in samples:
        stem = s.case_id
        (root / f"{stem}.image.f64").write_bytes(_raster_bytes(s.image, "<f8"))
        (root / f"{stem}.label.u8").write_bytes(_raster_bytes(s.label, "u1"))
        (root / f"{stem}.brain.u8").write_bytes(_raster_bytes(s.brain_mask, "u1"))
        cases.append({"case_id": s.case_id, "client_id": s.client_id,
                      "shape": list(s.image.shape)})
    manifest = {"format": "fedmsrw-dataset/1", "config_digest": config_digest, "cases": cases}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> list[Sample]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root / 'manifest.json'}: corrupt manifest at offset {exc.pos}") from exc
    if manifest.get("format") != "fedmsrw-dataset/1":
        raise DatasetError(f"{root}: unrecognized manifest format {manifest.get('format')!r}")
    out = []
    for c in manifest["cases"]:
        stem, shape = c["case_id"], c["shape"]
        out.append(Sample(_read_raster(root / f"{stem}.image.f64", shape),
                          _read_raster(root / f"{stem}.label.u8", shape),
                          _read_raster(root / f"{stem}.brain.u8", shape),
                          c["client_id"], stem))
    return out
