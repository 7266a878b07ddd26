"""Synthetic emission tomography.

Ellipse-composite phantoms, a 2D parallel-beam system matrix with its exact
transpose, Poisson count simulation, MLEM/OSEM reference reconstruction and
the on-disk sinogram/reference dataset the networks train on.
"""
from __future__ import annotations

import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy import sparse
from skimage.transform import resize, rotate
from tqdm import tqdm

from .config import DataConfig, config_hash
from .errors import ArtifactExistsError, ConfigurationError, DegenerateInputError, DependencyError, ShapeError
from .settings import progress_enabled

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
SUPERSAMPLE = 4


# --- phantoms ---
@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float  # radians
    value: float
    role: str  # skull|brain|tissue|lesion

    def mask(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.cx, y - self.cy
        c, s = math.cos(self.angle), math.sin(self.angle)
        xr = dx * c + dy * s
        yr = -dx * s + dy * c
        return (xr / self.a) ** 2 + (yr / self.b) ** 2 <= 1.0


@dataclass
class Phantom:
    pixels: np.ndarray
    seed: int
    ellipses: List[Ellipse] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_image_size(size: int) -> None:
    if not _is_power_of_two(size) or size < 32:
        raise ConfigurationError(f"image size must be a power of two >= 32, got {size}")


def pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates on [-1, 1]^2, y pointing up."""
    centers = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    x = centers[None, :].repeat(size, axis=0)
    y = -centers[:, None].repeat(size, axis=1)
    return x, y


def generate_phantom(seed: int, size: int = 64, complexity: int = 3) -> Phantom:
    """Brain-like piecewise-constant phantom.

    An outer skull shell, a brain ellipse, ``complexity`` tissue regions with
    distinct intensities and a few small hot lesions. Everything outside the
    skull ellipse is exactly zero.
    """
    check_image_size(size)
    if complexity < 1:
        raise ConfigurationError(f"complexity must be >= 1, got {complexity}")
    rng = np.random.default_rng(seed)
    x, y = pixel_grid(size)

    skull = Ellipse(
        cx=0.0,
        cy=0.0,
        a=float(rng.uniform(0.74, 0.86)),
        b=float(rng.uniform(0.62, 0.76)),
        angle=float(rng.uniform(-0.2, 0.2)),
        value=float(rng.uniform(0.15, 0.3)),
        role="skull",
    )
    shrink = float(rng.uniform(0.84, 0.9))
    brain = Ellipse(0.0, 0.0, skull.a * shrink, skull.b * shrink, skull.angle, float(rng.uniform(0.4, 0.55)), "brain")
    ellipses = [skull, brain]

    tissue_values = rng.permutation(np.linspace(0.6, 1.1, complexity))
    for value in tissue_values:
        ellipses.append(
            Ellipse(
                cx=float(rng.uniform(-0.35, 0.35)) * brain.a,
                cy=float(rng.uniform(-0.35, 0.35)) * brain.b,
                a=float(rng.uniform(0.12, 0.45)) * brain.a,
                b=float(rng.uniform(0.12, 0.45)) * brain.b,
                angle=float(rng.uniform(0, math.pi)),
                value=float(value),
                role="tissue",
            )
        )
    for _ in range(1 + int(rng.integers(0, 3))):
        r = float(rng.uniform(0.0, 0.6))
        phi = float(rng.uniform(0, 2 * math.pi))
        ellipses.append(
            Ellipse(
                cx=r * brain.a * math.cos(phi),
                cy=r * brain.b * math.sin(phi),
                a=float(rng.uniform(0.04, 0.09)),
                b=float(rng.uniform(0.04, 0.09)),
                angle=float(rng.uniform(0, math.pi)),
                value=float(rng.uniform(1.6, 2.5)),
                role="lesion",
            )
        )

    pixels = np.zeros((size, size), dtype=np.float64)
    brain_mask = brain.mask(x, y)
    for ellipse in ellipses:
        m = ellipse.mask(x, y)
        if ellipse.role in ("tissue", "lesion"):
            m &= brain_mask
        pixels[m] = ellipse.value
    return Phantom(pixels=pixels, seed=seed, ellipses=ellipses)


# --- system model ---
@dataclass
class SystemModel:
    image_size: int
    n_angles: int
    n_bins: int
    angles: np.ndarray
    matrix: sparse.csr_matrix  # (n_angles * n_bins, image_size ** 2)

    @property
    def sinogram_shape(self) -> Tuple[int, int]:
        return (self.n_angles, self.n_bins)

    @property
    def sensitivity(self) -> np.ndarray:
        ones = np.ones(self.matrix.shape[0])
        return (self.matrix.T @ ones).reshape(self.image_size, self.image_size)

    def subset_rows(self, index: int, n_subsets: int) -> np.ndarray:
        angles = np.arange(index, self.n_angles, n_subsets)
        return (angles[:, None] * self.n_bins + np.arange(self.n_bins)[None, :]).ravel()


def default_n_bins(image_size: int) -> int:
    n = math.ceil(image_size * math.sqrt(2))
    return n + (n % 2)


@lru_cache(maxsize=8)
def build_system_model(
    image_size: int,
    n_angles: Optional[int] = None,
    n_bins: Optional[int] = None,
    supersample: int = SUPERSAMPLE,
) -> SystemModel:
    """Pixel-driven parallel-beam projector with linear detector-bin splatting.

    Each pixel is represented by ``supersample`` x ``supersample`` sub-points,
    each carrying an equal share of its unit weight. Every sub-point is
    projected onto the detector axis for each angle and its weight is split
    between the two nearest bins. Back projection uses the transpose of the
    same matrix.
    """
    n_angles = n_angles or image_size
    n_bins = n_bins or default_n_bins(image_size)
    if n_bins < image_size:
        raise ConfigurationError(f"n_bins ({n_bins}) must be >= image size ({image_size})")
    if n_angles < 1:
        raise ConfigurationError("n_angles must be >= 1")
    if supersample < 1:
        raise ConfigurationError(f"supersample must be >= 1, got {supersample}")

    angles = np.arange(n_angles) * (math.pi / n_angles)
    offsets = np.arange(image_size) - (image_size - 1) / 2.0
    px = np.tile(offsets, image_size)  # column coordinate
    py = np.repeat(-offsets, image_size)  # row coordinate, y up
    cols = np.arange(image_size * image_size)
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    sub_x, sub_y = (g.ravel() for g in np.meshgrid(sub, sub))
    share = 1.0 / (supersample * supersample)

    rows_all, cols_all, vals_all = [], [], []
    for a, theta in enumerate(angles):
        c, s = math.cos(theta), math.sin(theta)
        for dx, dy in zip(sub_x, sub_y):
            f = (px + dx) * c + (py + dy) * s + (n_bins - 1) / 2.0
            lo = np.floor(f).astype(np.int64)
            w_hi = f - lo
            for bins, weights in ((lo, 1.0 - w_hi), (lo + 1, w_hi)):
                keep = (bins >= 0) & (bins < n_bins) & (weights > 0)
                rows_all.append(a * n_bins + bins[keep])
                cols_all.append(cols[keep])
                vals_all.append(share * weights[keep])

    # duplicate (row, col) entries from sub-points are summed by the conversion
    matrix = sparse.coo_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n_angles * n_bins, image_size * image_size),
    ).tocsr()
    return SystemModel(image_size=image_size, n_angles=n_angles, n_bins=n_bins, angles=angles, matrix=matrix)


# --- sinograms ---
@dataclass
class Sinogram:
    counts: np.ndarray  # (n_angles, n_bins)
    is_noisy: bool = False
    phantom_id: Optional[str] = None
    meta: Dict[str, float] = field(default_factory=dict)

    @property
    def total_counts(self) -> float:
        return float(self.counts.sum())


ImageLike = Union[Phantom, np.ndarray]
SinogramLike = Union[Sinogram, np.ndarray]


def _image_array(image: ImageLike) -> np.ndarray:
    return image.pixels if isinstance(image, Phantom) else np.asarray(image)


def forward_project(phantom: ImageLike, model: SystemModel) -> Sinogram:
    pixels = _image_array(phantom)
    if pixels.shape != (model.image_size, model.image_size):
        raise ShapeError(f"image shape {pixels.shape} does not match system model size {model.image_size}")
    counts = (model.matrix @ pixels.astype(np.float64).ravel()).reshape(model.sinogram_shape)
    phantom_id = str(phantom.seed) if isinstance(phantom, Phantom) else None
    return Sinogram(counts=counts, is_noisy=False, phantom_id=phantom_id, meta={"total_counts": float(counts.sum())})


def back_project(sino: SinogramLike, model: SystemModel) -> np.ndarray:
    counts = sino.counts if isinstance(sino, Sinogram) else np.asarray(sino)
    if counts.shape != model.sinogram_shape:
        raise ShapeError(f"sinogram shape {counts.shape} does not match system model {model.sinogram_shape}")
    return (model.matrix.T @ counts.astype(np.float64).ravel()).reshape(model.image_size, model.image_size)


def add_poisson_noise(sino: Sinogram, target_total_counts: float, seed: int) -> Sinogram:
    """Scale to ``target_total_counts`` expected counts and draw Poisson samples."""
    if sino.is_noisy:
        raise ConfigurationError("sinogram already carries Poisson noise")
    if target_total_counts <= 0:
        raise ConfigurationError(f"target_total_counts must be > 0, got {target_total_counts}")
    total = sino.counts.sum()
    if total <= 0:
        raise DegenerateInputError("cannot scale a zero-sum sinogram to a count level")
    scale = float(target_total_counts / total)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(sino.counts * scale).astype(np.float64)
    meta = dict(sino.meta, scale=scale, total_counts=float(counts.sum()), seed=float(seed))
    return Sinogram(counts=counts, is_noisy=True, phantom_id=sino.phantom_id, meta=meta)


def sinogram_to_grid(counts: SinogramLike, size: int) -> np.ndarray:
    """Bilinear resampling of an (angles, bins) sinogram onto a size x size grid."""
    counts = counts.counts if isinstance(counts, Sinogram) else np.asarray(counts)
    if counts.ndim != 2:
        raise ShapeError(f"sinogram must be 2D, got shape {counts.shape}")
    counts = counts.astype(np.float64)
    if counts.shape == (size, size):
        return counts.copy()
    return resize(counts, (size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True)


# --- reconstruction ---
def poisson_log_likelihood(y: np.ndarray, ybar: np.ndarray) -> float:
    """Sum of y*log(ybar) - ybar, dropping the data-only log(y!) term."""
    y = np.asarray(y, dtype=np.float64).ravel()
    ybar = np.asarray(ybar, dtype=np.float64).ravel()
    if np.any((ybar <= 0) & (y > 0)):
        return -math.inf
    pos = y > 0
    return float(np.sum(y[pos] * np.log(ybar[pos])) - ybar.sum())


def mlem_reconstruct(
    sino: SinogramLike,
    model: SystemModel,
    n_iters: int,
    subsets: int = 1,
    init: Optional[np.ndarray] = None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """MLEM (``subsets=1``) or OSEM reconstruction.

    Subsets interleave the projection angles. Ratios where the forward
    projection vanishes are taken as 0.
    """
    if n_iters < 1:
        raise ConfigurationError(f"n_iters must be >= 1, got {n_iters}")
    if subsets < 1 or model.n_angles % subsets != 0:
        raise ConfigurationError(f"subsets ({subsets}) must divide n_angles ({model.n_angles})")
    counts = sino.counts if isinstance(sino, Sinogram) else np.asarray(sino)
    if counts.shape != model.sinogram_shape:
        raise ShapeError(f"sinogram shape {counts.shape} does not match system model {model.sinogram_shape}")
    if np.any(counts < 0):
        raise DegenerateInputError("sinogram has negative entries")

    y = counts.astype(np.float64).ravel()
    if init is None:
        x = np.ones(model.image_size * model.image_size)
    else:
        x = np.asarray(init, dtype=np.float64).ravel().copy()
        if np.any(x < 0):
            raise ConfigurationError("initial image must be nonnegative")

    blocks = []
    for k in range(subsets):
        rows = model.subset_rows(k, subsets)
        a_k = model.matrix[rows]
        blocks.append((a_k, y[rows], np.asarray(a_k.sum(axis=0)).ravel()))

    for it in range(n_iters):
        for a_k, y_k, sens_k in blocks:
            ybar = a_k @ x
            ratio = np.divide(y_k, ybar, out=np.zeros_like(ybar), where=ybar > 0)
            update = np.divide(a_k.T @ ratio, sens_k, out=np.zeros_like(x), where=sens_k > 0)
            x = x * update
        if callback is not None:
            callback(it + 1, x.reshape(model.image_size, model.image_size))
    return x.reshape(model.image_size, model.image_size)


# --- dataset ---
class ManifestItem(BaseModel):
    item_id: str
    split: str
    phantom_id: int
    rotation: int
    sinogram: str
    reference: str
    phantom: str
    phantom_seed: int
    noise_seed: int
    image_scale: float
    total_counts: float


class DatasetManifest(BaseModel):
    config_hash: str
    root_seed: int
    config: DataConfig
    image_size: int
    n_angles: int
    n_bins: int
    augmentation_factor: int
    sinogram_scale: float
    splits: Dict[str, List[int]]
    counts: Dict[str, int]
    items: List[ManifestItem]

    def items_for(self, split: str) -> List[ManifestItem]:
        return [item for item in self.items if item.split == split]


def derive_seed(root_seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([root_seed, *keys]).generate_state(1)[0])


def split_phantoms(n_phantoms: int, cfg: DataConfig, root_seed: int) -> Dict[str, List[int]]:
    """Assign whole phantoms to splits so no phantom crosses a split."""
    order = np.random.default_rng(derive_seed(root_seed, 0xD5)).permutation(n_phantoms)
    n_val = int(round(cfg.val_fraction * n_phantoms))
    n_test = int(round(cfg.test_fraction * n_phantoms))
    if cfg.val_fraction > 0:
        n_val = max(n_val, 1)
    if cfg.test_fraction > 0:
        n_test = max(n_test, 1)
    n_train = n_phantoms - n_val - n_test
    if n_train < 1:
        raise ConfigurationError(
            f"{n_phantoms} phantoms leave no training phantom (val={n_val}, test={n_test})"
        )
    return {
        "train": sorted(int(p) for p in order[:n_train]),
        "val": sorted(int(p) for p in order[n_train:n_train + n_val]),
        "test": sorted(int(p) for p in order[n_train + n_val:]),
    }


def rotate_phantom(pixels: np.ndarray, rotation: int, rotations: int) -> np.ndarray:
    if rotation == 0:
        return pixels.copy()
    angle = rotation * 360.0 / rotations
    rotated = rotate(pixels, angle=angle, resize=False, order=1, mode="constant", cval=0.0, preserve_range=True)
    return np.clip(rotated, 0.0, None)


@dataclass
class _SimulatedItem:
    phantom_id: int
    rotation: int
    phantom_seed: int
    noise_seed: int
    phantom: np.ndarray
    sinogram: np.ndarray
    reference: np.ndarray


def _simulate_item(job: Tuple[dict, int, int, int]) -> _SimulatedItem:
    cfg_data, root_seed, phantom_id, rotation = job
    cfg = DataConfig.model_validate(cfg_data)
    model = build_system_model(cfg.image_size, cfg.n_angles, cfg.n_bins)
    phantom_seed = derive_seed(root_seed, phantom_id)
    noise_seed = derive_seed(root_seed, phantom_id, rotation)

    phantom = generate_phantom(phantom_seed, cfg.image_size, cfg.complexity)
    pixels = rotate_phantom(phantom.pixels, rotation, cfg.rotations)
    clean = forward_project(pixels, model)
    noisy = add_poisson_noise(clean, cfg.total_counts, noise_seed)
    reference = mlem_reconstruct(noisy, model, cfg.mlem_iters, cfg.mlem_subsets)
    return _SimulatedItem(phantom_id, rotation, phantom_seed, noise_seed, pixels, noisy.counts, reference)


def _clear_outputs(out_dir: Path) -> None:
    for split in SPLITS:
        if (out_dir / split).exists():
            shutil.rmtree(out_dir / split)
    (out_dir / MANIFEST_NAME).unlink(missing_ok=True)


def build_dataset(cfg: DataConfig, out_dir: Path, root_seed: int = 0, overwrite: bool = False) -> DatasetManifest:
    """Simulate every (phantom, rotation) pair and write arrays plus manifest.

    Reference images are scaled to [0, 1] by their own maximum; each paired
    sinogram is scaled by the same factor and then divided by the dataset-wide
    percentile bin value (``sinogram_scale``).
    """
    out_dir = Path(out_dir)
    if (out_dir / MANIFEST_NAME).exists():
        if not overwrite:
            raise ArtifactExistsError(f"dataset already exists at {out_dir}; pass overwrite to rebuild")
        _clear_outputs(out_dir)
    check_image_size(cfg.image_size)
    model = build_system_model(cfg.image_size, cfg.n_angles, cfg.n_bins)
    if model.n_angles % cfg.mlem_subsets != 0:
        raise ConfigurationError(f"mlem_subsets ({cfg.mlem_subsets}) must divide n_angles ({model.n_angles})")

    splits = split_phantoms(cfg.n_phantoms, cfg, root_seed)
    split_of = {pid: name for name, pids in splits.items() for pid in pids}
    cfg_data = cfg.model_dump(mode="json")
    jobs = [(cfg_data, root_seed, pid, rot) for pid in range(cfg.n_phantoms) for rot in range(cfg.rotations)]

    logger.info("Simulating %d items (%d phantoms x %d rotations)", len(jobs), cfg.n_phantoms, cfg.rotations)
    bar = dict(total=len(jobs), desc="simulate", disable=not progress_enabled())
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(tqdm(pool.map(_simulate_item, jobs), **bar))
    else:
        results = [_simulate_item(job) for job in tqdm(jobs, **bar)]

    image_scales = []
    for r in results:
        peak = float(r.reference.max())
        if peak <= 0:
            raise DegenerateInputError(f"reference image for phantom {r.phantom_id} rotation {r.rotation} is empty")
        image_scales.append(1.0 / peak)
    scaled_sinos = [r.sinogram * s for r, s in zip(results, image_scales)]
    sinogram_scale = float(np.percentile(np.concatenate([s.ravel() for s in scaled_sinos]), cfg.sinogram_percentile))
    if sinogram_scale <= 0:
        raise DegenerateInputError("dataset sinograms are all zero at the requested percentile")

    items: List[ManifestItem] = []
    for r, scale, sino in zip(results, image_scales, scaled_sinos):
        split = split_of[r.phantom_id]
        item_id = f"p{r.phantom_id:03d}_r{r.rotation}"
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        names = {kind: f"{split}/{item_id}_{kind}.npy" for kind in ("sino", "ref", "phantom")}
        np.save(out_dir / names["sino"], (sino / sinogram_scale).astype(np.float32))
        np.save(out_dir / names["ref"], (r.reference * scale).astype(np.float32))
        np.save(out_dir / names["phantom"], (r.phantom * scale).astype(np.float32))
        items.append(
            ManifestItem(
                item_id=item_id,
                split=split,
                phantom_id=r.phantom_id,
                rotation=r.rotation,
                sinogram=names["sino"],
                reference=names["ref"],
                phantom=names["phantom"],
                phantom_seed=r.phantom_seed,
                noise_seed=r.noise_seed,
                image_scale=scale,
                total_counts=float(r.sinogram.sum()),
            )
        )

    manifest = DatasetManifest(
        config_hash=config_hash(cfg),
        root_seed=root_seed,
        config=cfg,
        image_size=cfg.image_size,
        n_angles=model.n_angles,
        n_bins=model.n_bins,
        augmentation_factor=cfg.rotations,
        sinogram_scale=sinogram_scale,
        splits=splits,
        counts={split: sum(1 for item in items if item.split == split) for split in SPLITS},
        items=items,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2))
    logger.info("Wrote dataset to %s: %s", out_dir, manifest.counts)
    return manifest


def load_manifest(dataset_dir: Path) -> DatasetManifest:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DependencyError(f"no dataset manifest at {path}; run gen-data first")
    return DatasetManifest.model_validate_json(path.read_text())
