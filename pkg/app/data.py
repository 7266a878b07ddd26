"""Torch views of a generated dataset."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .errors import ConfigurationError
from .tomo_sim import DatasetManifest, ManifestItem, load_manifest, sinogram_to_grid

logger = logging.getLogger(__name__)


class PairDataset(Dataset):
    """(sinogram, reference) pairs of one split, held in memory.

    Sinograms are resampled to the image grid so they can enter a network as
    an input channel. Items are dicts with ``index``, ``item_id``,
    ``sinogram`` (1, H, W) and ``reference`` (1, H, W).
    """

    def __init__(self, dataset_dir: Path, split: str, max_items: Optional[int] = None):
        self.root = Path(dataset_dir)
        self.split = split
        self.manifest: DatasetManifest = load_manifest(self.root)
        items = self.manifest.items_for(split)
        if max_items is not None:
            items = items[:max_items]
        self.items: List[ManifestItem] = items
        size = self.manifest.image_size
        self.sinograms = [
            torch.from_numpy(sinogram_to_grid(np.load(self.root / it.sinogram), size).astype(np.float32))[None]
            for it in items
        ]
        self.references = [torch.from_numpy(np.load(self.root / it.reference).astype(np.float32))[None] for it in items]
        logger.debug("Loaded %d %s items from %s", len(items), split, self.root)

    @property
    def image_size(self) -> int:
        return self.manifest.image_size

    def require_image_size(self, size: int) -> None:
        if size != self.image_size:
            raise ConfigurationError(f"network image_size {size} does not match dataset image size {self.image_size}")

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Dict:
        return {
            "index": index,
            "item_id": self.items[index].item_id,
            "sinogram": self.sinograms[index],
            "reference": self.references[index],
        }

    def raw_sinogram(self, index: int) -> np.ndarray:
        return np.load(self.root / self.items[index].sinogram)


def make_loader(dataset: Dataset, batch_size: int, shuffle: bool, seed: int = 0) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator, num_workers=0)
