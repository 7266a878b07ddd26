from __future__ import annotations

import argparse
import sys
from pathlib import Path

# Ensure project root is on path
sys.path.append(str(Path(__file__).resolve().parents[1]))

from app import settings  # noqa: E402
from app.data import PairDataset  # noqa: E402
from app.prior import PriorFeatureExtractor, PyramidCache  # noqa: E402
from app.tomo_sim import SPLITS  # noqa: E402


def main():
    root = settings.output_root()
    parser = argparse.ArgumentParser(description="Precompute frozen prior pyramids for every dataset item")
    parser.add_argument("--prior-ckpt", type=Path, default=root / "prior" / "best.pt")
    parser.add_argument("--data", type=Path, default=root / "data")
    parser.add_argument("--cache", type=Path, default=root / "pyramids")
    parser.add_argument("--batch-size", type=int, default=8)
    args = parser.parse_args()

    settings.configure_logging()
    extractor = PriorFeatureExtractor(args.prior_ckpt, settings.device_name())
    extractor.cache = PyramidCache(args.cache, extractor.checkpoint_hash)
    total = 0
    for split in SPLITS:
        total += extractor.fill_cache(PairDataset(args.data, split), args.batch_size)
    print(f"Cached {total} pyramid(s) under {args.cache}")


if __name__ == "__main__":
    main()
