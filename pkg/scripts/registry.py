from __future__ import annotations

import argparse
import sys
from pathlib import Path

# Ensure project root is on path
sys.path.append(str(Path(__file__).resolve().parents[1]))

from app.models import list_artifacts  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description="List artifacts recorded in the run registry")
    parser.add_argument("--limit", type=int, default=50, help="Number of most recent artifacts to show")
    parser.add_argument("--stage", default=None, help="Only show this stage, e.g. train-diffusion")
    args = parser.parse_args()

    rows = [r for r in list_artifacts(args.limit) if args.stage is None or r.stage == args.stage]
    for row in rows:
        exists = "ok" if Path(row.path).exists() else "missing"
        print(f"{row.created_at:%Y-%m-%d %H:%M}  {row.stage:<17} {row.kind or '-':<10} {row.config_hash[:12]}  {exists:<7} {row.path}")
    print(f"{len(rows)} artifact(s)")


if __name__ == "__main__":
    main()
