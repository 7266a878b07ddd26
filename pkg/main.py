"""
Command-line entry point: ``python main.py <stage> [options]``.
Stages and flags are listed by ``python main.py --help``.
"""
import sys

from app.exp_cli import cli

if __name__ == "__main__":
    sys.exit(cli())
