#!/usr/bin/env python
"""
Startup script: run the hybridroi CLI from a source checkout

    python run.py train --config experiment.json --out runs/tiny
"""
import os
import sys


def main():
    """Print the run banner and hand the arguments to the CLI"""

    if not os.getenv("LOG_LEVEL"):
        os.environ["LOG_LEVEL"] = "INFO"

    print("=" * 60)
    print("Hybrid ROI classifier")
    print("=" * 60)
    print(f"Log Level: {os.getenv('LOG_LEVEL')}")
    print(f"Logs: {os.getenv('HYBRIDROI_LOG_DIR', 'logs')}/hybridroi.log")
    print("=" * 60)
    print()

    try:
        from cli import cli
    except ImportError as exc:
        print(f"Error: {exc}. Run: pip install -r requirements.txt")
        sys.exit(1)

    try:
        cli(obj={})
    except KeyboardInterrupt:
        print("\nInterrupted.")
        sys.exit(130)


if __name__ == "__main__":
    main()
