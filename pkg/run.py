#!/usr/bin/env python3
#run.py
"""
Simple launch script for the plume source-term estimation lab
"""
import sys

from cli import main


if __name__ == "__main__":
    print("=" * 50, file=sys.stderr)
    print("🚀 Plume STE lab: " + " ".join(sys.argv[1:] or ["--help"]), file=sys.stderr)
    print("=" * 50, file=sys.stderr)
    sys.exit(main(sys.argv[1:] or ["--help"]))
