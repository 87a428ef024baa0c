"""
Simple script to run the facessd command line.

Usage:
    python run_facessd.py gen --out data/
    python run_facessd.py train --pipeline --data data/ --out runs/
"""
import sys

from facessd.cli import main

if __name__ == "__main__":
    sys.exit(main())
