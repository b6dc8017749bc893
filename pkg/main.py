#!/usr/bin/env python3
"""! @brief Dynamic radiance field toolkit for synthesizing annotated detector training data"""

# Imports
import sys

from src.cli import run

def main():
    sys.exit(run())

if __name__ == "__main__":
    main()
