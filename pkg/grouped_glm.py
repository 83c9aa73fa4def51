#!/usr/bin/env python3
"""
Entry point: python grouped_glm.py {fit,simulate,report} ...
"""
import sys

from src.cli.main import main

if __name__ == "__main__":
    sys.exit(main())
