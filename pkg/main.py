#!/usr/bin/env python3
"""
Entry point: python main.py <command> [options]
"""
import sys

from src.main import main

if __name__ == "__main__":
    sys.exit(main())
