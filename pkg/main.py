#!/usr/bin/env python3
"""
Main entry point for the heterogeneous DW toolkit.
"""
import sys

from src.cli.app import main

if __name__ == "__main__":
    sys.exit(main())
