#!/usr/bin/env python3
"""
Main entry point for the online video stabilizer
"""

import sys

from cli.commands import main as run_cli


if __name__ == "__main__":
    sys.exit(run_cli())
