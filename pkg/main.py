#!/usr/bin/env python3
"""Entry point for PropGraph-QA."""

from propgraph.cli import cli

if __name__ == "__main__":
    cli()
