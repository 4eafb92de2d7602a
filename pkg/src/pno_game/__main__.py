"""
Main entry point for running the toolkit as a module.

Usage:
    python -m pno_game <command>
"""

from .cli import main

if __name__ == "__main__":
    main()
