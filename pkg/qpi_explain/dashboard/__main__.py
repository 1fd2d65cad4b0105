"""Allow running as: python -m qpi_explain.dashboard [runs_dir]"""
from .app import main
import sys

if __name__ == "__main__":
    runs_dir = sys.argv[1] if len(sys.argv) > 1 else None
    main(runs_dir)
