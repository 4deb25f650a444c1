"""Policy training; a thin wrapper over ``dualtray train-lmpc``."""
import sys

from dualtray.cli import main

if __name__ == "__main__":
    sys.exit(main(["train-lmpc", *sys.argv[1:]]))
