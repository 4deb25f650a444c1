"""Configuration sweep; a thin wrapper over ``dualtray grid``."""
import sys

from dualtray.cli import main

if __name__ == "__main__":
    sys.exit(main(["grid", *sys.argv[1:]]))
