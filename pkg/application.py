# Command-line entry point: python application.py <command> [flags]
import sys

from lynx.main import main

if __name__ == "__main__":
    sys.exit(main())
