import sys

from editflow.cli import main

if __name__ == "__main__":
    sys.exit(main())
