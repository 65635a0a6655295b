import sys

from d3net_app.main_cli import main

if __name__ == "__main__":
    sys.exit(main())
