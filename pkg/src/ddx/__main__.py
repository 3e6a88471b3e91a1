"""``python -m ddx``."""

from ddx.cli import main

main()
