"""Allow `python -m pyfu`."""

from .cli import main

main()
