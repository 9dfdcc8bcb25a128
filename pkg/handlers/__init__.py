"""Command handlers: each module exposes ``register(subparsers)`` and ``handle(args) -> int``."""

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_COLLAPSE = 2
