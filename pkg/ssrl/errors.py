"""Error handling for the ssrl-desk CLI."""

from __future__ import annotations

import sys

import click

from .logging import NumericalError, SSRLError, get_logger

logger = get_logger(__name__)


class ErrorHandlingGroup(click.Group):
    """Click group that handles errors with clean output.

    Exit codes follow the error class: 2 for configuration errors, 3 for
    numerical aborts, 1 for any other expected error.
    """

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except NumericalError as e:
            self._handle_error(f"Numerical abort: {e}", e.exit_code)
        except SSRLError as e:
            self._handle_error(str(e), e.exit_code)

    def _handle_error(self, message: str, exit_code: int) -> None:
        """Log error and exit cleanly."""
        logger.error(message)
        sys.exit(exit_code)
