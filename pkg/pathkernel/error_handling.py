# pathkernel/error_handling.py
"""
Exception hierarchy and structured error logging
Every failure carries an error type and the exit code the CLI reports
"""

import functools
import json
import logging
import traceback
import uuid
from datetime import datetime
from typing import Callable, Dict, Optional

import click
import pytz

logger = logging.getLogger(__name__)


class PathKernelError(Exception):
    """Base class for all pathkernel failures"""

    error_type = "PATHKERNEL_ERROR"
    exit_code = 1


class ShapeError(PathKernelError):
    error_type = "SHAPE_ERROR"


class GraphStateError(PathKernelError):
    error_type = "GRAPH_STATE_ERROR"


class InvalidInputError(PathKernelError):
    error_type = "INVALID_INPUT"


class NonFiniteError(PathKernelError):
    """Raised when a forward value, gradient or update stops being finite"""

    error_type = "NON_FINITE"

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class ConfigError(PathKernelError):
    error_type = "CONFIG_ERROR"


class UnknownComponentError(ConfigError):
    error_type = "UNKNOWN_COMPONENT"

    def __init__(self, name: str, valid: list):
        super().__init__(
            f"unknown component '{name}'; valid components: {', '.join(valid)}"
        )
        self.name = name
        self.valid = list(valid)


class TrajectoryFormatError(PathKernelError):
    """Header or payload of a trajectory file does not match the expected format"""

    error_type = "TRAJECTORY_FORMAT"
    exit_code = 2


class MissingInputError(PathKernelError):
    error_type = "MISSING_INPUT"
    exit_code = 2


class ReplayMismatchError(PathKernelError):
    error_type = "REPLAY_MISMATCH"

    def __init__(self, step: int, max_abs_diff: float):
        super().__init__(
            f"replay diverged at step {step} (max abs diff {max_abs_diff:.3e})"
        )
        self.step = step
        self.max_abs_diff = max_abs_diff


class ConvergenceError(PathKernelError):
    error_type = "NOT_CONVERGED"

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


class ErrorTracker:
    """Track errors with short IDs so a failing run can be referenced in reports"""

    def __init__(self, max_recent: int = 100):
        self.recent_errors: Dict[str, dict] = {}
        self.max_recent = max_recent
        self.error_count = 0

    def log_error(
        self,
        error: Exception,
        context: Optional[dict] = None,
        error_type: Optional[str] = None,
    ) -> str:
        """
        Log error as one JSON object and return its tracking ID

        Args:
            error: Exception object
            context: Additional context (command, config path, step, ...)
            error_type: Category of error, defaults to the exception's own type
        """
        error_id = str(uuid.uuid4())[:8]
        self.error_count += 1

        error_data = {
            'error_id': error_id,
            'timestamp': datetime.now(pytz.utc).isoformat(),
            'error_type': error_type or getattr(error, 'error_type', type(error).__name__),
            'message': str(error)[:500],
            'context': context or {},
            'count': self.error_count,
        }

        self.recent_errors[error_id] = error_data
        if len(self.recent_errors) > self.max_recent:
            oldest_id = next(iter(self.recent_errors))
            del self.recent_errors[oldest_id]

        log_entry = {
            'level': 'ERROR',
            'error_id': error_id,
            'type': error_data['error_type'],
            'message': error_data['message'],
            'context': error_data['context'],
            'timestamp': error_data['timestamp'],
            'traceback': traceback.format_exc()[-500:],
        }
        logger.error(json.dumps(log_entry, default=str))
        return error_id

    def get_error(self, error_id: str) -> dict:
        """Retrieve error details"""
        return self.recent_errors.get(error_id, {})


error_tracker = ErrorTracker()


def handle_cli_errors(command: Callable) -> Callable:
    """
    Wrap a click command so pathkernel failures become logged, numbered exits

    PathKernelError subclasses exit with their own exit code, anything else
    with 1. Click's own usage errors pass through untouched (exit 2).
    """

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except click.exceptions.ClickException:
            raise
        except PathKernelError as exc:
            error_id = error_tracker.log_error(
                exc, context={'command': command.__name__}
            )
            click.echo(f"error {error_id}: {exc}", err=True)
            raise SystemExit(exc.exit_code)
        except FileNotFoundError as exc:
            error_id = error_tracker.log_error(
                exc, context={'command': command.__name__}, error_type='MISSING_INPUT'
            )
            click.echo(f"error {error_id}: {exc}", err=True)
            raise SystemExit(2)

    return wrapper
