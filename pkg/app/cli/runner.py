"""Exception → exit code mapping shared by every subcommand."""
from __future__ import annotations

import json
import sys
from typing import Any, Callable, Dict

from pydantic import ValidationError

from app.errors import CoxMTError, DivergedTrainingError, InputError, ProtocolViolationError
from app.logging_utils import get_logger

logger = get_logger("CLI")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_PROTOCOL = 4
EXIT_INTERNAL = 1


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (InputError, ValidationError)):
        return EXIT_INPUT
    if isinstance(exc, DivergedTrainingError):
        return EXIT_DIVERGED
    if isinstance(exc, ProtocolViolationError):
        return EXIT_PROTOCOL
    return EXIT_INTERNAL


def _describe(exc: BaseException) -> str:
    if isinstance(exc, ValidationError):
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        return f"invalid configuration: {where}: {first.get('msg')}"
    return str(exc)


def render_summary(summary: Dict[str, Any]) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, default=str)


def run_command(fn: Callable[..., Dict[str, Any]], *args, **kwargs) -> int:
    try:
        summary = fn(*args, **kwargs)
    except (CoxMTError, ValidationError) as exc:
        code = exit_code_for(exc)
        logger.error(f"{type(exc).__name__}: {_describe(exc)}")
        return code
    print(render_summary(summary), file=sys.stdout)
    return EXIT_OK
