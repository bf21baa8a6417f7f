"""
Utility functions for neuralinterp.

Common helper functions used across modules.
"""

import time
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager


def format_duration(seconds: float) -> str:
    """
    Format duration in human-readable form.

    Args:
        seconds: Duration in seconds

    Returns:
        Human-readable duration string
    """
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        minutes = seconds / 60
        return f"{minutes:.1f}m"
    else:
        hours = seconds / 3600
        return f"{hours:.1f}h"


@contextmanager
def timed() -> Iterator[Callable[[], float]]:
    """
    Measure wall-clock time of a block.

    Yields:
        Callable returning the seconds elapsed so far (frozen once the block exits)
    """
    start = time.perf_counter()
    end: list[float] = []

    def elapsed() -> float:
        return (end[0] if end else time.perf_counter()) - start

    try:
        yield elapsed
    finally:
        end.append(time.perf_counter())


def mask_label(mask: Sequence[bool]) -> str:
    """Keep mask as a bit string, e.g. [True, False, True] -> "101"."""
    return "".join("1" if keep else "0" for keep in mask)


def parse_mask(text: str) -> list[bool]:
    """
    Inverse of mask_label.

    Raises:
        ValueError: If the text contains anything but 0 and 1
    """
    text = text.strip()
    if not text or set(text) - {"0", "1"}:
        raise ValueError(f"Mask must be a non-empty string of 0/1, got {text!r}")
    return [c == "1" for c in text]
