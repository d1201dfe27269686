"""Process-wide counters for recoverable numerical events (fallbacks, fills)."""
from collections import Counter

counters: Counter = Counter()


def bump(name: str, n: int = 1) -> None:
    if n:
        counters[name] += int(n)


def reset() -> None:
    counters.clear()
