"""Counter sink for soft numerical events surfaced in run reports."""

from __future__ import annotations

import threading
from collections import Counter


class Diagnostics:
    """Collects warning counts and messages from numerical routines.

    Thread-safe: per-series work may run on a pool while sharing one sink.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.counts: Counter[str] = Counter()
        self.messages: list[str] = []

    def warn(self, key: str, message: str | None = None) -> None:
        with self._lock:
            self.counts[key] += 1
            if message is not None:
                self.messages.append(f"{key}: {message}")

    def merged_report(self) -> list[str]:
        """Counts then distinct messages, both sorted so that the report does
        not depend on thread interleaving."""
        with self._lock:
            lines = [f"{key}: {count}" for key, count in sorted(self.counts.items())]
            return lines + sorted(set(self.messages))
