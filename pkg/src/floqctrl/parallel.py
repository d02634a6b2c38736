from __future__ import annotations

import os

THREADS_ENV = "FLOQCTRL_THREADS"


def worker_count() -> int:
    """Worker threads for ensemble members and restarts; env var caps it."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
