"""Process-wide instrumentation counters.

Every communication-like event in the toolkit increments a named counter
here so tests can assert on traffic (message counts, bytes, cache hits)
instead of timing.  Counters are plain integers guarded by a lock; reads
used in assertions should call snapshot() for a consistent view.
"""

from __future__ import annotations

import threading
from collections import defaultdict

_lock = threading.Lock()
_counts: dict[str, int] = defaultdict(int)


def incr(name, amount=1):
    with _lock:
        _counts[name] += amount


def peak(name, value):
    """Record value if it exceeds the current maximum for name."""
    with _lock:
        if value > _counts[name]:
            _counts[name] = value


def get(name):
    with _lock:
        return _counts[name]


def snapshot():
    with _lock:
        return dict(_counts)


def reset(*names):
    """Reset the named counters, or every counter when called bare."""
    with _lock:
        if names:
            for n in names:
                _counts[n] = 0
        else:
            _counts.clear()
