"""In-process message transport between logical ranks.

R mailbox endpoints live inside one process.  Collective data motion runs
as a superstep: every rank posts its (aggregated) sends, then every rank
drains its mailbox.  Messages between one ordered rank pair are delivered
exactly once, in the order sent.  Message and byte counts feed the
process-wide counters so tests can assert on traffic instead of timing.

This is the seam where a real network layer would slot in; everything
above it sees only send/drain semantics.
"""

from __future__ import annotations

from collections import deque

from . import counters


class TransportError(RuntimeError):
    def __init__(self, src, dst, why):
        super().__init__(f"transport failure {src} -> {dst}: {why}")
        self.src = src
        self.dst = dst


class Transport:
    def __init__(self, nranks):
        nranks = int(nranks)
        if nranks < 1:
            raise ValueError("nranks must be >= 1")
        self.nranks = nranks
        self._queues = {}

    def send(self, src, dst, tag, payload):
        """Post one message; payload is an opaque buffer (numpy array)."""
        if not (0 <= src < self.nranks and 0 <= dst < self.nranks):
            raise TransportError(src, dst, "rank out of range")
        self._queues.setdefault((src, dst), deque()).append((tag, payload))
        counters.incr("transport_messages")
        counters.incr("transport_bytes", int(getattr(payload, "nbytes", len(payload))))

    def drain(self, dst):
        """Take every pending message addressed to dst.

        Returns (src, tag, payload) tuples ordered by source rank, FIFO
        within a pair, so receive processing is deterministic.
        """
        out = []
        for src in range(self.nranks):
            q = self._queues.get((src, dst))
            while q:
                tag, payload = q.popleft()
                out.append((src, tag, payload))
        return out

    def pending(self):
        return sum(len(q) for q in self._queues.values())
