"""Input validation shared by the estimators and the CLI."""

from __future__ import annotations

import numbers
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .indicators import TraceOrderError
from .isa import OpcodeClass, TraceEvent
from .traceio import read_trace


def check_trace(trace: Any) -> list[TraceEvent]:
    """Coerce *trace* to a validated list of events.

    Accepts an :class:`~ropwatch.vm.ExecutionRecord`, a path to a JSONL
    trace, or an iterable of events (``TraceEvent`` or 5-tuples).
    """
    if isinstance(trace, (str, Path)):
        events = read_trace(trace)
    elif hasattr(trace, "events"):
        events = list(trace.events)
    else:
        events = []
        for item in trace:
            if isinstance(item, TraceEvent):
                events.append(item)
            else:
                seq, tid, addr, cls, mn = item
                events.append(TraceEvent(int(seq), int(tid), int(addr), OpcodeClass(cls), str(mn)))
    last: dict[int, int] = {}
    for ev in events:
        if not isinstance(ev.cls, OpcodeClass):
            raise TypeError(f"event {ev.seq}: cls must be an OpcodeClass")
        prev = last.get(ev.tid)
        if prev is not None and ev.seq <= prev:
            raise TraceOrderError(f"tid {ev.tid}: seq {ev.seq} after {prev}")
        last[ev.tid] = ev.seq
    return events


def check_traces(X: Any) -> list[list[TraceEvent]]:
    if isinstance(X, (str, Path)) or hasattr(X, "events"):
        raise TypeError("expected a sequence of traces, got a single trace")
    traces = [check_trace(t) for t in X]
    if not traces:
        raise ValueError("need at least one trace")
    return traces


def check_labels(y: Sequence, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"y must be 1-d with {n} entries")
    if not set(np.unique(y).tolist()) <= {0, 1}:
        raise ValueError("labels must be 0 (legitimate) or 1 (malicious)")
    return y.astype(int)


def check_int(value: Any, name: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)
