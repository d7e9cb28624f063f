"""JSON Lines trace files: one executed instruction per line.

Each line holds exactly the keys ``seq``, ``tid``, ``addr`` (hex string),
``cls`` (``CALL``/``RET``/``BRANCH``/``OTHER``) and ``mn``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO, Iterable, Iterator

from .isa import OpcodeClass, TraceEvent

TRACE_KEYS = frozenset({"seq", "tid", "addr", "cls", "mn"})


class TraceFormatError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def event_to_json(ev: TraceEvent) -> str:
    return json.dumps({"seq": ev.seq, "tid": ev.tid, "addr": f"{ev.addr:#x}",
                       "cls": ev.cls.value, "mn": ev.mnemonic})


def write_trace(events: Iterable[TraceEvent], dest: str | Path | IO[str]) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w") as fh:
            write_trace(events, fh)
        return
    for ev in events:
        dest.write(event_to_json(ev) + "\n")


def parse_event(line: str, lineno: int) -> TraceEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict) or set(obj) != TRACE_KEYS:
        raise TraceFormatError(f"expected keys {sorted(TRACE_KEYS)}", lineno)
    seq, tid, addr, cls, mn = (obj[k] for k in ("seq", "tid", "addr", "cls", "mn"))
    if not (isinstance(seq, int) and isinstance(tid, int)) or isinstance(seq, bool):
        raise TraceFormatError("seq and tid must be integers", lineno)
    if not isinstance(addr, str):
        raise TraceFormatError("addr must be a hex string", lineno)
    try:
        addr_value = int(addr, 16)
        cls_value = OpcodeClass(cls)
    except (ValueError, TypeError):
        raise TraceFormatError(f"bad addr {addr!r} or cls {cls!r}", lineno) from None
    if not isinstance(mn, str):
        raise TraceFormatError("mn must be a string", lineno)
    return TraceEvent(seq, tid, addr_value, cls_value, mn)


def iter_trace(src: str | Path | IO[str]) -> Iterator[TraceEvent]:
    if isinstance(src, (str, Path)):
        with open(src) as fh:
            yield from iter_trace(fh)
        return
    for lineno, line in enumerate(src, start=1):
        if line.strip():
            yield parse_event(line, lineno)


def read_trace(src: str | Path | IO[str]) -> list[TraceEvent]:
    return list(iter_trace(src))
