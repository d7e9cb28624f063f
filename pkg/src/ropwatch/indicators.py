"""Trace analyzers for the three ROP indicators.

All analyzers consume :class:`~ropwatch.isa.TraceEvent` streams and keep
separate state per thread id.

* parity: alerts when a thread has executed more returns than calls.
* gap: counts non-control-flow instructions between returns; a return
  reached after fewer than ``gadget_max`` of them is suspect, and
  ``run_len`` suspects in a row raise the alert. Calls and branches clear
  the counter without recording anything.
* ip: windowed features over the instruction addresses (no alert rule).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .isa import OpcodeClass, TraceEvent

CALL, RET, BRANCH, OTHER = OpcodeClass.CALL, OpcodeClass.RET, OpcodeClass.BRANCH, OpcodeClass.OTHER

GADGET_MAX = 5
RUN_LEN = 3
IP_WINDOW = 256
IP_MIN_WINDOW = 16
IP_REVISIT_K = 3
IP_RADIUS = 64


class TraceOrderError(ValueError):
    """Events of one thread arrived out of sequence order."""


@dataclass(frozen=True)
class IndicatorVerdict:
    indicator: str
    tid: int
    alert: bool
    trigger_seq: int | None
    evidence: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.alert and self.trigger_seq is None:
            raise ValueError("an alert needs a trigger position")

    def to_json(self) -> dict:
        return {"indicator": self.indicator, "tid": self.tid, "alert": self.alert,
                "trigger_seq": self.trigger_seq, "evidence": dict(self.evidence)}


class _Analyzer:
    name = ""

    def __init__(self) -> None:
        self._last_seq: dict[int, int] = {}
        self._trigger: dict[int, int | None] = {}

    def _check_order(self, ev: TraceEvent) -> None:
        last = self._last_seq.get(ev.tid)
        if last is not None and ev.seq <= last:
            raise TraceOrderError(f"tid {ev.tid}: seq {ev.seq} after {last}")
        self._last_seq[ev.tid] = ev.seq

    def feed(self, ev: TraceEvent) -> bool:
        """Consume one event; return whether its thread is in alert."""
        raise NotImplementedError

    def feed_all(self, events: Iterable[TraceEvent]) -> "_Analyzer":
        for ev in events:
            self.feed(ev)
        return self

    def _evidence(self, tid: int) -> dict:
        raise NotImplementedError

    def verdict(self, tid: int) -> IndicatorVerdict:
        trig = self._trigger.get(tid)
        return IndicatorVerdict(self.name, tid, trig is not None, trig, self._evidence(tid))

    def verdicts(self) -> dict[int, IndicatorVerdict]:
        return {tid: self.verdict(tid) for tid in sorted(self._last_seq)}


class ParityAnalyzer(_Analyzer):
    name = "parity"

    def __init__(self) -> None:
        super().__init__()
        self.calls: dict[int, int] = {}
        self.rets: dict[int, int] = {}

    def feed(self, ev: TraceEvent) -> bool:
        self._check_order(ev)
        tid = ev.tid
        if tid not in self.calls:
            self.calls[tid] = self.rets[tid] = 0
            self._trigger[tid] = None
        if ev.cls is CALL:
            self.calls[tid] += 1
        elif ev.cls is RET:
            self.rets[tid] += 1
        else:
            return self._trigger[tid] is not None
        if self._trigger[tid] is None and self.rets[tid] > self.calls[tid]:
            self._trigger[tid] = ev.seq
        return self._trigger[tid] is not None

    def _evidence(self, tid: int) -> dict:
        return {"calls": self.calls[tid], "rets": self.rets[tid]}


@dataclass
class GapState:
    instr_counter: int = 0
    consecutive_suspects: int = 0
    max_consecutive: int = 0
    suspects: int = 0
    gap_history: list[int] = field(default_factory=list)


class GapAnalyzer(_Analyzer):
    name = "gap"

    def __init__(self, gadget_max: int = GADGET_MAX, run_len: int = RUN_LEN) -> None:
        super().__init__()
        if gadget_max < 1 or run_len < 1:
            raise ValueError("gadget_max and run_len must be at least 1")
        self.gadget_max = gadget_max
        self.run_len = run_len
        self.state: dict[int, GapState] = {}

    def feed(self, ev: TraceEvent) -> bool:
        self._check_order(ev)
        tid = ev.tid
        st = self.state.get(tid)
        if st is None:
            st = self.state[tid] = GapState()
            self._trigger[tid] = None
        if ev.cls is OTHER:
            st.instr_counter += 1
        elif ev.cls is RET:
            # The recorded gap counts the RET itself; the decision discounts it.
            gap = st.instr_counter + 1
            st.gap_history.append(gap)
            st.instr_counter = 0
            if gap - 1 < self.gadget_max:
                st.suspects += 1
                st.consecutive_suspects += 1
                st.max_consecutive = max(st.max_consecutive, st.consecutive_suspects)
                if self._trigger[tid] is None and st.consecutive_suspects >= self.run_len:
                    self._trigger[tid] = ev.seq
            else:
                st.consecutive_suspects = 0
        else:
            st.instr_counter = 0
        return self._trigger[tid] is not None

    def _evidence(self, tid: int) -> dict:
        st = self.state[tid]
        return {"gaps": len(st.gap_history), "suspects": st.suspects,
                "max_consecutive": st.max_consecutive,
                "consecutive": st.consecutive_suspects}


def parity_analyze(events: Iterable[TraceEvent]) -> dict[int, IndicatorVerdict]:
    return ParityAnalyzer().feed_all(events).verdicts()


def gap_analyze(events: Iterable[TraceEvent], gadget_max: int = GADGET_MAX,
                run_len: int = RUN_LEN) -> dict[int, IndicatorVerdict]:
    return GapAnalyzer(gadget_max, run_len).feed_all(events).verdicts()


def make_analyzer(indicator: str, gadget_max: int = GADGET_MAX, run_len: int = RUN_LEN) -> _Analyzer:
    if indicator == "parity":
        return ParityAnalyzer()
    if indicator == "gap":
        return GapAnalyzer(gadget_max, run_len)
    raise ValueError(f"no alerting analyzer for indicator {indicator!r}")


# ------------------------------------------------------------ batch replay

def _split_by_tid(events: Iterable[TraceEvent]) -> dict[int, list[TraceEvent]]:
    out: dict[int, list[TraceEvent]] = {}
    for ev in events:
        out.setdefault(ev.tid, []).append(ev)
    return out


_CLS_CODE = {CALL: 0, RET: 1, BRANCH: 2, OTHER: 3}


def _batch_parity(evs: list[TraceEvent]) -> IndicatorVerdict:
    cls = np.fromiter((_CLS_CODE[e.cls] for e in evs), dtype=np.int8, count=len(evs))
    calls = np.cumsum(cls == 0)
    rets = np.cumsum(cls == 1)
    bad = np.flatnonzero((rets > calls) & (cls <= 1))
    trig = evs[bad[0]].seq if bad.size else None
    return IndicatorVerdict("parity", evs[0].tid, trig is not None, trig,
                            {"calls": int(calls[-1]), "rets": int(rets[-1])})


def _batch_gap(evs: list[TraceEvent], gadget_max: int, run_len: int) -> IndicatorVerdict:
    cls = np.fromiter((_CLS_CODE[e.cls] for e in evs), dtype=np.int8, count=len(evs))
    is_other = cls == 3
    others_before = np.concatenate(([0], np.cumsum(is_other)))  # others in evs[:i]
    resets = np.flatnonzero(~is_other)
    ret_idx = np.flatnonzero(cls == 1)
    # Previous control-flow event (of any kind) before each RET.
    pos = np.searchsorted(resets, ret_idx) - 1
    prev = np.where(pos >= 0, resets[np.maximum(pos, 0)], -1)
    effective = others_before[ret_idx] - others_before[prev + 1]
    suspect = effective < gadget_max
    run = 0
    best = 0
    trig = None
    for i, s in enumerate(suspect):
        run = run + 1 if s else 0
        best = max(best, run)
        if trig is None and run >= run_len:
            trig = evs[ret_idx[i]].seq
    return IndicatorVerdict("gap", evs[0].tid, trig is not None, trig,
                            {"gaps": int(ret_idx.size), "suspects": int(suspect.sum()),
                             "max_consecutive": best, "consecutive": run})


def replay_batch(events: Iterable[TraceEvent], indicator: str = "parity",
                 gadget_max: int = GADGET_MAX, run_len: int = RUN_LEN) -> dict[int, IndicatorVerdict]:
    """Recompute verdicts from the complete trace with array arithmetic.

    Independent of the streaming analyzers; both must agree on every trace.
    """
    per_tid = _split_by_tid(events)
    out = {}
    for tid in sorted(per_tid):
        evs = per_tid[tid]
        seqs = [e.seq for e in evs]
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise TraceOrderError(f"tid {tid}: sequence numbers not increasing")
        if indicator == "parity":
            out[tid] = _batch_parity(evs)
        elif indicator == "gap":
            out[tid] = _batch_gap(evs, gadget_max, run_len)
        else:
            raise ValueError(f"no alerting analyzer for indicator {indicator!r}")
    return out


def alert_states(events: Iterable[TraceEvent], verdicts: dict[int, IndicatorVerdict]) -> list[bool]:
    """Per-event alert state implied by latched *verdicts*."""
    out = []
    for ev in events:
        v = verdicts[ev.tid]
        out.append(v.trigger_seq is not None and ev.seq >= v.trigger_seq)
    return out


# --------------------------------------------------------------- ip features

@dataclass(frozen=True)
class IpFeatureRecord:
    window_start_seq: int
    revisit_score: float
    scatter_score: float


@dataclass
class IpFeatureSeries:
    tid: int
    window: int
    k: int
    radius: int
    records: list[IpFeatureRecord] = field(default_factory=list)

    def revisit(self) -> np.ndarray:
        return np.array([r.revisit_score for r in self.records], dtype=float)

    def scatter(self) -> np.ndarray:
        return np.array([r.scatter_score for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["window_start_seq", "revisit_score", "scatter_score"])
        for r in self.records:
            w.writerow([r.window_start_seq, f"{r.revisit_score:.6f}", f"{r.scatter_score:.6f}"])
        return buf.getvalue()


def window_features(addrs: np.ndarray, k: int, radius: int) -> tuple[float, float]:
    """Revisit and scatter scores for one window of addresses.

    revisit: share of distinct addresses executed at least *k* times.
    scatter: share of successive steps that move more than *radius*.
    """
    _, counts = np.unique(addrs, return_counts=True)
    revisit = float(np.count_nonzero(counts >= k) / counts.size)
    steps = np.abs(np.diff(addrs.astype(np.int64)))
    scatter = float(np.count_nonzero(steps > radius) / steps.size) if steps.size else 0.0
    return revisit, scatter


class IpFeatureTracker:
    """Streaming windowed address features, one window buffer per thread."""

    def __init__(self, window: int = IP_WINDOW, k: int = IP_REVISIT_K, radius: int = IP_RADIUS,
                 stride: int | None = None):
        if window < IP_MIN_WINDOW:
            raise ValueError(f"window must be at least {IP_MIN_WINDOW}")
        if k < 1 or radius < 0:
            raise ValueError("k must be positive and radius non-negative")
        stride = window if stride is None else stride
        if not 1 <= stride <= window:
            raise ValueError("stride must be in 1..window")
        self.window, self.k, self.radius, self.stride = window, k, radius, stride
        self._buf: dict[int, list[TraceEvent]] = {}
        self.series: dict[int, IpFeatureSeries] = {}
        self._last_seq: dict[int, int] = {}

    def feed(self, ev: TraceEvent) -> IpFeatureRecord | None:
        last = self._last_seq.get(ev.tid)
        if last is not None and ev.seq <= last:
            raise TraceOrderError(f"tid {ev.tid}: seq {ev.seq} after {last}")
        self._last_seq[ev.tid] = ev.seq
        if ev.tid not in self.series:
            self.series[ev.tid] = IpFeatureSeries(ev.tid, self.window, self.k, self.radius)
        buf = self._buf.setdefault(ev.tid, [])
        buf.append(ev)
        if len(buf) < self.window:
            return None
        addrs = np.fromiter((e.addr for e in buf), dtype=np.int64, count=len(buf))
        revisit, scatter = window_features(addrs, self.k, self.radius)
        rec = IpFeatureRecord(buf[0].seq, revisit, scatter)
        self.series[ev.tid].records.append(rec)
        del buf[: self.stride]
        return rec


def ip_features(events: Iterable[TraceEvent], window: int = IP_WINDOW, k: int = IP_REVISIT_K,
                radius: int = IP_RADIUS, stride: int | None = None) -> dict[int, IpFeatureSeries]:
    """Windowed address features per thread.

    Windows are non-overlapping unless *stride* is smaller than *window*;
    a trailing partial window produces no record.
    """
    tracker = IpFeatureTracker(window, k, radius, stride)
    for ev in events:
        tracker.feed(ev)
    return dict(sorted(tracker.series.items()))


