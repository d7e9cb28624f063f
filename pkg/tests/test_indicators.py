import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ropwatch import corpus
from ropwatch.indicators import (
    GapAnalyzer,
    IpFeatureTracker,
    ParityAnalyzer,
    TraceOrderError,
    alert_states,
    gap_analyze,
    ip_features,
    make_analyzer,
    parity_analyze,
    replay_batch,
    window_features,
)
from ropwatch.isa import OpcodeClass, TraceEvent
from ropwatch.vm import run

C, R, B, O = OpcodeClass.CALL, OpcodeClass.RET, OpcodeClass.BRANCH, OpcodeClass.OTHER


def trace(classes, tid=0, start=0, addrs=None):
    return [TraceEvent(start + i, tid, addrs[i] if addrs else 0x1000 + i, c, c.value)
            for i, c in enumerate(classes)]


# --- parity ---------------------------------------------------------------

def test_parity_balanced_is_clean():
    v = parity_analyze(trace([C, O, C, R, R]))[0]
    assert not v.alert and v.trigger_seq is None
    assert v.evidence == {"calls": 2, "rets": 2}


def test_parity_fires_on_first_excess_ret():
    v = parity_analyze(trace([C, R, O, R, C, R]))[0]
    assert v.alert and v.trigger_seq == 3
    assert v.to_json() == {"indicator": "parity", "tid": 0, "alert": True,
                           "trigger_seq": 3, "evidence": {"calls": 2, "rets": 3}}


def test_parity_latches():
    an = ParityAnalyzer()
    states = [an.feed(e) for e in trace([R, C, C, C, O])]
    assert states == [True] * 5


def test_empty_trace_has_no_verdicts():
    assert parity_analyze([]) == {}
    assert replay_batch([], "gap") == {}


# --- gap ------------------------------------------------------------------

def _rets(gaps, lead=(C,)):
    """RETs separated by the given numbers of plain instructions."""
    out = list(lead)
    for g in gaps:
        out += [O] * g + [R]
    return out


def test_gap_three_short_gaps_alert():
    v = gap_analyze(trace(_rets([1, 1, 1])))[0]
    assert v.alert and v.evidence["max_consecutive"] == 3
    assert v.trigger_seq == len(_rets([1, 1, 1])) - 1


@pytest.mark.parametrize("gap,suspect", [(0, True), (4, True), (5, False), (9, False)])
def test_gap_boundary(gap, suspect):
    v = gap_analyze(trace(_rets([gap] * 3)))[0]
    assert v.alert is suspect
    assert v.evidence["suspects"] == (3 if suspect else 0)


def test_gap_run_is_broken_by_long_gap():
    v = gap_analyze(trace(_rets([1, 1, 8, 1, 1])))[0]
    assert not v.alert and v.evidence["max_consecutive"] == 2


def test_call_and_branch_reset_counter():
    # 6 plain instructions then a branch: only the 1 after it counts
    seq = [C] + [O] * 6 + [B, O, R] + [O, R] + [O, R]
    assert gap_analyze(trace(seq))[0].alert
    seq = [C] + [O] * 6 + [C, O, R] + [O, R] + [O, R]
    assert gap_analyze(trace(seq))[0].alert


def test_gap_thresholds():
    t = trace(_rets([6, 6, 6]))
    assert not gap_analyze(t)[0].alert
    assert gap_analyze(t, gadget_max=7)[0].alert
    assert not gap_analyze(trace(_rets([1, 1])), run_len=3)[0].alert
    assert gap_analyze(trace(_rets([1, 1])), run_len=2)[0].alert
    with pytest.raises(ValueError):
        GapAnalyzer(0, 3)


def test_make_analyzer():
    assert isinstance(make_analyzer("parity"), ParityAnalyzer)
    assert make_analyzer("gap", 7, 2).gadget_max == 7
    with pytest.raises(ValueError):
        make_analyzer("ip")


def test_out_of_order_rejected():
    bad = trace([C, R]) + [TraceEvent(1, 0, 0x1000, R, "RET")]
    for fn in (parity_analyze, gap_analyze, lambda e: replay_batch(e, "gap"),
               lambda e: ip_features(e, window=16)):
        with pytest.raises(TraceOrderError):
            fn(bad)


# --- streaming vs batch ----------------------------------------------------

_events = st.lists(st.tuples(st.sampled_from([C, R, B, O]), st.integers(0, 2)), max_size=120)


@given(_events, st.integers(1, 8), st.integers(1, 4))
def test_streaming_equals_batch(items, gadget_max, run_len):
    events = [TraceEvent(i, tid, 0x1000 + i, c, c.value) for i, (c, tid) in enumerate(items)]
    for ind in ("parity", "gap"):
        an = make_analyzer(ind, gadget_max, run_len)
        streamed = [an.feed(e) for e in events]
        batch = replay_batch(events, ind, gadget_max, run_len)
        assert an.verdicts() == batch
        assert streamed == alert_states(events, batch)


def test_streaming_equals_batch_on_corpus(vuln):
    progs = corpus.legit_programs(5, 30)
    for p in progs:
        ev = run(p.image(), p.inputs).events
        for ind in ("parity", "gap"):
            assert make_analyzer(ind).feed_all(ev).verdicts() == replay_batch(ev, ind)


# --- per-thread -----------------------------------------------------------

def test_threads_are_isolated():
    a = trace([R], tid=1)
    b = trace(_rets([1, 1, 1], lead=(C, C, C)), tid=2)
    rng = random.Random(0)
    from ropwatch.vm import interleave

    for _ in range(20):
        order = [0] * len(a) + [1] * len(b)
        rng.shuffle(order)
        merged = interleave([a, b], order)
        par, gap = parity_analyze(merged), gap_analyze(merged)
        assert par[1].alert and not par[2].alert
        assert gap[2].alert and not gap[1].alert
        assert gap[2].evidence == gap_analyze(b)[2].evidence


# --- ip features ----------------------------------------------------------

def test_window_features_extremes():
    loop = np.array([0x1000, 0x1001, 0x1002] * 10)
    assert window_features(loop, 3, 64) == (1.0, 0.0)
    sweep = np.arange(0x1000, 0x1000 + 30)
    assert window_features(sweep, 3, 64) == (0.0, 0.0)
    hop = np.array([0x1000, 0x4000] * 15)
    assert window_features(hop, 3, 64) == (1.0, 1.0)
    assert window_features(np.array([5]), 1, 0) == (1.0, 0.0)


def test_ip_features_windows_and_csv():
    evs = trace([O] * 100, addrs=[0x1000 + (i % 4) for i in range(100)])
    s = ip_features(evs, window=32)[0]
    assert [r.window_start_seq for r in s.records] == [0, 32, 64]
    assert s.revisit().tolist() == [1.0] * 3
    csv_text = s.to_csv().splitlines()
    assert csv_text[0] == "window_start_seq,revisit_score,scatter_score"
    assert csv_text[1] == "0,1.000000,0.000000"
    sliding = ip_features(evs, window=32, stride=1)[0]
    assert len(sliding.records) == 100 - 32 + 1


def test_ip_features_validation():
    with pytest.raises(ValueError):
        IpFeatureTracker(window=8)
    with pytest.raises(ValueError):
        IpFeatureTracker(window=32, stride=33)
    with pytest.raises(ValueError):
        IpFeatureTracker(window=32, k=0)
    assert ip_features(trace([O] * 10), window=16)[0].records == []
