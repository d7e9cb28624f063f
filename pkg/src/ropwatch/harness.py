"""Bulk evaluation: build a labelled plan of legitimate runs and ROP attacks,
execute every entry, and tally the detector's confusion matrix."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import corpus, gadgets, indicators
from .vm import BUFFER_WORDS, exploit_run, run

LEGITIMATE = "Legitimate"
MALICIOUS = "Malicious"

# Full-scale sample sizes and the default 1/5 scale-down.
DEFAULT_COUNTS = (54, 146)
FULL_COUNTS = (270, 730)


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def p(self) -> int:
        return self.tp + self.fn

    @property
    def n(self) -> int:
        return self.tn + self.fp

    @property
    def total(self) -> int:
        return self.p + self.n

    @classmethod
    def tally(cls, pairs: Iterable[tuple[bool, bool]]) -> "ConfusionMatrix":
        """Build from ``(is_malicious, alerted)`` pairs."""
        tp = tn = fp = fn = 0
        for malicious, alert in pairs:
            if malicious:
                tp += alert
                fn += not alert
            else:
                fp += alert
                tn += not alert
        return cls(tp, tn, fp, fn)

    def to_json(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "p": self.p, "n": self.n}


def accuracy(m: ConfusionMatrix) -> float:
    """(TP + TN) / (P + N)"""
    if m.total == 0:
        raise UndefinedMetricError("accuracy of an empty matrix")
    return (m.tp + m.tn) / m.total


def error_rate(m: ConfusionMatrix) -> float:
    """(FP + FN) / (P + N)"""
    if m.total == 0:
        raise UndefinedMetricError("error rate of an empty matrix")
    return (m.fp + m.fn) / m.total


# ------------------------------------------------------------------ plans

@dataclass(frozen=True)
class PlanEntry:
    id: str
    label: str
    image: str
    group: str
    inputs: tuple[int, ...] = ()
    chain: dict | None = None
    padding: int = BUFFER_WORDS

    def to_json(self) -> dict:
        out = {"id": self.id, "label": self.label, "image": self.image, "group": self.group}
        if self.chain is None:
            out["inputs"] = list(self.inputs)
        else:
            out["chain"] = self.chain
            out["padding"] = self.padding
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PlanEntry":
        return cls(obj["id"], obj["label"], obj["image"], obj["group"],
                   tuple(obj.get("inputs", ())), obj.get("chain"),
                   obj.get("padding", BUFFER_WORDS))


@dataclass(frozen=True)
class ExperimentPlan:
    entries: tuple[PlanEntry, ...]
    images: dict[str, str]
    indicator: str = "parity"
    thresholds: dict = field(default_factory=lambda: {"gadget_max": indicators.GADGET_MAX,
                                                      "run_len": indicators.RUN_LEN})
    seed: int = 0
    metadata: dict = field(default_factory=lambda: {"dep": False, "aslr": False})

    def to_json(self) -> dict:
        return {"seed": self.seed, "indicator": self.indicator, "thresholds": dict(self.thresholds),
                "metadata": dict(self.metadata), "images": dict(sorted(self.images.items())),
                "entries": [e.to_json() for e in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentPlan":
        return cls(tuple(PlanEntry.from_json(e) for e in obj["entries"]), dict(obj["images"]),
                   obj.get("indicator", "parity"), dict(obj.get("thresholds", {})),
                   obj.get("seed", 0), dict(obj.get("metadata", {})))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_indicator(self, indicator: str, **thresholds) -> "ExperimentPlan":
        merged = {**self.thresholds, **thresholds}
        return ExperimentPlan(self.entries, self.images, indicator, merged, self.seed, self.metadata)


def build_corpus(seed: int = 0, counts: tuple[int, int] = DEFAULT_COUNTS,
                 indicator: str = "parity", cap: int = gadgets.DEFAULT_CAP,
                 padding: int = BUFFER_WORDS, **thresholds) -> ExperimentPlan:
    """Materialise the labelled plan: *counts* = (legitimate, malicious)."""
    n_legit, n_attack = counts
    if n_legit < 1 or n_attack < 1:
        raise ValueError("need at least one program of each class")
    if n_attack > cap:
        raise ValueError(f"{n_attack} attacks requested but cap is {cap}")
    images = {"vulnerable": corpus.VULNERABLE_SOURCE}
    entries = []
    for prog in corpus.legit_programs(seed, n_legit):
        key = "vulnerable" if prog.archetype == "vulnerable" else prog.name
        images.setdefault(key, prog.source)
        entries.append(PlanEntry(prog.name, LEGITIMATE, key, prog.archetype, prog.inputs))
    target = corpus.vulnerable_image()
    for i, chain in enumerate(gadgets.generate_attacks(target, n_attack, seed=seed)):
        entries.append(PlanEntry(f"rop-{i:04d}", MALICIOUS, "vulnerable", chain.source,
                                 chain=chain.to_json(), padding=padding))
    merged = {"gadget_max": indicators.GADGET_MAX, "run_len": indicators.RUN_LEN, **thresholds}
    return ExperimentPlan(tuple(entries), images, indicator, merged, seed)


# ---------------------------------------------------------------- running

@dataclass(frozen=True)
class Row:
    id: str
    label: str
    group: str
    alert: bool
    trigger_seq: int | None
    exit: str
    events: int
    elapsed_s: float = 0.0

    def to_json(self, timing: bool = True) -> dict:
        out = {"id": self.id, "label": self.label, "group": self.group, "alert": self.alert,
               "trigger_seq": self.trigger_seq, "exit": self.exit, "events": self.events}
        if timing:
            out["elapsed_s"] = round(self.elapsed_s, 6)
        return out


@dataclass(frozen=True)
class ExecutionError:
    id: str
    label: str
    group: str
    exit: str

    def to_json(self) -> dict:
        return {"id": self.id, "label": self.label, "group": self.group, "exit": self.exit}


@dataclass(frozen=True)
class EvalReport:
    plan_digest: str
    indicator: str
    thresholds: dict
    metadata: dict
    matrix: ConfusionMatrix
    rows: tuple[Row, ...]
    errors: tuple[ExecutionError, ...] = ()

    @property
    def accuracy(self) -> float:
        return accuracy(self.matrix)

    @property
    def error_rate(self) -> float:
        return error_rate(self.matrix)

    def to_json(self, timing: bool = True) -> dict:
        return {
            "plan_digest": self.plan_digest,
            "indicator": self.indicator,
            "thresholds": dict(self.thresholds),
            "metadata": dict(self.metadata),
            "matrix": self.matrix.to_json(),
            "accuracy": self.accuracy,
            "error_rate": self.error_rate,
            "rows": [r.to_json(timing) for r in self.rows],
            "errors": [e.to_json() for e in self.errors],
        }

    def dumps(self, timing: bool = True) -> str:
        return json.dumps(self.to_json(timing), indent=2, sort_keys=True) + "\n"

    def render(self, tables: bool = False) -> str:
        return render_tables(self) if tables else render_summary(self)


def _execute(entry: PlanEntry, source: str, indicator: str, thresholds: dict):
    image = corpus.vulnerable_image() if entry.image == "vulnerable" else corpus.link_cached(source)
    start = time.perf_counter()
    if entry.chain is None:
        record = run(image, entry.inputs)
    else:
        chain = gadgets.RopChain.from_json(entry.chain, image)
        record = exploit_run(image, chain, padding=entry.padding)
    analyzer = indicators.make_analyzer(indicator, thresholds.get("gadget_max", indicators.GADGET_MAX),
                                        thresholds.get("run_len", indicators.RUN_LEN))
    verdicts = analyzer.feed_all(record.events).verdicts()
    elapsed = time.perf_counter() - start
    exit_text = str(record.exit)
    saw_ret = any(ev.cls is indicators.RET for ev in record.events)
    failed = record.exit.kind != "Halted" and (entry.label == LEGITIMATE or not saw_ret)
    if failed:
        return ExecutionError(entry.id, entry.label, entry.group, exit_text)
    alerts = [v for v in verdicts.values() if v.alert]
    trigger = min(v.trigger_seq for v in alerts) if alerts else None
    return Row(entry.id, entry.label, entry.group, bool(alerts), trigger, exit_text,
               len(record.events), elapsed)


def run_experiment(plan: ExperimentPlan, n_jobs: int = 1) -> EvalReport:
    """Execute every plan entry once and tally alerts against labels."""
    if not plan.entries:
        raise ValueError("empty experiment plan")
    if plan.indicator not in ("parity", "gap"):
        raise ValueError(f"indicator {plan.indicator!r} has no alert rule to evaluate")
    jobs = [(e, plan.images[e.image], plan.indicator, plan.thresholds) for e in plan.entries]
    if n_jobs == 1:
        results = [_execute(*job) for job in jobs]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_execute)(*job) for job in jobs)
    rows = tuple(r for r in results if isinstance(r, Row))
    errors = tuple(r for r in results if isinstance(r, ExecutionError))
    matrix = ConfusionMatrix.tally((r.label == MALICIOUS, r.alert) for r in rows)
    return EvalReport(plan.digest(), plan.indicator, dict(plan.thresholds), dict(plan.metadata),
                      matrix, rows, errors)


# -------------------------------------------------------------- rendering

_SOURCE_NAMES = {gadgets.CODE_SEGMENT: "Code segment (the program code)", gadgets.LIBRARY: "Libc"}


def _pct(part: int, whole: int) -> str:
    return f"{100 * part / whole:.1f}%" if whole else "-"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*map(str, r)) for r in rows]
    return "\n".join(lines)


def render_tables(report: EvalReport) -> str:
    """Per-source detection, legitimate detection and confusion matrix tables."""
    flag = {True: "Enabled", False: "Disabled"}
    dep = flag[bool(report.metadata.get("dep"))]
    aslr = flag[bool(report.metadata.get("aslr"))]
    mal = [r for r in report.rows if r.label == MALICIOUS]
    leg = [r for r in report.rows if r.label == LEGITIMATE]
    out = [f"Results of the {report.indicator} indicator: Malicious executions"]
    rows = []
    for source in (gadgets.CODE_SEGMENT, gadgets.LIBRARY):
        group = [r for r in mal if r.group == source]
        if group:
            rows.append((_SOURCE_NAMES[source], len(group), dep, aslr,
                         _pct(sum(r.alert for r in group), len(group))))
    out.append(_table(("Gadget Source", "Samples Number", "DEP", "ASLR", "Detected"), rows))
    out.append("")
    out.append(f"Results of the {report.indicator} indicator: Legitimate executions")
    out.append(_table(("Samples number", "Detected"),
                      [(len(leg), _pct(sum(r.alert for r in leg), len(leg)))]))
    out.append("")
    m = report.matrix
    out.append(f"Confusion Matrix: {report.indicator} indicator")
    out.append(_table(
        ("", "Detected as Legitimate", "Detected as Malicious", ""),
        [("Actually Legitimate", f"TN = {m.tn}", f"FP = {m.fp}", f"N = {m.n}"),
         ("Actually Malicious", f"FN = {m.fn}", f"TP = {m.tp}", f"P = {m.p}"),
         ("", m.tn + m.fn, m.fp + m.tp, "-")]))
    out.append("")
    out.append(f"Accuracy = {report.accuracy:.3f}    Error Rate = {report.error_rate:.3f}")
    if report.errors:
        out.append(f"Excluded executions (faulted): {len(report.errors)}")
    return "\n".join(out) + "\n"


def render_summary(report: EvalReport) -> str:
    m = report.matrix
    lines = [f"indicator {report.indicator} {report.thresholds}",
             f"tp={m.tp} tn={m.tn} fp={m.fp} fn={m.fn}",
             f"accuracy={report.accuracy:.4f} error_rate={report.error_rate:.4f}"]
    groups: dict[tuple[str, str], list[Row]] = {}
    for r in report.rows:
        groups.setdefault((r.label, r.group), []).append(r)
    rows = [(label, group, len(rs), sum(r.alert for r in rs)) for (label, group), rs in sorted(groups.items())]
    lines.append(_table(("label", "group", "runs", "alerts"), rows))
    if report.errors:
        lines.append(f"excluded (faulted): {len(report.errors)}")
    return "\n".join(lines) + "\n"
