"""Recall@1 at temporal IoU thresholds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

from .container import atomic_write
from .temporal import Interval, temporal_iou

THRESHOLDS = (0.3, 0.5, 0.7)


def recall_at_1(preds: Mapping[Hashable, Interval], gts: Mapping[Hashable, Interval],
                threshold: float) -> float:
    """Fraction of ground-truth queries whose prediction reaches IoU >= threshold.

    A query without a prediction counts as a miss.
    """
    if not gts:
        raise ValueError("no ground-truth queries")
    hits = 0
    for key, gt in gts.items():
        pred = preds.get(key)
        if pred is not None and temporal_iou(pred, gt) >= threshold:
            hits += 1
    return hits / len(gts)


@dataclass(frozen=True)
class EvalReport:
    r1_at: dict[float, float]
    avg: float
    n_queries: int

    def to_json(self) -> dict:
        return {
            "r1_at": {f"{t:g}": v for t, v in sorted(self.r1_at.items())},
            "avg": self.avg,
            "n_queries": self.n_queries,
        }

    @classmethod
    def from_json(cls, doc: dict) -> EvalReport:
        return cls({float(t): float(v) for t, v in doc["r1_at"].items()},
                   float(doc["avg"]), int(doc["n_queries"]))


def evaluate(preds: Mapping[Hashable, Interval], gts: Mapping[Hashable, Interval],
             thresholds: Iterable[float] = THRESHOLDS) -> EvalReport:
    ts = sorted(thresholds)
    if not ts:
        raise ValueError("need at least one threshold")
    # IoU per query once, then count against every threshold
    ious = []
    for key, gt in gts.items():
        pred = preds.get(key)
        ious.append(temporal_iou(pred, gt) if pred is not None else -math.inf)
    if not ious:
        raise ValueError("no ground-truth queries")
    r1 = {t: sum(iou >= t for iou in ious) / len(ious) for t in ts}
    return EvalReport(r1, sum(r1.values()) / len(r1), len(ious))


def format_table(rows: Iterable[tuple[str, EvalReport]], label: str = "Model") -> str:
    """Aligned plain-text table in percent: label | R1@t ... | AVG."""
    rows = list(rows)
    ts = sorted(rows[0][1].r1_at) if rows else list(THRESHOLDS)
    header = [label] + [f"R1@{t:g}" for t in ts] + ["AVG"]
    body = [[name] + [f"{100 * rep.r1_at[t]:.2f}" for t in ts] + [f"{100 * rep.avg:.2f}"]
            for name, rep in rows]
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return " | ".join([first] + rest)

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), rule] + [line(r) for r in body]) + "\n"


def format_delimited(rows: Iterable[tuple[str, EvalReport]], sep: str = "\t") -> str:
    rows = list(rows)
    ts = sorted(rows[0][1].r1_at) if rows else list(THRESHOLDS)
    out = [sep.join(["model"] + [f"r1@{t:g}" for t in ts] + ["avg", "n_queries"])]
    for name, rep in rows:
        out.append(sep.join([name] + [repr(rep.r1_at[t]) for t in ts]
                            + [repr(rep.avg), str(rep.n_queries)]))
    return "\n".join(out) + "\n"


# -- predictions file ----------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    video_id: str
    query_id: str
    interval: Interval
    score: float


def write_predictions(path, preds: Iterable[Prediction]) -> None:
    """JSON lines: {video_id, query_id, start_s, end_s, score}."""
    lines = [json.dumps({"video_id": p.video_id, "query_id": p.query_id,
                         "start_s": p.interval.start_s, "end_s": p.interval.end_s,
                         "score": p.score}) for p in preds]
    atomic_write(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))


def read_predictions(path) -> dict[tuple[str, str], Prediction]:
    out: dict[tuple[str, str], Prediction] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                p = Prediction(str(rec["video_id"]), str(rec["query_id"]),
                               Interval(float(rec["start_s"]), float(rec["end_s"])),
                               float(rec.get("score", 0.0)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: record {lineno}: {exc}") from None
            key = (p.video_id, p.query_id)
            if key in out:
                raise ValueError(f"{path}: record {lineno}: duplicate prediction for {key}")
            out[key] = p
    return out


def write_report(path, report: EvalReport) -> None:
    atomic_write(path, (json.dumps(report.to_json(), indent=1) + "\n").encode("utf-8"))
