"""Evaluation metrics for window-level authentication decisions.

"Unauthorized" is the positive (detection) class. FAR is the fraction
of unauthorized windows accepted; FRR the fraction of authorized
windows rejected. Metrics whose class is absent are reported as None
and named in ``undefined`` rather than silently zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import TrainingError
from .decision import AuthDecision, Verdict


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    far: float | None
    frr: float | None
    mean_time_to_detection: float | None
    undefined: tuple[str, ...] = ()
    counts: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "far": self.far,
            "frr": self.frr,
            "mean_time_to_detection": self.mean_time_to_detection,
            "undefined": list(self.undefined),
            "counts": dict(self.counts),
        }


def evaluate(
    decisions: list[AuthDecision],
    truths: list[Verdict],
    session_ids: list | None = None,
) -> Metrics:
    """Score decisions against ground truth.

    Time-to-detection is measured per session from the session's first
    window to its first correct unauthorized verdict; sessions default
    to one shared session when ids are not given.
    """
    if not decisions:
        raise TrainingError("no decisions to evaluate")
    if len(decisions) != len(truths):
        raise TrainingError("decisions and truths differ in length")
    truths = [Verdict(t) for t in truths]
    if session_ids is None:
        session_ids = [0] * len(decisions)

    tp = fp = tn = fn = 0
    for d, t in zip(decisions, truths):
        if t is Verdict.UNAUTHORIZED:
            if d.verdict is Verdict.UNAUTHORIZED:
                tp += 1
            else:
                fn += 1
        else:
            if d.verdict is Verdict.UNAUTHORIZED:
                fp += 1
            else:
                tn += 1

    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return None
        return num / den

    accuracy = (tp + tn) / len(decisions)
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    if precision is None or recall is None or precision + recall == 0:
        if "f1" not in undefined:
            undefined.append("f1")
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    far = ratio(fn, tp + fn, "far")
    frr = ratio(fp, fp + tn, "frr")

    # time-to-detection per session containing unauthorized windows
    sessions: dict = {}
    for d, t, s in zip(decisions, truths, session_ids):
        sessions.setdefault(s, []).append((d, t))
    ttds = []
    theft_sessions = 0
    for entries in sessions.values():
        entries.sort(key=lambda p: p[0].window_start)
        start = entries[0][0].window_start
        if not any(t is Verdict.UNAUTHORIZED for _, t in entries):
            continue
        theft_sessions += 1
        for d, t in entries:
            if t is Verdict.UNAUTHORIZED and d.verdict is Verdict.UNAUTHORIZED:
                ttds.append(d.window_start - start)
                break
    if ttds:
        mean_ttd = sum(ttds) / len(ttds)
    else:
        undefined.append("mean_time_to_detection")
        mean_ttd = None

    counts = {
        "tp": tp, "fp": fp, "tn": tn, "fn": fn,
        "theft_sessions": theft_sessions, "detected_sessions": len(ttds),
    }
    return Metrics(accuracy, precision, recall, f1, far, frr, mean_ttd,
                   tuple(undefined), counts)
