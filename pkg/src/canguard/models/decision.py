"""Authentication decisions and verdict smoothing."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Verdict(str, Enum):
    AUTHORIZED = "authorized"
    UNAUTHORIZED = "unauthorized"


@dataclass(frozen=True, slots=True)
class AuthDecision:
    verdict: Verdict
    score: float
    threshold: float
    window_start: float
    predicted_label: str | None = None


def rolling_majority(verdicts: list[Verdict], n: int = 5) -> list[Verdict | None]:
    """Majority over the last up-to-n verdicts at each position; None on a tie."""
    if n < 1:
        raise ValueError("smoothing window must be >= 1")
    out: list[Verdict | None] = []
    for i in range(len(verdicts)):
        window = verdicts[max(0, i - n + 1): i + 1]
        good = sum(1 for v in window if v is Verdict.AUTHORIZED)
        bad = len(window) - good
        if good > bad:
            out.append(Verdict.AUTHORIZED)
        elif bad > good:
            out.append(Verdict.UNAUTHORIZED)
        else:
            out.append(None)
    return out
