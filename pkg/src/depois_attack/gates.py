"""Directional checks on a sweep, used by ``attack-eval --strict``."""

from __future__ import annotations

from dataclasses import dataclass

from .attacks import AttackMode
from .metrics import SweepRecord

CLEAN_DA_MIN = 0.90
COMPOSED_MARGIN = 0.05
COMPOSED_DA_MAX = 0.6
COMPOSED_EPS_MAX = 0.7
BLACK_DROP_MIN = 0.30


@dataclass(frozen=True)
class Gate:
    name: str
    passed: bool
    detail: str


def _series(records, access, mode):
    return {r.epsilon: r for r in records if r.access == access and r.mode == mode}


def evaluate_gates(records: list[SweepRecord], clean_set_accuracy: float | None = None) -> list[Gate]:
    """Directional checks; ``clean_set_accuracy`` (accepted-and-correct rate on
    the unperturbed eval set) adds the clean-baseline gate when given."""
    gates = []
    if clean_set_accuracy is not None:
        gates.append(
            Gate(
                "clean_set_accuracy",
                clean_set_accuracy >= CLEAN_DA_MIN,
                f"accepted-and-correct on clean eval: {clean_set_accuracy:.4f} (need >= {CLEAN_DA_MIN})",
            )
        )
    white_base = _series(records, "white", AttackMode.CLASSIFIER_ONLY)
    white_comp = _series(records, "white", AttackMode.CRITIC_THEN_CLASSIFIER)

    zero = [r for r in records if r.epsilon == 0.0 and r.access == "white"]
    if zero:
        da0 = min(r.da for r in zero)
        gates.append(Gate("clean_da", da0 >= CLEAN_DA_MIN, f"sweep da at eps=0 (rejections count as correct): {da0:.4f} (need >= {CLEAN_DA_MIN})"))

    shared = sorted(set(white_base) & set(white_comp))
    if shared:
        gaps = {e: white_base[e].da - white_comp[e].da for e in shared}
        best = max(gaps, key=gaps.get)
        gates.append(
            Gate(
                "composed_beats_baseline",
                gaps[best] >= COMPOSED_MARGIN,
                f"max(da[classifier_only] - da[critic_then_classifier]) = {gaps[best]:.4f} at eps={best:g}",
            )
        )
    low = [r for e, r in white_comp.items() if e <= COMPOSED_EPS_MAX]
    if low:
        best = min(low, key=lambda r: r.da)
        gates.append(
            Gate(
                "composed_da_low",
                best.da <= COMPOSED_DA_MAX,
                f"min white composed da over eps <= {COMPOSED_EPS_MAX}: {best.da:.4f} at eps={best.epsilon:g}",
            )
        )

    black = [r for r in records if r.access == "black"]
    if black:
        base = [r.da for r in black if r.epsilon == 0.0]
        if base:
            lowest = min(black, key=lambda r: r.da)
            drop = max(base) - lowest.da
            gates.append(
                Gate(
                    "black_box_transfer",
                    drop >= BLACK_DROP_MIN,
                    f"da drop {drop:.4f} (eps=0 {max(base):.4f} -> {lowest.da:.4f}, "
                    f"{lowest.mode.value} at eps={lowest.epsilon:g})",
                )
            )
    return gates
