"""Critic accuracy (ca), De-Pois accuracy (da) and epsilon sweeps.

Every poisoned sample has ground truth ``{-1, y}``: rejecting it and
classifying it correctly both count as a win for the defence.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, AttackMode, attack_dataset
from .data import ImageDataset
from .defense import REJECTED, DefenseBundle
from .errors import ConfigError, DataError

CSV_HEADER = ["access_mode", "attack_mode", "epsilon", "ca", "da", "n_samples", "seed"]
ACCESS_MODES = ("white", "black")
DEFAULT_EPSILONS = tuple(round(0.1 * i, 1) for i in range(10))
MODE_ORDER = list(AttackMode)


def _check(verdicts, labels=None):
    verdicts = np.asarray(verdicts, dtype=np.int64)
    if verdicts.size == 0:
        raise ConfigError("metric undefined on an empty poisoned set")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != verdicts.shape:
            raise ConfigError("one label per verdict required")
    return verdicts, labels


def critic_accuracy(verdicts) -> float:
    """Fraction of samples rejected by the critic."""
    verdicts, _ = _check(verdicts)
    return float(np.count_nonzero(verdicts == REJECTED) / verdicts.size)


def depois_accuracy(verdicts, labels) -> float:
    """Fraction of samples that are rejected or accepted with their true class."""
    verdicts, labels = _check(verdicts, labels)
    hits = (verdicts == REJECTED) | (verdicts == labels)
    return float(np.count_nonzero(hits) / verdicts.size)


def clean_accuracy(verdicts, labels) -> float:
    """Clean-set variant with truth ``{y}``: only accepted-and-correct counts."""
    verdicts, labels = _check(verdicts, labels)
    return float(np.count_nonzero(verdicts == labels) / verdicts.size)


@dataclass(frozen=True)
class SweepRecord:
    access: str
    mode: AttackMode
    epsilon: float
    ca: float
    da: float
    n: int
    seed: int

    def sort_key(self):
        return (ACCESS_MODES.index(self.access), MODE_ORDER.index(self.mode), self.epsilon)


def cell_seed(seed: int, access: str, mode: AttackMode, epsilon: float) -> int:
    """Per-cell seed independent of evaluation order."""
    key = f"{seed}|{access}|{AttackMode(mode).value}|{epsilon:.6f}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def run_sweep(
    bundle: DefenseBundle,
    shadow: DefenseBundle | None,
    eval_set: ImageDataset,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    modes: Sequence[AttackMode] = tuple(AttackMode),
    seed: int = 0,
    access: Sequence[str] = ("white", "black"),
) -> list[SweepRecord]:
    """One record per (access, mode, epsilon).

    White-box samples are crafted on ``bundle``; black-box samples on
    ``shadow``.  Verdicts always come from the original ``bundle``.
    """
    epsilons = list(epsilons)
    if not epsilons:
        raise ConfigError("epsilon grid is empty")
    if any(not 0.0 <= e <= 1.0 for e in epsilons):
        raise ConfigError("every epsilon must lie in [0, 1]")
    for a in access:
        if a not in ACCESS_MODES:
            raise ConfigError(f"unknown access mode {a!r}")
    if "black" in access and shadow is None:
        raise ConfigError("black-box sweep requested without a shadow bundle")
    records = []
    for a in access:
        crafted_on = bundle if a == "white" else shadow
        for mode in modes:
            mode = AttackMode(mode)
            for eps in epsilons:
                adv = attack_dataset(AttackConfig(mode, eps), crafted_on, eval_set, access=a)
                verdicts = bundle.predict(adv.x_p)
                records.append(
                    SweepRecord(
                        a, mode, float(eps),
                        critic_accuracy(verdicts),
                        depois_accuracy(verdicts, adv.labels),
                        len(adv), seed,
                    )
                )
    return sorted(records, key=SweepRecord.sort_key)


# -- CSV -----------------------------------------------------------------------------


def records_to_csv(records: Sequence[SweepRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in sorted(records, key=SweepRecord.sort_key):
        writer.writerow([r.access, r.mode.value, f"{r.epsilon:.6f}", f"{r.ca:.6f}", f"{r.da:.6f}", r.n, r.seed])
    return buf.getvalue()


def write_csv(records: Sequence[SweepRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records))
    return path


def read_csv(path) -> list[SweepRecord]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise DataError(f"sweep CSV not found: {path}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise DataError(f"{path}: unexpected header {header}")
    out = []
    for row in reader:
        a, mode, eps, ca, da, n, seed = row
        out.append(SweepRecord(a, AttackMode(mode), float(eps), float(ca), float(da), int(n), int(seed)))
    return out


# -- summaries -------------------------------------------------------------------------


def lookup(records, access: str, mode: AttackMode, epsilon: float) -> SweepRecord | None:
    for r in records:
        if r.access == access and r.mode == mode and abs(r.epsilon - epsilon) < 1e-9:
            return r
    return None


def nearest_epsilon(records, target: float) -> float:
    grid = sorted({r.epsilon for r in records})
    return min(grid, key=lambda e: (abs(e - target), e))


def overall_table(records, epsilon: float = 0.7) -> list[dict]:
    """Rows of the white/black x classifier-only/composed summary at the grid
    point nearest ``epsilon``."""
    eps = nearest_epsilon(records, epsilon)
    rows = []
    for access in ACCESS_MODES:
        for target, mode in (("Classifier-Only", AttackMode.CLASSIFIER_ONLY), ("Composed", AttackMode.CRITIC_THEN_CLASSIFIER)):
            r = lookup(records, access, mode, eps)
            if r is None:
                continue
            rows.append({"access_mode": access, "target": target, "epsilon": eps, "ca": r.ca, "da": r.da})
    return rows


def table_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["access_mode", "target", "epsilon", "ca", "da"])
    for row in rows:
        writer.writerow([row["access_mode"], row["target"], f"{row['epsilon']:.6f}", f"{row['ca']:.6f}", f"{row['da']:.6f}"])
    return buf.getvalue()


def table_to_markdown(rows: Sequence[dict]) -> str:
    lines = ["| Access | Target | eps | ca | da |", "|---|---|---|---|---|"]
    for row in rows:
        lines.append(f"| {row['access_mode']} | {row['target']} | {row['epsilon']:.1f} | {row['ca']:.4f} | {row['da']:.4f} |")
    return "\n".join(lines) + "\n"
