"""Gradient-sign attacks on the defended pipeline.

Four modes compose FGSM steps on the critic score (ascent, so the sample
looks clean) and on the classifier loss (ascent, so it is misclassified).
The same code runs against the original networks (white-box) or distilled
students (black-box): anything with ``scorer`` and ``classifier``
attributes is accepted.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import nn
from .data import ImageDataset, write_idx
from .errors import ConfigError, DataError, ShapeError
from .nn import Network

POISON = -1


class AttackMode(str, enum.Enum):
    CRITIC_ONLY = "critic_only"
    CLASSIFIER_ONLY = "classifier_only"
    CRITIC_THEN_CLASSIFIER = "critic_then_classifier"
    CLASSIFIER_THEN_CRITIC = "classifier_then_critic"

    @property
    def steps(self) -> tuple[str, ...]:
        return {
            AttackMode.CRITIC_ONLY: ("critic",),
            AttackMode.CLASSIFIER_ONLY: ("classifier",),
            AttackMode.CRITIC_THEN_CLASSIFIER: ("critic", "classifier"),
            AttackMode.CLASSIFIER_THEN_CRITIC: ("classifier", "critic"),
        }[self]


BASELINE = AttackMode.CLASSIFIER_ONLY
COMPOSED = AttackMode.CRITIC_THEN_CLASSIFIER


@dataclass(frozen=True)
class AttackConfig:
    mode: AttackMode
    epsilon: float
    clamp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", AttackMode(self.mode))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def _project(x_new: np.ndarray, x: np.ndarray, eps: float, clamp: bool) -> np.ndarray:
    """Clamp to [0, 1] and make ``|x_new - x| <= eps`` hold in float64.

    ``(x + eps) - x`` can exceed ``eps`` by one ulp; offending entries are
    stepped toward ``x`` until the computed difference is within budget.
    """
    if clamp:
        x_new = np.clip(x_new, 0.0, 1.0)
    for _ in range(8):
        over = np.abs(x_new - x) > eps
        if not over.any():
            break
        x_new = np.where(over, np.nextafter(x_new, x), x_new)
    return x_new


def fgsm_classifier(classifier: Network, x, y, eps: float, clamp: bool = True) -> np.ndarray:
    """``x + eps * sign(grad_x CE(h(x), y))``; zero-gradient pixels stay put."""
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    _, _, g = nn.backward(classifier, x, y, nn.CrossEntropy())
    return _project(x + eps * np.sign(g), x, eps, clamp)


def fgsm_critic(scorer, x, eps: float, clamp: bool = True) -> np.ndarray:
    """``x + eps * sign(grad_x score(x))``: push the critic score up."""
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    if isinstance(scorer, Network):
        _, _, g = nn.backward(scorer, x, loss=nn.ScoreAscent())
    else:
        g = scorer.input_grad(x)
    return _project(x + eps * np.sign(g), x, eps, clamp)


@dataclass(frozen=True)
class AdversarialSample:
    x_p: np.ndarray
    y: int
    mode: AttackMode
    epsilon: float
    source_index: int
    access: str = "white"

    @property
    def truth(self) -> frozenset:
        return frozenset({POISON, self.y})


@dataclass(frozen=True, eq=False)
class AdversarialSet:
    """Batch of poisoned samples in source order; ``step_linf[i, k]`` is the
    L-inf size of the k-th FGSM step on sample i."""

    x_p: np.ndarray
    labels: np.ndarray
    source_index: np.ndarray
    mode: AttackMode
    epsilon: float
    access: str
    step_linf: np.ndarray
    image_shape: tuple = ()

    def __len__(self) -> int:
        return self.labels.size

    def __iter__(self) -> Iterator[AdversarialSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> AdversarialSample:
        return AdversarialSample(
            self.x_p[i], int(self.labels[i]), self.mode, self.epsilon, int(self.source_index[i]), self.access
        )

    def as_dataset(self) -> ImageDataset:
        return ImageDataset(self.x_p, self.labels, f"adv/{self.access}/{self.mode.value}/{self.epsilon:g}", self.image_shape)


def compose_attack(cfg: AttackConfig, scorer, classifier: Network, x, y):
    """Apply the mode's FGSM steps in order, clamping after each.

    Returns ``(x_p, step_linf)`` for a single vector or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    cur = np.atleast_2d(x)
    y = np.atleast_1d(y)
    if y.shape[0] != cur.shape[0]:
        raise ShapeError("one label per sample required")
    norms = []
    for step in cfg.mode.steps:
        if step == "critic":
            nxt = fgsm_critic(scorer, cur, cfg.epsilon, cfg.clamp)
        else:
            nxt = fgsm_classifier(classifier, cur, y, cfg.epsilon, cfg.clamp)
        norms.append(np.max(np.abs(nxt - cur), axis=1))
        cur = nxt
    step_linf = np.stack(norms, axis=1)
    return (cur[0], step_linf[0]) if single else (cur, step_linf)


def attack_dataset(
    cfg: AttackConfig,
    models,
    ds: ImageDataset,
    access: str = "white",
    batch: int = 500,
) -> AdversarialSet:
    """Poison every sample of ``ds`` with ``models.scorer``/``models.classifier``.

    Rows are independent, so batching does not change results.
    """
    if len(ds) == 0:
        raise ConfigError("cannot attack an empty dataset")
    outs, norms = [], []
    for start in range(0, len(ds), batch):
        sl = slice(start, start + batch)
        x_p, n = compose_attack(cfg, models.scorer, models.classifier, ds.images[sl], ds.labels[sl])
        outs.append(x_p)
        norms.append(n)
    return AdversarialSet(
        np.vstack(outs),
        ds.labels.copy(),
        np.arange(len(ds)),
        cfg.mode,
        cfg.epsilon,
        access,
        np.vstack(norms),
        ds.image_shape,
    )


def save_adversarial(adv: AdversarialSet, images_path) -> Path:
    """IDX image file plus a ``.truth.json`` sidecar (pixels are quantised to bytes)."""
    images_path = Path(images_path)
    write_idx(adv.as_dataset(), images_path)
    sidecar = images_path.with_suffix(".truth.json")
    rows = [
        {
            "source_index": int(i),
            "y": int(y),
            "mode": adv.mode.value,
            "epsilon": adv.epsilon,
            "access_mode": adv.access,
        }
        for i, y in zip(adv.source_index, adv.labels)
    ]
    sidecar.write_text(json.dumps(rows, indent=1) + "\n")
    return sidecar


def load_truth(sidecar) -> list[dict]:
    try:
        return json.loads(Path(sidecar).read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read truth sidecar {sidecar}: {exc}") from exc
