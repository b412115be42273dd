"""Black-box stealing of the classifier and critic by knowledge distillation.

The attacker only talks to a :class:`TeacherOracle`, which exposes the
posterior vector and the critic score for submitted images and nothing
else.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .data import NUM_CLASSES, ImageDataset
from .defense import DefenseBundle, minibatches, posterior
from .errors import ConfigError, NonFiniteError, TrainingError
from .nn import KDComposite, Network
from .tensor import Tensor

log = logging.getLogger(__name__)


class TeacherOracle:
    """Query-only access to a deployed model pair.

    Only two closures are held; there is no attribute through which the
    teacher parameters could be reached.  ``queries`` counts images
    submitted for training purposes (evaluation calls pass ``count=False``).
    """

    __slots__ = ("_posterior", "_score", "queries", "budget")

    def __init__(
        self,
        posterior_fn: Callable[[np.ndarray], np.ndarray],
        score_fn: Callable[[np.ndarray], np.ndarray],
        budget: int | None = None,
    ):
        self._posterior = posterior_fn
        self._score = score_fn
        self.queries = 0
        self.budget = budget

    @classmethod
    def from_bundle(cls, bundle: DefenseBundle, budget: int | None = None) -> TeacherOracle:
        classifier, scorer = bundle.classifier, bundle.scorer
        return cls(lambda x: posterior(classifier, x), lambda x: scorer(x), budget)

    @property
    def remaining(self) -> float:
        return np.inf if self.budget is None else self.budget - self.queries

    def _charge(self, n: int, count: bool) -> None:
        if count:
            self.queries += n

    def posteriors(self, x, count: bool = True) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._charge(x.shape[0], count)
        return np.array(self._posterior(x), dtype=np.float64)

    def scores(self, x, count: bool = True) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._charge(x.shape[0], count)
        return np.array(self._score(x), dtype=np.float64).reshape(-1)


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    temperature: float = 4.0
    classifier_hidden: tuple = (128,)
    critic_hidden: tuple = (256, 128)
    activation: str = "relu"
    critic_activation: str = "leaky_relu"
    epochs: int = 30
    critic_epochs: int = 30
    lr: float = 1e-3
    batch: int = 64
    query_budget: int | None = None

    def __post_init__(self):
        KDComposite(self.alpha, self.temperature)
        if self.lr <= 0 or self.batch <= 0 or self.epochs < 0 or self.critic_epochs < 0:
            raise ConfigError("distillation lr/batch must be positive and epochs non-negative")


def _budgeted_batches(oracle: TeacherOracle, n: int, batch: int, rng):
    """Minibatch indices, truncated so the oracle budget is never exceeded."""
    for idx in minibatches(n, batch, rng):
        left = oracle.remaining
        if left <= 0:
            return
        if idx.size > left:
            yield idx[: int(left)]
            return
        yield idx


def distill_classifier(
    oracle: TeacherOracle,
    cfg: DistillConfig,
    transfer: ImageDataset,
    seed: int = 0,
    holdout: ImageDataset | None = None,
    init: Network | None = None,
):
    """Student classifier trained on ``alpha * CE + KL(p_t^T || p_s^T)``.

    Returns ``(student, report)``; the report carries the loss curve,
    the number of training queries, whether the budget truncated training
    and, when ``holdout`` is given, teacher/student top-1 agreement.
    """
    loss = KDComposite(cfg.alpha, cfg.temperature)
    if init is not None:
        student = init.clone()
    else:
        student = Network.build([transfer.dim, *cfg.classifier_hidden, NUM_CLASSES], cfg.activation, seed=seed)
    opt = nn.Adam(cfg.lr)
    rng = np.random.default_rng(seed + 1)
    curve, start_queries, truncated = [], oracle.queries, False
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in _budgeted_batches(oracle, len(transfer), cfg.batch, rng):
            x = transfer.images[idx]
            p_t = oracle.posteriors(x)
            try:
                value, grads, _ = nn.backward(student, x, transfer.labels[idx], loss, teacher=p_t)
            except NonFiniteError as exc:
                raise TrainingError(f"classifier distillation diverged in epoch {epoch}") from exc
            nn.optimizer_step(student, grads, opt)
            total += value * idx.size
            seen += idx.size
        if seen:
            curve.append(total / seen)
        if seen < len(transfer):
            truncated = True
            log.warning("query budget exhausted after %d queries in epoch %d", oracle.queries, epoch)
            break
    report = {
        "alpha": cfg.alpha,
        "temperature": cfg.temperature,
        "queries": oracle.queries - start_queries,
        "truncated": truncated,
        "loss_curve": curve,
    }
    if holdout is not None:
        teacher_top = np.argmax(oracle.posteriors(holdout.images, count=False), axis=1)
        student_top = np.argmax(nn.predict(student, holdout.images), axis=1)
        report["agreement"] = float(np.mean(teacher_top == student_top))
        report["student_accuracy"] = float(np.mean(student_top == holdout.labels))
    return student, report


def _fold_output_scale(net: Network, scale: float, shift: float) -> None:
    """Rewrite the last layer so ``net(x)`` becomes ``scale * net(x) + shift``."""
    last = len(net.layers) - 1
    w, b = net.params[f"layer{last}.weight"], net.params[f"layer{last}.bias"]
    w.data = w.data * scale
    b.data = b.data * scale + shift


def critic_features(student_classifier: Network, images: np.ndarray) -> np.ndarray:
    return np.concatenate([images, posterior(student_classifier, images)], axis=1)


def distill_critic(
    oracle: TeacherOracle,
    cfg: DistillConfig,
    transfer: ImageDataset,
    student_classifier: Network,
    seed: int = 0,
    holdout: ImageDataset | None = None,
    init: Network | None = None,
):
    """Student critic regressed (MSE) onto the teacher's scalar scores.

    The student scores ``[x, softmax(student_classifier(x))]`` so that it
    plugs into a :class:`~depois_attack.defense.CriticScorer` next to the
    student classifier.  Targets are standardised for training and the
    scale is folded back into the output layer afterwards.
    """
    dim = transfer.dim + student_classifier.out_dim
    if init is not None:
        student = init.clone()
    else:
        student = Network.build([dim, *cfg.critic_hidden, 1], cfg.critic_activation, seed=seed)
        # fresh head predicts the standardised mean (0) until trained
        last = len(student.layers) - 1
        for name in (f"layer{last}.weight", f"layer{last}.bias"):
            student.params[name].data = np.zeros_like(student.params[name].data)
    feats = critic_features(student_classifier, transfer.images)
    rng = np.random.default_rng(seed + 1)
    opt = nn.Adam(cfg.lr)
    start_queries, truncated = oracle.queries, False

    targets = np.full(len(transfer), np.nan)
    curve = []
    shift = scale = None
    for epoch in range(cfg.critic_epochs):
        seen, total = 0, 0.0
        for idx in _budgeted_batches(oracle, len(transfer), cfg.batch, rng):
            targets[idx] = oracle.scores(transfer.images[idx])
            if shift is None:
                # standardise with the first batch's statistics; fixed afterwards
                shift = float(targets[idx].mean())
                spread = float(targets[idx].std())
                scale = spread if spread > 0 else 1.0
                if init is not None:
                    # a supplied init lives in score space; move it to standardised space
                    _fold_output_scale(student, 1.0 / scale, -shift / scale)
            goal = (targets[idx] - shift) / scale
            student.zero_grad()
            pred = student(Tensor(feats[idx])).reshape(-1)
            err = pred - goal
            mse = (err * err).mean()
            try:
                mse.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"critic distillation diverged in epoch {epoch}") from exc
            grads = student.grads()
            student.zero_grad()
            nn.optimizer_step(student, grads, opt)
            total += mse.item() * idx.size * scale * scale
            seen += idx.size
        if seen:
            curve.append(total / seen)
        if seen < len(transfer):
            truncated = True
            log.warning("query budget exhausted during critic distillation (epoch %d)", epoch)
            break
    if shift is not None:
        _fold_output_scale(student, scale, shift)

    report = {
        "queries": oracle.queries - start_queries,
        "truncated": truncated,
        "mse_curve": curve,
    }
    if holdout is not None:
        teacher = oracle.scores(holdout.images, count=False)
        pred = nn.predict(student, critic_features(student_classifier, holdout.images))[:, 0]
        report["pearson"] = pearson(teacher, pred)
        report["rank_agreement"] = spearman(teacher, pred)
    return student, report


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    rho = spearmanr(a, b).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def build_shadow_bundle(
    student_critic: Network,
    student_classifier: Network,
    calibration: ImageDataset,
    q: float = 0.05,
) -> DefenseBundle:
    """Shadow pipeline whose boundary is calibrated on attacker-held clean data."""
    return DefenseBundle.calibrate(
        student_classifier, student_critic, calibration, q, meta={"shadow": True}
    )
