"""The defended pipeline: target classifier, WGAN-GP critic over
(image, posterior) vectors, quantile detection boundary and combined
inference.

The critic never sees a bare image.  :class:`CriticScorer` appends the
classifier's own posterior to the image and scores the joint vector, both
during training (real samples) and at inference.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import nn
from . import tensor as T
from .data import NUM_CLASSES, ImageDataset, concat_datasets
from .errors import ConfigError, DataError, NonFiniteError, TrainingError
from .nn import Network
from .tensor import Tensor

log = logging.getLogger(__name__)

REJECTED = -1
GP_FD_STEP = 1e-4


class Verdict(NamedTuple):
    """Outcome for one sample: ``code == -1`` means rejected, else the class."""

    code: int

    @property
    def rejected(self) -> bool:
        return self.code == REJECTED

    @property
    def label(self) -> int | None:
        return None if self.rejected else self.code


# -- target classifier ---------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple = (128,)
    activation: str = "relu"
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 64


def minibatches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch):
        yield perm[start : start + batch]


def accuracy(net: Network, ds: ImageDataset) -> float:
    return float(np.mean(np.argmax(nn.predict(net, ds.images), axis=1) == ds.labels))


def fit_supervised(net: Network, ds: ImageDataset, epochs: int, lr: float, batch: int, seed: int):
    """Adam on mean cross-entropy.  Returns the per-epoch mean loss curve."""
    rng = np.random.default_rng(seed)
    opt = nn.Adam(lr)
    curve = []
    step = 0
    for epoch in range(epochs):
        total = 0.0
        for idx in minibatches(len(ds), batch, rng):
            step += 1
            try:
                value, grads, _ = nn.backward(net, ds.images[idx], ds.labels[idx], nn.CrossEntropy())
            except NonFiniteError as exc:
                raise TrainingError(f"classifier training diverged at epoch {epoch}, step {step}") from exc
            nn.optimizer_step(net, grads, opt)
            total += value * idx.size
        curve.append(total / len(ds))
    return curve


def train_classifier(
    train: ImageDataset,
    cfg: ClassifierConfig = ClassifierConfig(),
    seed: int = 0,
    test: ImageDataset | None = None,
):
    """Train the 10-class target model; returns ``(network, report)``."""
    if len(train) == 0:
        raise ConfigError("cannot train a classifier on an empty dataset")
    dims = [train.dim, *cfg.hidden, NUM_CLASSES]
    net = Network.build(dims, cfg.activation, seed=seed)
    curve = fit_supervised(net, train, cfg.epochs, cfg.lr, cfg.batch, seed + 1)
    report = {"loss_curve": curve, "train_accuracy": accuracy(net, train)}
    if test is not None:
        report["test_accuracy"] = accuracy(net, test)
    return net, report


def posterior(classifier: Network, x) -> np.ndarray:
    return T.softmax(Tensor(nn.predict(classifier, x))).data


# -- critic scoring ---------------------------------------------------------------------


class CriticScorer:
    """Score of ``critic([x, softmax(classifier(x))])``.

    Works identically for original and student networks, and gradients with
    respect to ``x`` flow through both the image and the posterior.
    """

    def __init__(self, critic: Network, classifier: Network):
        if critic.in_dim != classifier.in_dim + classifier.out_dim:
            raise ConfigError(
                f"critic input {critic.in_dim} != image dim {classifier.in_dim} "
                f"+ classes {classifier.out_dim}"
            )
        self.critic = critic
        self.classifier = classifier

    def graph(self, x: Tensor) -> Tensor:
        probs = T.softmax(nn.forward(self.classifier, x))
        return nn.forward(self.critic, T.concat([x, probs], axis=-1))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        joint = np.concatenate([x, posterior(self.classifier, x)], axis=-1)
        return nn.predict(self.critic, joint)[..., 0]

    def input_grad(self, x) -> np.ndarray:
        xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        self.graph(xt).sum().backward()
        self.critic.zero_grad()
        self.classifier.zero_grad()
        return xt.grad


# -- gradient penalty ---------------------------------------------------------------------


def _as_score_fn(critic) -> Callable[[Tensor], Tensor]:
    if isinstance(critic, Network):
        return lambda x: nn.forward(critic, x)
    return critic


def critic_input_grads(critic, x: np.ndarray) -> np.ndarray:
    """Row-wise ``grad_x D(x)`` for a batch (rows are independent)."""
    fn = _as_score_fn(critic)
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    fn(xt).sum().backward()
    if isinstance(critic, Network):
        critic.zero_grad()
    return xt.grad


def interpolate(x_real: np.ndarray, x_fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x_real = np.atleast_2d(x_real)
    x_fake = np.atleast_2d(x_fake)
    if x_real.shape != x_fake.shape:
        raise ConfigError(f"real/fake shapes differ: {x_real.shape} vs {x_fake.shape}")
    u = rng.uniform(0.0, 1.0, size=(x_real.shape[0], 1))
    return u * x_real + (1.0 - u) * x_fake


def gradient_penalty_fd(critic, x_real, x_fake, seed) -> float:
    """Mean ``(||grad_x D(x_hat)|| - 1)^2`` at random interpolates."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x_hat = interpolate(x_real, x_fake, rng)
    g = critic_input_grads(critic, x_hat)
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def gradient_penalty_with_grads(
    critic: Network,
    x_hat: np.ndarray,
    score_fn: Callable[[Tensor], Tensor] | None = None,
    step: float = GP_FD_STEP,
):
    """Penalty value and its parameter gradient without second-order autodiff.

    With ``g = grad_x D`` and ``v = g / ||g||`` held fixed,
    ``d||g||/dtheta = d/dtheta <grad_x D, v>``, and the inner directional
    derivative is replaced by the central difference
    ``(D(x + step v) - D(x - step v)) / (2 step)``; differentiating that
    with respect to the parameters needs only first-order backprop.
    """
    fn = score_fn or _as_score_fn(critic)
    g = critic_input_grads(fn, x_hat)
    critic.zero_grad()
    norms = np.linalg.norm(g, axis=1)
    penalty = float(np.mean((norms - 1.0) ** 2))
    safe = norms > 0
    v = np.zeros_like(g)
    v[safe] = g[safe] / norms[safe, None]
    # (||g|| - 1)^2 is not differentiable in direction at g = 0; such rows contribute nothing
    w = np.where(safe, 2.0 * (norms - 1.0), 0.0) / (x_hat.shape[0] * 2.0 * step)
    plus = fn(Tensor(x_hat + step * v)).reshape(-1)
    minus = fn(Tensor(x_hat - step * v)).reshape(-1)
    ((plus - minus) * w).sum().backward()
    grads = critic.grads()
    critic.zero_grad()
    return penalty, grads


# -- WGAN training ----------------------------------------------------------------------------


@dataclass(frozen=True)
class WganConfig:
    latent_dim: int = 32
    n_critic: int = 5
    gp_weight: float = 10.0
    lipschitz_mode: str = "finite_diff_gp"
    clip: float = 0.01
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-4
    betas: tuple = (0.5, 0.9)
    critic_hidden: tuple = (256, 128)
    generator_hidden: tuple = (128, 256)

    def __post_init__(self):
        if self.lipschitz_mode not in ("finite_diff_gp", "weight_clip"):
            raise ConfigError(f"unknown lipschitz_mode {self.lipschitz_mode!r}")
        for name in ("latent_dim", "n_critic", "batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0 or self.gp_weight < 0:
            raise ConfigError("lr must be positive and gp_weight non-negative")
        if self.lipschitz_mode == "weight_clip" and self.clip <= 0:
            raise ConfigError("weight_clip requires clip > 0")


def _clip_weights(net: Network, c: float) -> None:
    for p in net.params.values():
        np.clip(p.data, -c, c, out=p.data)


def wgan_loop(
    real: np.ndarray,
    generator: Network,
    critic: Network,
    cfg: WganConfig,
    rng: np.random.Generator,
    cond: np.ndarray | None = None,
    on_critic_step: Callable[[Network], None] | None = None,
) -> dict:
    """Alternate ``n_critic`` critic updates with one generator update.

    ``cond`` (optional, one row per real sample) is appended to both the
    generator's latent input and the critic's input; the penalty is taken
    with respect to the unconditioned part only.
    """
    opt_c = nn.Adam(cfg.lr, *cfg.betas)
    opt_g = nn.Adam(cfg.lr, *cfg.betas)
    n = real.shape[0]
    history = {"critic_loss": [], "generator_loss": [], "penalty": []}

    def critic_fn(c_batch):
        if c_batch is None:
            return lambda v: nn.forward(critic, v)
        return lambda v: nn.forward(critic, T.concat([v, Tensor(c_batch)], axis=1))

    def gen_input(z, c_batch):
        return z if c_batch is None else np.concatenate([z, c_batch], axis=1)

    step = 0
    for epoch in range(cfg.epochs):
        for idx in minibatches(n, cfg.batch, rng):
            step += 1
            c_batch = None if cond is None else cond[idx]
            z = rng.standard_normal((idx.size, cfg.latent_dim))
            fake = nn.predict(generator, gen_input(z, c_batch))
            score = critic_fn(c_batch)
            try:
                critic.zero_grad()
                loss = score(Tensor(fake)).mean() - score(Tensor(real[idx])).mean()
                loss.backward()
                grads = critic.grads()
                critic.zero_grad()
                penalty = 0.0
                if cfg.lipschitz_mode == "finite_diff_gp" and cfg.gp_weight > 0:
                    x_hat = interpolate(real[idx], fake, rng)
                    penalty, gp_grads = gradient_penalty_with_grads(critic, x_hat, score)
                    for k in grads:
                        grads[k] += cfg.gp_weight * gp_grads[k]
                nn.optimizer_step(critic, grads, opt_c)
            except NonFiniteError as exc:
                raise TrainingError(f"critic training diverged at epoch {epoch}, step {step}") from exc
            if cfg.lipschitz_mode == "weight_clip":
                _clip_weights(critic, cfg.clip)
            if on_critic_step is not None:
                on_critic_step(critic)
            history["critic_loss"].append(loss.item() + cfg.gp_weight * penalty)
            history["penalty"].append(penalty)

            if step % cfg.n_critic:
                continue
            z = rng.standard_normal((idx.size, cfg.latent_dim))
            try:
                generator.zero_grad()
                g_loss = -score(nn.forward(generator, gen_input(z, c_batch))).mean()
                g_loss.backward()
                g_grads = generator.grads()
                generator.zero_grad()
                critic.zero_grad()
                nn.optimizer_step(generator, g_grads, opt_g)
            except NonFiniteError as exc:
                raise TrainingError(f"generator training diverged at epoch {epoch}, step {step}") from exc
            history["generator_loss"].append(g_loss.item())
    return history


def joint_vectors(classifier: Network, images: np.ndarray) -> np.ndarray:
    return np.concatenate([images, posterior(classifier, images)], axis=1)


def uniform_noise_images(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(n, d))


def train_wgan_critic(
    s_aug: ImageDataset,
    classifier: Network,
    cfg: WganConfig = WganConfig(),
    seed: int = 0,
    holdout: ImageDataset | None = None,
    strict: bool = False,
    on_critic_step: Callable[[Network], None] | None = None,
):
    """Fit the mimic generator and critic over (image, posterior) vectors.

    Returns ``(generator, critic, report)``.  The report's ``separation``
    is mean critic score on clean ``holdout`` images minus mean score on
    uniform-noise images; a non-positive value warns, or raises
    :class:`TrainingError` when ``strict``.
    """
    if len(s_aug) == 0:
        raise ConfigError("S_aug is empty")
    joint_dim = s_aug.dim + classifier.out_dim
    generator = Network.build(
        [cfg.latent_dim, *cfg.generator_hidden, joint_dim],
        ["relu"] * len(cfg.generator_hidden) + ["sigmoid"],
        seed=seed,
    )
    critic = Network.build([joint_dim, *cfg.critic_hidden, 1], "leaky_relu", seed=seed + 1)
    real = joint_vectors(classifier, s_aug.images)
    rng = np.random.default_rng(seed + 2)
    history = wgan_loop(real, generator, critic, cfg, rng, on_critic_step=on_critic_step)

    holdout = holdout if holdout is not None else s_aug
    scorer = CriticScorer(critic, classifier)
    clean = scorer(holdout.images)
    noise = scorer(uniform_noise_images(len(holdout), holdout.dim, np.random.default_rng(seed + 3)))
    separation = float(clean.mean() - noise.mean())
    report = {
        "separation": separation,
        "clean_score_mean": float(clean.mean()),
        "noise_score_mean": float(noise.mean()),
        "steps": len(history["critic_loss"]),
        "final_critic_loss": history["critic_loss"][-1] if history["critic_loss"] else None,
        "lipschitz_mode": cfg.lipschitz_mode,
    }
    if cfg.epochs > 0 and separation <= 0:
        msg = f"critic fails separation check: clean - noise mean score = {separation:.4f}"
        if strict:
            raise TrainingError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return generator, critic, report


# -- synthetic augmentation ---------------------------------------------------------------------


def augment_synthetic(
    s_c: ImageDataset,
    per_class: int,
    cfg: WganConfig = WganConfig(),
    seed: int = 0,
) -> ImageDataset:
    """Return ``S_c`` plus ``per_class`` generated images per class.

    The generator is a label-conditioned WGAN-GP generator trained on
    ``S_c`` alone; its samples carry ``generated=True``.
    """
    if per_class < 0:
        raise ConfigError("per_class must be non-negative")
    missing = np.flatnonzero(s_c.class_counts() == 0)
    if missing.size:
        raise ConfigError(f"trusted set has no samples of class(es) {missing.tolist()}")
    if per_class == 0:
        return s_c
    cond = nn.one_hot(s_c.labels, NUM_CLASSES)
    generator = Network.build(
        [cfg.latent_dim + NUM_CLASSES, *cfg.generator_hidden, s_c.dim],
        ["relu"] * len(cfg.generator_hidden) + ["sigmoid"],
        seed=seed,
    )
    critic = Network.build([s_c.dim + NUM_CLASSES, *cfg.critic_hidden, 1], "leaky_relu", seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    wgan_loop(s_c.images, generator, critic, cfg, rng, cond=cond)

    labels = np.repeat(np.arange(NUM_CLASSES), per_class)
    z = rng.standard_normal((labels.size, cfg.latent_dim))
    images = nn.predict(generator, np.concatenate([z, nn.one_hot(labels)], axis=1))
    generated = ImageDataset(
        np.clip(images, 0.0, 1.0), labels, "generated", s_c.image_shape, np.ones(labels.size, bool)
    )
    return concat_datasets(s_c, generated, f"{s_c.name}+aug")


# -- boundary and inference ---------------------------------------------------------------------


MIN_CALIBRATION = 20


def calibrate_boundary(critic, s_c, q: float = 0.05) -> float:
    """Empirical ``q``-quantile (linear interpolation) of trusted-set scores.

    ``critic`` is a :class:`CriticScorer` (or any callable on images) and
    ``s_c`` a dataset; alternatively pass ``critic=None`` and raw scores.
    """
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile q must lie in (0, 1), got {q}")
    scores = np.asarray(s_c if critic is None else critic(s_c.images), dtype=np.float64)
    if scores.size < MIN_CALIBRATION:
        raise ConfigError(f"calibration needs at least {MIN_CALIBRATION} trusted samples, got {scores.size}")
    return float(np.quantile(scores, q, method="linear"))


@dataclass
class DefenseBundle:
    classifier: Network
    critic: Network
    theta: float
    q: float
    n_calibration: int
    generator: Network | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.theta):
            raise ConfigError("detection boundary must be finite")
        self.scorer = CriticScorer(self.critic, self.classifier)

    @classmethod
    def calibrate(cls, classifier, critic, s_c: ImageDataset, q: float = 0.05, **kw) -> DefenseBundle:
        theta = calibrate_boundary(CriticScorer(critic, classifier), s_c, q)
        return cls(classifier, critic, theta, q, len(s_c), **kw)

    def scores(self, x) -> np.ndarray:
        return self.scorer(x)

    def predict(self, x) -> np.ndarray:
        return depois_predict(self, x)

    def save(self, directory) -> None:
        directory = Path(directory)
        nn.save_network(self.classifier, directory / "classifier")
        nn.save_network(self.critic, directory / "critic")
        if self.generator is not None:
            nn.save_network(self.generator, directory / "generator")
        record = {"theta": self.theta, "q": self.q, "n_calibration": self.n_calibration, **self.meta}
        (directory / "calibration.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> DefenseBundle:
        directory = Path(directory)
        try:
            record = json.loads((directory / "calibration.json").read_text())
        except FileNotFoundError as exc:
            raise DataError(f"no calibration record in {directory}") from exc
        classifier = nn.load_network(directory / "classifier")
        critic = nn.load_network(directory / "critic")
        generator = None
        if (directory / "generator.json").exists():
            generator = nn.load_network(directory / "generator")
        theta, q, n_cal = record.pop("theta"), record.pop("q"), record.pop("n_calibration")
        return cls(classifier, critic, theta, q, n_cal, generator, record)


def depois_predict(bundle: DefenseBundle, x) -> np.ndarray:
    """Verdict codes: -1 where the critic score is strictly below theta,
    otherwise the classifier's argmax (ties go to the lowest index)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return verdicts_from(bundle.scores(x), nn.predict(bundle.classifier, x), bundle.theta)


def verdicts_from(scores: np.ndarray, logits: np.ndarray, theta: float) -> np.ndarray:
    labels = np.argmax(logits, axis=1)
    return np.where(np.asarray(scores) < theta, REJECTED, labels).astype(np.int64)


def config_dict(cfg) -> dict:
    return asdict(cfg)
