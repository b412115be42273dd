"""Feed-forward networks, losses and optimizers on top of :mod:`.tensor`."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

CHECKPOINT_VERSION = 1
KL_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConfigError(f"layer dimensions must be positive: {self}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


class Network:
    """Ordered chain of dense layers ``act(x @ W + b)``.

    Parameters live in ``params`` as leaf tensors named ``layer{i}.weight``
    (shape ``in x out``) and ``layer{i}.bias``.
    """

    def __init__(self, layers: Sequence[LayerSpec], params: Mapping[str, np.ndarray], seed=None):
        layers = list(layers)
        if not layers:
            raise ConfigError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"adjacent layers incompatible: {prev} -> {nxt}")
        self.layers = layers
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        for name, shape in self.param_shapes().items():
            value = np.array(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {value.shape}")
            self.params[name] = Tensor(value, requires_grad=True)

    @classmethod
    def build(cls, dims: Sequence[int], activations, seed: int) -> Network:
        """Glorot-uniform initialised chain.  ``activations`` is one name per
        layer or a single hidden activation (output layer then ``identity``)."""
        n_layers = len(dims) - 1
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise ConfigError("need one activation per layer")
        layers = [LayerSpec(dims[i], dims[i + 1], activations[i]) for i in range(n_layers)]
        rng = np.random.default_rng(seed)
        params = {}
        for i, spec in enumerate(layers):
            limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            params[f"layer{i}.weight"] = rng.uniform(-limit, limit, (spec.in_dim, spec.out_dim))
            params[f"layer{i}.bias"] = np.zeros(spec.out_dim)
        return cls(layers, params, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, spec in enumerate(self.layers):
            shapes[f"layer{i}.weight"] = (spec.in_dim, spec.out_dim)
            shapes[f"layer{i}.bias"] = (spec.out_dim,)
        return shapes

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name].data = value.copy()

    def clone(self) -> Network:
        return Network(self.layers, self.state(), seed=self.seed)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for k, p in self.params.items()
        }

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.params:
            h.update(self.params[name].data.astype("<f8").tobytes())
        return h.hexdigest()


def forward(net: Network, x) -> Tensor:
    """Evaluate ``net`` on a single vector ``(d,)`` or a batch ``(n, d)``."""
    x = T.ensure_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match network input dim {net.in_dim}")
    h = x
    for i, spec in enumerate(net.layers):
        h = h @ net.params[f"layer{i}.weight"] + net.params[f"layer{i}.bias"]
        h = T.ACTIVATIONS[spec.activation](h)
    return h


def predict(net: Network, x) -> np.ndarray:
    """Forward pass without building a graph (parameters detached)."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.in_dim:
        raise ShapeError(f"input shape {h.shape} does not match network input dim {net.in_dim}")
    for i, spec in enumerate(net.layers):
        h = h @ net.params[f"layer{i}.weight"].data + net.params[f"layer{i}.bias"].data
        if spec.activation == "relu":
            h = np.maximum(h, 0.0)
        elif spec.activation == "leaky_relu":
            h = np.where(h > 0, h, 0.2 * h)
        elif spec.activation != "identity":
            h = T.ACTIVATIONS[spec.activation](Tensor(h)).data
    return h


# -- losses --------------------------------------------------------------------


@dataclass(frozen=True)
class CrossEntropy:
    """Mean cross-entropy of the softmax posterior against true labels."""


@dataclass(frozen=True)
class ScoreAscent:
    """Objective is the (summed) scalar network output, to be maximised."""


@dataclass(frozen=True)
class KDComposite:
    """``alpha * CE(student, y) + KL(soft(p_t, T) || soft(p_s, T))``."""

    alpha: float = 0.5
    temperature: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


LossKind = CrossEntropy | ScoreAscent | KDComposite


def one_hot(labels, k: int = 10) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels.ravel()] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    batched = logits.ndim == 2
    if not batched:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("one label per row required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ConfigError("label out of range")
    logp = T.log_softmax(logits)
    return -(logp * one_hot(labels, logits.shape[1])).sum() * (1.0 / labels.shape[0])


def binary_cross_entropy(out: Tensor, labels, from_probability: bool) -> Tensor:
    """Cross-entropy of a single-output network; ``out`` is P(y=1) or its logit."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    out = out.reshape(-1, 1)
    if labels.shape[0] != out.shape[0]:
        raise ShapeError("one label per row required")
    if np.any((labels != 0) & (labels != 1)):
        raise ConfigError("binary labels must be 0 or 1")
    if not from_probability:
        zeros = Tensor(np.zeros_like(out.data))
        return cross_entropy(T.concat([zeros, out], axis=1), labels.ravel().astype(np.int64))
    p = T.clamp_min(out, KL_FLOOR)
    q = T.clamp_min(1.0 - out, KL_FLOOR)
    ll = T.log(p) * labels + T.log(q) * (1.0 - labels)
    return -ll.sum() * (1.0 / labels.shape[0])


def soften(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Re-temper a posterior given only its probabilities: ``softmax(log p / T)``."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    logp = np.log(np.maximum(np.asarray(probs, dtype=np.float64), KL_FLOOR))
    return T.softmax(Tensor(logp), temperature).data


def kd_loss(logits: Tensor, labels, teacher_probs: np.ndarray, loss: KDComposite) -> Tensor:
    """Distillation objective, averaged over the batch."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        teacher_probs = np.atleast_2d(teacher_probs)
    if teacher_probs.shape != logits.shape:
        raise ShapeError("teacher posteriors must match student logits")
    n = logits.shape[0]
    p_t = soften(teacher_probs, loss.temperature)
    log_ps = T.log_softmax(logits, loss.temperature)
    # KL(p_t || p_s) = sum p_t log p_t - sum p_t log p_s; the floor keeps log finite
    log_pt = np.log(np.maximum(p_t, KL_FLOOR))
    kl = ((log_pt - log_ps) * p_t).sum() * (1.0 / n)
    if loss.alpha == 0.0:
        return kl
    return cross_entropy(logits, labels) * loss.alpha + kl


def objective(net: Network, x, y=None, loss: LossKind = CrossEntropy(), teacher=None) -> Tensor:
    out = forward(net, x)
    if isinstance(loss, CrossEntropy):
        if y is None:
            raise ConfigError("cross_entropy loss requires a class label")
        if net.out_dim == 1:
            return binary_cross_entropy(out, y, from_probability=net.layers[-1].activation == "sigmoid")
        return cross_entropy(out, y)
    if isinstance(loss, ScoreAscent):
        return out.sum()
    if isinstance(loss, KDComposite):
        if teacher is None:
            raise ConfigError("kd_composite loss requires teacher posteriors")
        if y is None and loss.alpha > 0:
            raise ConfigError("kd_composite loss with alpha > 0 requires class labels")
        return kd_loss(out, y, np.asarray(teacher, dtype=np.float64), loss)
    raise ConfigError(f"unknown loss kind {loss!r}")


def backward(net: Network, x, y=None, loss: LossKind = CrossEntropy(), teacher=None):
    """Return ``(loss value, parameter grads, input grad)``.

    The input gradient has the shape of ``x``.  Parameter gradients cover
    every parameter and are returned as fresh arrays.
    """
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    net.zero_grad()
    value = objective(net, xt, y, loss, teacher)
    value.backward()
    grads = net.grads()
    net.zero_grad()
    input_grad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return value.item(), grads, input_grad


def softmax_temperature(logits, temperature: float) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError("softmax_temperature expects a one-dimensional logit vector")
    return T.softmax(Tensor(logits), temperature).data


def kl_divergence(p, q) -> float:
    """``sum p_i ln(p_i / q_i)`` with ``q`` floored at 1e-12; 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, KL_FLOOR)
    nz = p > 0
    return float(max(0.0, np.sum(p[nz] * np.log(p[nz] / q[nz]))))


# -- optimizers ------------------------------------------------------------------


@dataclass
class SGD:
    lr: float

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return param - self.lr * grad


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        t = self.t.get(name, 0) + 1
        m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * grad * grad
        self.t[name], self.m[name], self.v[name] = t, m, v
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(net: Network, grads: Mapping[str, np.ndarray], opt) -> Network:
    """Apply one update in place and return ``net``."""
    missing = set(net.params) - set(grads)
    if missing:
        raise ConfigError(f"gradients missing for parameters: {sorted(missing)}")
    for name, p in net.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.any(g):
            continue
        p.data = opt.update(name, p.data, g)
    return net


def make_optimizer(kind: str, lr: float, betas=(0.9, 0.999)):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, betas[0], betas[1])
    raise ConfigError(f"unknown optimizer {kind!r}")


# -- checkpoints ---------------------------------------------------------------------


def save_network(net: Network, path, extra: Mapping | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f8)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(net.param_shapes())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "layers": [
            {"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation}
            for s in net.layers
        ],
        "parameters": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "seed": net.seed,
        "sha256": net.checksum(),
    }
    if extra:
        manifest["extra"] = dict(extra)
    blob = b"".join(net.params[n].data.astype("<f8").tobytes() for n in names)
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_network(path) -> Network:
    path = Path(path)
    json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    try:
        manifest = json.loads(json_path.read_text())
        blob = bin_path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint file not found: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{json_path}: malformed manifest: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{json_path}: unsupported format version {manifest.get('format_version')}")
    layers = [LayerSpec(**spec) for spec in manifest["layers"]]
    values = np.frombuffer(blob, dtype="<f8")
    expected = sum(int(np.prod(p["shape"])) for p in manifest["parameters"])
    if values.size != expected or len(blob) % 8:
        raise DataError(f"{bin_path}: holds {len(blob)} bytes, manifest needs {expected * 8}")
    params, offset = {}, 0
    for p in manifest["parameters"]:
        size = int(np.prod(p["shape"]))
        params[p["name"]] = values[offset : offset + size].reshape(p["shape"])
        offset += size
    try:
        net = Network(layers, params, seed=manifest.get("seed"))
    except (KeyError, ShapeError) as exc:
        raise DataError(f"{json_path}: parameters do not match layers: {exc}") from exc
    if set(params) != set(net.params):
        raise DataError(f"{json_path}: unexpected parameter names")
    return net
