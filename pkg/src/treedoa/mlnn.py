"""Small fully connected classifier nets, written out over numpy primitives.

Hidden layers use ReLU, the output layer a numerically stabilized softmax.
The default loss is elementwise binary cross-entropy applied to the softmax
output; categorical cross-entropy is available as an ablation.  Everything
runs in float64 and is bit-reproducible given a seed: initialization, batch
shuffling and the optimizer state all derive from explicit seeds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CLAMP_EPS",
    "MlnnModel",
    "TrainConfig",
    "TrainResult",
    "validate_layer_sizes",
    "new_model",
    "forward",
    "predict_class",
    "bce_loss",
    "cce_loss",
    "backprop_gradients",
    "train",
    "save_model",
    "load_model",
]

# probabilities are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] inside every log
CLAMP_EPS = 1e-12

_MAGIC = b"MLNN"
_FORMAT_VERSION = 1


def validate_layer_sizes(sizes) -> tuple[int, ...]:
    """Check an (input, hidden..., output) size vector and return it as a tuple."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 3:
        raise ValueError(f"need input, at least one hidden, and output layer, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    if sizes[-1] < 2:
        raise ValueError(f"a classifier needs at least 2 output classes, got {sizes[-1]}")
    return sizes


@dataclass
class MlnnModel:
    """Per-layer parameters; weights[k] has shape (sizes[k+1], sizes[k])."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> MlnnModel:
        return MlnnModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def new_model(layer_sizes, seed) -> MlnnModel:
    """Freshly initialized net: He-uniform hidden layers, Glorot-uniform output.

    He limits sqrt(6/fan_in) suit the ReLU layers; the softmax layer gets the
    symmetric Glorot limit sqrt(6/(fan_in+fan_out)).  Biases start at zero.
    """
    sizes = validate_layer_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    last = len(sizes) - 2
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        if k < last:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlnnModel(weights, biases)


def _softmax_rows(q: np.ndarray) -> np.ndarray:
    shifted = q - q.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_trace(model: MlnnModel, x: np.ndarray):
    """All pre- and post-activations of a (n, d) batch, for backprop."""
    pre: list[np.ndarray] = []
    post: list[np.ndarray] = [x]
    g = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        q = g @ w.T + b
        g = _softmax_rows(q) if k == last else np.maximum(q, 0.0)
        pre.append(q)
        post.append(g)
    return pre, post


def forward(model: MlnnModel, features) -> np.ndarray:
    """Class probabilities for one feature vector or an (n, d) batch.

    Output rows are softmax distributions: non-negative, summing to 1.
    """
    x = np.asarray(features, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"feature dimension {x.shape[-1]} does not match model input "
            f"{model.layer_sizes[0]}"
        )
    probs = _forward_trace(model, x)[1][-1]
    return probs[0] if single else probs


def predict_class(model: MlnnModel, features) -> int | np.ndarray:
    """Argmax class index; ties resolve to the lowest index."""
    probs = forward(model, features)
    if probs.ndim == 1:
        return int(np.argmax(probs))
    return np.argmax(probs, axis=1)


def bce_loss(predicted, target) -> float:
    """Mean elementwise binary cross-entropy with clamped probabilities.

    Averages -[z log p + (1-z) log(1-p)] over every component (and over rows
    for batched input) after clamping p to [CLAMP_EPS, 1 - CLAMP_EPS].
    Symmetric under any permutation applied to both arguments.
    """
    p = np.asarray(predicted, dtype=float)
    z = np.asarray(target, dtype=float)
    if p.shape != z.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {z.shape}")
    p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return float(-np.mean(z * np.log(p) + (1.0 - z) * np.log1p(-p)))


def cce_loss(predicted, target) -> float:
    """Categorical cross-entropy -sum z log p, averaged over batch rows."""
    p = np.asarray(predicted, dtype=float)
    z = np.asarray(target, dtype=float)
    if p.shape != z.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {z.shape}")
    p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    per_row = -np.sum(z * np.log(p), axis=-1)
    return float(np.mean(per_row))


def _batch_loss(probs: np.ndarray, targets: np.ndarray, loss: str) -> float:
    if loss == "bce":
        return bce_loss(probs, targets)
    if loss == "cce":
        return cce_loss(probs, targets)
    raise ValueError(f"unknown loss {loss!r}")


def _output_delta(probs: np.ndarray, targets: np.ndarray, loss: str) -> np.ndarray:
    """d(mean loss)/d(softmax pre-activation), one row per batch sample."""
    n, width = probs.shape
    if loss == "cce":
        return (probs - targets) / n
    # elementwise BCE through the softmax Jacobian:
    # dL/dp_i = -(z_i/p_i - (1-z_i)/(1-p_i)) / width, then
    # dL/dq_j = p_j * (dL/dp_j - sum_i dL/dp_i p_i)
    pc = np.clip(probs, CLAMP_EPS, 1.0 - CLAMP_EPS)
    dp = -(targets / pc - (1.0 - targets) / (1.0 - pc)) / width
    inner = np.sum(dp * probs, axis=1, keepdims=True)
    return probs * (dp - inner) / n


def _batch_gradients(model: MlnnModel, x: np.ndarray, z: np.ndarray, loss: str):
    """Mean parameter gradients and the loss over one (n, d) batch."""
    pre, post = _forward_trace(model, x)
    probs = post[-1]
    value = _batch_loss(probs, z, loss)
    grad_w = [np.empty_like(w) for w in model.weights]
    grad_b = [np.empty_like(b) for b in model.biases]
    delta = _output_delta(probs, z, loss)
    for k in range(len(model.weights) - 1, -1, -1):
        grad_w[k] = delta.T @ post[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * (pre[k - 1] > 0.0)
    return grad_w, grad_b, value, probs


def backprop_gradients(model: MlnnModel, features, target, loss: str = "bce"):
    """Exact loss gradients for a single (feature, target) pair.

    Returns (weight_grads, bias_grads) matching the model's parameter lists.
    Matches central finite differences of the loss to high relative accuracy.
    """
    x = np.asarray(features, dtype=float)
    z = np.asarray(target, dtype=float)
    if x.ndim != 1 or z.ndim != 1:
        raise ValueError("backprop_gradients takes a single sample; use train for batches")
    grad_w, grad_b, _, _ = _batch_gradients(model, x[None, :], z[None, :], loss)
    return grad_w, grad_b


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the defaults are the ones used everywhere.

    loss selects "bce" (elementwise binary cross-entropy on the softmax
    output) or the "cce" ablation.  target_accuracy and patience both stop
    training early: the first once the epoch training accuracy reaches the
    target, the second after that many epochs without a loss improvement.
    """

    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 128
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "bce"
    shuffle: bool = True
    seed: int = 0
    target_accuracy: float | None = None
    patience: int | None = None
    min_epochs: int = 1

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1 or self.min_epochs < 1:
            raise ValueError("epochs, batch_size and min_epochs must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("bce", "cce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")


@dataclass
class TrainResult:
    model: MlnnModel
    loss_history: list[float] = field(default_factory=list)
    accuracy_history: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_history[-1]


class _Adam:
    """Textbook Adam with bias correction, one slot pair per parameter array."""

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.adam_beta1**self.t
        b2c = 1.0 - cfg.adam_beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * g * g
            p -= cfg.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)


class _Sgd:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig) -> None:
        self.cfg = cfg

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.cfg.learning_rate * g


def train(model: MlnnModel, features, targets, cfg: TrainConfig) -> TrainResult:
    """Minibatch training pass; the input model is left untouched.

    Parameters
    ----------
    model : MlnnModel
        Starting point; training operates on a private copy.
    features, targets : array_like
        Rows of feature vectors and matching {0,1} target vectors (one-hot
        for single-label nodes, multi-hot for multi-label heads).
    cfg : TrainConfig

    Returns
    -------
    TrainResult
        Trained model plus per-epoch mean loss and training accuracy.
        The same model, data and config reproduce the result bit for bit.

    Raises
    ------
    RuntimeError
        If the loss turns non-finite; the message names the epoch.
    """
    x = np.asarray(features, dtype=float)
    z = np.asarray(targets, dtype=float)
    if x.ndim != 2 or z.ndim != 2 or x.shape[0] != z.shape[0]:
        raise ValueError(f"inconsistent dataset shapes {x.shape} and {z.shape}")
    if x.shape[0] < 1:
        raise ValueError("training dataset is empty")
    if x.shape[1] != model.layer_sizes[0] or z.shape[1] != model.layer_sizes[-1]:
        raise ValueError(
            f"dataset shapes {x.shape}/{z.shape} do not match model layout "
            f"{model.layer_sizes}"
        )

    net = model.copy()
    params = net.weights + net.biases
    opt = _Adam(params, cfg) if cfg.optimizer == "adam" else _Sgd(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    num = x.shape[0]
    target_cls = np.argmax(z, axis=1)

    result = TrainResult(net)
    best_loss = np.inf
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(num) if cfg.shuffle else np.arange(num)
        loss_sum = 0.0
        correct = 0
        for start in range(0, num, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grad_w, grad_b, value, probs = _batch_gradients(net, x[idx], z[idx], cfg.loss)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"loss became non-finite at epoch {epoch} "
                    f"(batch starting at sample {start})"
                )
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == target_cls[idx]))
            opt.step(params, grad_w + grad_b)
        result.loss_history.append(loss_sum / num)
        result.accuracy_history.append(correct / num)

        if result.loss_history[-1] < best_loss - 1e-12:
            best_loss = result.loss_history[-1]
            stale = 0
        else:
            stale += 1
        if epoch + 1 >= cfg.min_epochs:
            if cfg.target_accuracy is not None and result.accuracy_history[-1] >= cfg.target_accuracy:
                break
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return result


def save_model(model: MlnnModel, path) -> None:
    """Write a self-describing little-endian float64 checkpoint.

    Layout: magic "MLNN", uint32 format version, uint32 header length, JSON
    header (layer sizes, activation tags, dtype), then every parameter array
    in layer order (W0, b0, W1, b1, ...) as raw '<f8' row-major bytes.
    """
    sizes = validate_layer_sizes(model.layer_sizes)
    header = {
        "layer_sizes": list(sizes),
        "activations": ["relu"] * (len(sizes) - 2) + ["softmax"],
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path) -> MlnnModel:
    """Read a checkpoint written by save_model; round-trips bit for bit.

    Raises ValueError on a foreign file, an unsupported format version, a
    corrupted header, or a truncated parameter section.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != _FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint format version {version} "
            f"(expected {_FORMAT_VERSION})"
        )
    if len(data) < 12 + header_len:
        raise ValueError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
        sizes = validate_layer_sizes(header["layer_sizes"])
        dtype = header["dtype"]
        activations = header["activations"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: corrupted checkpoint header ({exc})") from exc
    if dtype != "<f8":
        raise ValueError(f"{path}: unsupported parameter dtype {dtype!r}")
    expected_act = ["relu"] * (len(sizes) - 2) + ["softmax"]
    if activations != expected_act:
        raise ValueError(f"{path}: unsupported activation layout {activations}")

    offset = 12 + header_len
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        need = 8 * fan_out * (fan_in + 1)
        if len(data) < offset + need:
            raise ValueError(f"{path}: truncated parameter section")
        w = np.frombuffer(data, dtype="<f8", count=fan_out * fan_in, offset=offset)
        offset += 8 * fan_out * fan_in
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.reshape(fan_out, fan_in).astype(float))
        biases.append(b.astype(float))
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    return MlnnModel(weights, biases)
