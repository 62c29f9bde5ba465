"""Dense feedforward reference network with masked evaluation and SGD.

Parameters live in one flat float64 vector.  Layer ``l`` owns a contiguous
block laid out row-major as ``(fan_out, fan_in + 1)``: row ``j`` holds the
incoming weights of neuron ``j`` followed by its bias.  Keeping a neuron's
parameters contiguous makes neuron-level grouping a plain slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "tanh")
OUTPUTS = ("softmax_logits", "linear")
LOSS_KINDS = ("cross_entropy", "mse")

# losses below this never count as the baseline for the 10x divergence guard
_DIVERGENCE_FLOOR = 1e-3


class NetworkError(ValueError):
    """Rejected input: dimension mismatch, bad architecture, empty batch."""


class MaskShapeError(NetworkError):
    pass


class DivergenceError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output: str = "softmax_logits"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise NetworkError("arch.layer_sizes: need at least 2 layers")
        if any(s < 1 for s in sizes):
            raise NetworkError("arch.layer_sizes: every layer size must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"arch.activation: unknown activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise NetworkError(f"arch.output: unknown output head {self.output!r}")

    @property
    def n_layers(self) -> int:
        """Number of parameterised (weight) layers."""
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def layer_shape(self, layer: int) -> tuple[int, int]:
        return self.layer_sizes[layer + 1], self.layer_sizes[layer] + 1

    def layer_param_counts(self) -> list[int]:
        return [(self.layer_sizes[i] + 1) * self.layer_sizes[i + 1] for i in range(self.n_layers)]

    def layer_offsets(self) -> list[tuple[int, int]]:
        offsets, start = [], 0
        for count in self.layer_param_counts():
            offsets.append((start, start + count))
            start += count
        return offsets

    @property
    def n_params(self) -> int:
        return sum(self.layer_param_counts())

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation, "output": self.output}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["layer_sizes"]), d.get("activation", "relu"), d.get("output", "softmax_logits"))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2:
            raise NetworkError(f"inputs must be 2-D, got shape {x.shape}")
        y = np.asarray(self.labels)
        if y.shape[0] != x.shape[0]:
            raise NetworkError("inputs and labels disagree on sample count")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, index) -> "Batch":
        index = np.asarray(index, dtype=np.intp)
        return Batch(self.inputs[index], self.labels[index])


@dataclass
class ReferenceNet:
    arch: Architecture
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise NetworkError(
                f"params length {self.params.shape} does not match architecture ({self.arch.n_params},)"
            )

    @classmethod
    def initialize(cls, arch: Architecture, seed: int = 0) -> "ReferenceNet":
        """He-style (relu) or Glorot-style (tanh) uniform init; biases zero."""
        rng = np.random.default_rng(seed)
        blocks = []
        for layer in range(arch.n_layers):
            fan_out, width = arch.layer_shape(layer)
            fan_in = width - 1
            scale = np.sqrt(6.0 / fan_in) if arch.activation == "relu" else np.sqrt(6.0 / (fan_in + fan_out))
            block = np.zeros((fan_out, width))
            block[:, :fan_in] = rng.uniform(-scale, scale, size=(fan_out, fan_in))
            blocks.append(block.ravel())
        return cls(arch, np.concatenate(blocks))

    def layer_blocks(self, params: np.ndarray | None = None) -> list[np.ndarray]:
        theta = self.params if params is None else params
        return [theta[a:b].reshape(self.arch.layer_shape(i)) for i, (a, b) in enumerate(self.arch.layer_offsets())]

    def copy(self, params: np.ndarray | None = None) -> "ReferenceNet":
        return ReferenceNet(self.arch, (self.params if params is None else params).copy())

    # -- checkpoints -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "params": [float(v) for v in self.params],
            "format_version": FORMAT_VERSION,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceNet":
        if d.get("format_version") != FORMAT_VERSION:
            raise NetworkError(f"unsupported checkpoint format_version {d.get('format_version')!r}")
        return cls(Architecture.from_dict(d["arch"]), np.array(d["params"], dtype=np.float64))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)

    @classmethod
    def loads(cls, text: str) -> "ReferenceNet":
        return cls.from_dict(json.loads(text))


def _param_mask(net: ReferenceNet, mask) -> np.ndarray | None:
    """Boolean keep-vector over the flat parameters, or None for no mask.

    Accepts a ``GroupedMask`` (anything exposing ``expand``) or a raw
    boolean vector already at parameter resolution.
    """
    if mask is None:
        return None
    if hasattr(mask, "expand"):
        if mask.grouping.arch != net.arch:
            raise MaskShapeError("mask grouping was built for a different architecture")
        keep = mask.expand()
    else:
        keep = np.asarray(mask, dtype=bool)
    if keep.shape != net.params.shape:
        raise MaskShapeError(f"mask covers {keep.shape} parameters, network has {net.params.shape}")
    return keep


def effective_params(net: ReferenceNet, mask=None) -> np.ndarray:
    keep = _param_mask(net, mask)
    if keep is None:
        return net.params
    return np.where(keep, net.params, 0.0)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _check_inputs(net: ReferenceNet, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.arch.input_dim:
        raise NetworkError(f"expected inputs of width {net.arch.input_dim}, got shape {x.shape}")
    return x


def _forward_cache(net: ReferenceNet, theta: np.ndarray, x: np.ndarray):
    blocks = net.layer_blocks(theta)
    acts, pre = [x], []
    a = x
    last = len(blocks) - 1
    for i, block in enumerate(blocks):
        z = a @ block[:, :-1].T + block[:, -1]
        pre.append(z)
        a = z if i == last else _activate(net.arch.activation, z)
        acts.append(a)
    return blocks, pre, acts


def forward(net: ReferenceNet, mask=None, inputs=None) -> np.ndarray:
    """Raw outputs (logits for a softmax head) for every row of ``inputs``."""
    x = _check_inputs(net, inputs)
    theta = effective_params(net, mask)
    return _forward_cache(net, theta, x)[2][-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _head_columns(net: ReferenceNet, head: Sequence[int] | None) -> np.ndarray:
    if head is None:
        return np.arange(net.arch.output_dim)
    cols = np.asarray(head, dtype=np.intp)
    if cols.size == 0 or cols.min() < 0 or cols.max() >= net.arch.output_dim:
        raise NetworkError(f"head columns {list(cols)} outside output dim {net.arch.output_dim}")
    return cols


def _local_labels(net: ReferenceNet, labels: np.ndarray, cols: np.ndarray) -> np.ndarray:
    lookup = np.full(net.arch.output_dim, -1, dtype=np.intp)
    lookup[cols] = np.arange(cols.size)
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise NetworkError("cross_entropy needs a vector of integer class labels")
    if y.min() < 0 or y.max() >= net.arch.output_dim:
        raise NetworkError("class index out of range for the output layer")
    local = lookup[y]
    if (local < 0).any():
        raise NetworkError("label outside the selected head columns")
    return local


def _targets(labels: np.ndarray, n_cols: int) -> np.ndarray:
    t = np.asarray(labels, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape[1] != n_cols:
        raise NetworkError(f"mse targets have {t.shape[1]} columns, head has {n_cols}")
    return t


def _check_batch(batch: Batch, loss_kind: str):
    if len(batch) == 0:
        raise NetworkError("empty batch")
    if loss_kind not in LOSS_KINDS:
        raise NetworkError(f"unknown loss kind {loss_kind!r}")


def per_sample_loss(net, mask, batch: Batch, loss_kind: str = "cross_entropy", head=None) -> np.ndarray:
    _check_batch(batch, loss_kind)
    cols = _head_columns(net, head)
    out = forward(net, mask, batch.inputs)[:, cols]
    if loss_kind == "cross_entropy":
        local = _local_labels(net, batch.labels, cols)
        return -log_softmax(out)[np.arange(len(batch)), local]
    t = _targets(batch.labels, cols.size)
    return ((out - t) ** 2).mean(axis=1)


def loss(net, mask, batch: Batch, loss_kind: str = "cross_entropy", head=None) -> float:
    """Mean per-sample loss.  ``head`` restricts outputs to a column subset
    before the softmax (or before the squared error for ``mse``)."""
    value = float(per_sample_loss(net, mask, batch, loss_kind, head).mean())
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    return value


def accuracy(net, mask, batch: Batch, head=None) -> float:
    cols = _head_columns(net, head)
    out = forward(net, mask, batch.inputs)[:, cols]
    return float((cols[out.argmax(axis=1)] == batch.labels).mean())


def loss_and_grad(net, mask, batch: Batch, loss_kind: str = "cross_entropy", head=None):
    _check_batch(batch, loss_kind)
    x = _check_inputs(net, batch.inputs)
    keep = _param_mask(net, mask)
    theta = net.params if keep is None else np.where(keep, net.params, 0.0)
    cols = _head_columns(net, head)
    blocks, pre, acts = _forward_cache(net, theta, x)
    n = x.shape[0]
    out = acts[-1][:, cols]

    delta = np.zeros_like(acts[-1])
    if loss_kind == "cross_entropy":
        local = _local_labels(net, batch.labels, cols)
        logp = log_softmax(out)
        value = -logp[np.arange(n), local].mean()
        g = np.exp(logp)
        g[np.arange(n), local] -= 1.0
        delta[:, cols] = g / n
    else:
        t = _targets(batch.labels, cols.size)
        diff = out - t
        value = (diff**2).mean(axis=1).mean()
        delta[:, cols] = 2.0 * diff / (n * cols.size)

    grads = [None] * len(blocks)
    for i in range(len(blocks) - 1, -1, -1):
        a_prev = acts[i]
        gb = np.empty_like(blocks[i])
        gb[:, :-1] = delta.T @ a_prev
        gb[:, -1] = delta.sum(axis=0)
        grads[i] = gb.ravel()
        if i > 0:
            delta = (delta @ blocks[i][:, :-1]) * _activate_grad(net.arch.activation, pre[i - 1], acts[i])
    grad = np.concatenate(grads)
    if keep is not None:
        grad[~keep] = 0.0
    return float(value), grad


def backprop(net, mask, batch: Batch, loss_kind: str = "cross_entropy", head=None) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the flat parameters; exactly zero at
    masked positions."""
    return loss_and_grad(net, mask, batch, loss_kind, head)[1]


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.1
    lr_decay: float = 1.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise NetworkError("lr must be non-negative")
        if self.epochs < 0:
            raise NetworkError("epochs must be >= 0")
        if self.batch_size < 1:
            raise NetworkError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "lr_decay": self.lr_decay, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed}


def train(net: ReferenceNet, mask, dataset: Batch, hyper: TrainHyper,
          loss_kind: str = "cross_entropy", head=None) -> ReferenceNet:
    """Minibatch SGD with per-epoch multiplicative learning-rate decay.

    Masked parameters are zeroed up front and receive zero gradient, so they
    stay exactly zero.  The full-dataset loss is checked after every epoch
    and the best parameters seen (the start included) are returned, which
    keeps the final loss at or below the initial loss.

    Raises:
        DivergenceError: an epoch pushed the full-dataset loss past 10x the
            previous epoch's value.
        NumericError: parameters became NaN or infinite.
    """
    _check_batch(dataset, loss_kind)
    keep = _param_mask(net, mask)
    theta = net.params.copy() if keep is None else np.where(keep, net.params, 0.0)
    work = ReferenceNet(net.arch, theta)
    rng = np.random.default_rng(hyper.seed)

    best = theta.copy()
    best_loss = prev_loss = loss(work, None, dataset, loss_kind, head)
    lr = hyper.lr
    n = len(dataset)
    for _ in range(hyper.epochs):
        if lr > 0.0:
            order = rng.permutation(n)
            with np.errstate(over="ignore", invalid="ignore"):
                for start in range(0, n, hyper.batch_size):
                    idx = order[start:start + hyper.batch_size]
                    _, grad = loss_and_grad(work, keep, dataset.subset(idx), loss_kind, head)
                    work.params -= lr * grad
            if not np.all(np.isfinite(work.params)):
                raise NumericError("non-finite parameters during training")
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                epoch_loss = loss(work, None, dataset, loss_kind, head)
        except NumericError as exc:
            raise DivergenceError("full-dataset loss became non-finite") from exc
        if epoch_loss > 10.0 * max(prev_loss, _DIVERGENCE_FLOOR):
            raise DivergenceError(f"loss jumped from {prev_loss:.6g} to {epoch_loss:.6g}")
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = work.params.copy()
        prev_loss = epoch_loss
        lr *= hyper.lr_decay
    return ReferenceNet(net.arch, best)
