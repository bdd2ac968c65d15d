"""Layer primitives, gradient verification, SGD and checkpoint I/O.

All training paths run in float64. Forward layers validate finiteness at
their boundaries so a NaN cannot travel silently through a run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, require_finite
from .errors import (
    BatchSizeError,
    CheckpointError,
    DimensionError,
    NonFiniteError,
)


@dataclass
class LayerParams:
    """Parameters of a fully connected or batch-norm layer.

    For linear layers `weights` is D_in x D_out and `bias` is D_out. For batch
    norm, `weights`/`bias` act as the affine scale/shift and the running
    statistics are tracked alongside.
    """

    weights: Tensor
    bias: Tensor
    running_mean: Tensor | None = None
    running_var: Tensor | None = None
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.running_var is not None:
            if not (self.running_var.data > 0).all():
                raise ValueError("running_var must be strictly positive")
        if not (0.0 < self.momentum <= 1.0):
            raise ValueError("momentum must lie in (0, 1]")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")

    @property
    def is_batch_norm(self) -> bool:
        return self.running_mean is not None


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> LayerParams:
    """Fan-in scaled Gaussian weights, zero bias."""
    w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
    return LayerParams(
        weights=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(d_out), requires_grad=True),
    )


def init_batch_norm(dim: int, momentum: float = 0.1, eps: float = 1e-5) -> LayerParams:
    return LayerParams(
        weights=Tensor(np.ones(dim), requires_grad=True),
        bias=Tensor(np.zeros(dim), requires_grad=True),
        running_mean=Tensor(np.zeros(dim)),
        running_var=Tensor(np.ones(dim)),
        momentum=momentum,
        eps=eps,
    )


def linear(x: Tensor, p: LayerParams) -> Tensor:
    """y = x @ W + b for a batch of row vectors."""
    x = as_tensor(x)
    require_finite(x, "linear")
    if x.data.ndim != 2:
        raise DimensionError("linear expects an N x D_in batch")
    if x.data.shape[1] != p.weights.data.shape[0]:
        raise DimensionError(
            f"linear input width {x.data.shape[1]} != weight input extent "
            f"{p.weights.data.shape[0]}"
        )
    return x @ p.weights + p.bias


def batch_norm(x: Tensor, p: LayerParams, mode: str = "train") -> Tensor:
    """Normalize per feature; train mode uses batch moments and updates the
    running statistics, infer mode uses the stored running statistics.

    Train-mode variance is the biased (population) estimate; the running
    buffers are updated with the same estimate, detached from the graph.
    """
    x = as_tensor(x)
    require_finite(x, "batch_norm")
    if x.data.ndim != 2:
        raise DimensionError("batch_norm expects an N x D batch")
    if not p.is_batch_norm:
        raise DimensionError("LayerParams has no running statistics")
    if mode == "train":
        n = x.data.shape[0]
        if n < 2:
            raise BatchSizeError(f"train-mode batch_norm needs N >= 2, got N={n}")
        mu = x.mean(axis=0)
        centered = x - mu
        var = centered.square().mean(axis=0)
        inv = 1.0 / (var + p.eps).sqrt()
        normalized = centered * inv
        m = p.momentum
        p.running_mean.data = (1.0 - m) * p.running_mean.data + m * mu.data
        p.running_var.data = (1.0 - m) * p.running_var.data + m * var.data
    elif mode == "infer":
        inv = 1.0 / np.sqrt(p.running_var.data + p.eps)
        normalized = (x - p.running_mean.data) * inv
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    return normalized * p.weights + p.bias


def relu_act(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def tanh_act(x: Tensor) -> Tensor:
    return as_tensor(x).tanh()


def softsign_act(x: Tensor) -> Tensor:
    return as_tensor(x).softsign()


def sign_act(x: Tensor) -> Tensor:
    """Hard sign: +1 for x > 0, -1 otherwise. No gradient."""
    return as_tensor(x).sign()


def check_gradients(f: Callable[[Tensor], Tensor], x, h: float = 1e-4) -> float:
    """Compare analytic gradients of scalar `f` at `x` with central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    The caller must pick a point where f is smooth (nudge away from hinge or
    top-k selection boundaries).
    """
    base = np.array(np.asarray(x, dtype=np.float64), copy=True)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise DimensionError("check_gradients needs a scalar-valued function")
    out.backward()
    analytic = leaf.grad.reshape(-1).copy()

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(Tensor(base)).data)
        flat[i] = orig - h
        f_minus = float(f(Tensor(base)).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """p <- p - lr * (g + weight_decay * p), in place.

    A non-finite gradient aborts with a diagnostic rather than poisoning the
    parameters.
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g)
        if not np.isfinite(g).all():
            raise NonFiniteError(
                f"non-finite gradient for parameter {i} (shape {p.data.shape}); "
                "training aborted"
            )
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape}"
            )
        p.data -= lr * (g + weight_decay * p.data)


@dataclass
class LrSchedule:
    """Piecewise-constant learning rate: values[i] applies from boundaries[i]."""

    values: tuple[float, ...] = (3e-4, 3e-5, 3e-6)
    boundaries: tuple[int, ...] = (0, 40, 70)

    def __post_init__(self):
        if len(self.values) != len(self.boundaries):
            raise ValueError("values and boundaries must align")
        if list(self.boundaries) != sorted(self.boundaries) or self.boundaries[0] != 0:
            raise ValueError("boundaries must be ascending and start at 0")

    def lr_for_epoch(self, epoch: int) -> float:
        lr = self.values[0]
        for b, v in zip(self.boundaries, self.values):
            if epoch >= b:
                lr = v
        return lr


class SGD:
    """Convenience wrapper driving sgd_step over a named parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.0):
        self.params = dict(params)
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        grads = []
        for n, p in zip(names, tensors):
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for {n!r}; training aborted")
            grads.append(p.grad)
        sgd_step(tensors, grads, lr, self.weight_decay)


# -- checkpoint format ---------------------------------------------------------
#
# <prefix>.manifest : text; "meta <key> <value>" lines followed by
#                     "tensor <name> <d0>x<d1>..." lines in storage order.
# <prefix>.blob     : the tensors' float64 data, little endian, concatenated
#                     in manifest order. Round-trips bit-exactly.

_MANIFEST_HEADER = "hashexit-checkpoint v1"


def save_checkpoint(
    prefix: str | os.PathLike,
    params: Mapping[str, Tensor | np.ndarray],
    meta: Mapping[str, object] | None = None,
) -> None:
    prefix = os.fspath(prefix)
    lines = [_MANIFEST_HEADER]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)):
            raise CheckpointError(f"meta key {key!r} may not contain whitespace")
        lines.append(f"meta {key} {value}")
    blobs = []
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        data = np.ascontiguousarray(data, dtype="<f8")
        dims = "x".join(str(d) for d in data.shape) if data.shape else "scalar"
        lines.append(f"tensor {name} {dims}")
        blobs.append(data.tobytes())
    with open(prefix + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(prefix + ".blob", "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(prefix: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    prefix = os.fspath(prefix)
    with open(prefix + ".manifest", "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise CheckpointError(f"{prefix}.manifest: unrecognized header")
    meta: dict[str, str] = {}
    entries: list[tuple[str, tuple[int, ...]]] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "tensor":
            name, dims = rest.rsplit(" ", 1)
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            entries.append((name, shape))
        else:
            raise CheckpointError(f"{prefix}.manifest: unknown record {kind!r}")
    blob = np.fromfile(prefix + ".blob", dtype="<f8")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        chunk = blob[offset : offset + count]
        if chunk.size != count:
            raise CheckpointError(f"{prefix}.blob: truncated at tensor {name!r}")
        params[name] = chunk.reshape(shape).astype(np.float64)
        offset += count
    if offset != blob.size:
        raise CheckpointError(f"{prefix}.blob: {blob.size - offset} trailing values")
    return params, meta


def restore_params(target: Mapping[str, Tensor], loaded: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing named-parameter dict, shape-checked."""
    missing = set(target) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    for name, tensor in target.items():
        data = loaded[name]
        if data.shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {data.shape} != model shape "
                f"{tensor.data.shape}"
            )
        tensor.data = data.copy()
