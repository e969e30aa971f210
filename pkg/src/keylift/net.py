"""Fully-connected network core with analytic backprop and Adam.

One small MLP implementation serves three roles in the pipeline: the
diffusion score network, the joint-angle regressor and the regression
baseline lifter. Hidden layers are tanh or relu; the output layer is
always linear. Everything is float64 for exact reproducibility.

The hot kernels (forward, backward, Adam) exist twice: a compiled Cython
extension and a pure-numpy reference. The fastest available backend is
picked at import time; set KEYLIFT_BACKEND=numpy|compiled to force one
(see ``benchmarks/bench_backends.py`` for the speed comparison).

Training mutates parameters in place (single owner); inference clones are
immutable by convention and safe to share across threads.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from keylift import _net_numpy

_ACT_CODES = {"linear": _net_numpy.ACT_LINEAR, "tanh": _net_numpy.ACT_TANH, "relu": _net_numpy.ACT_RELU}

_requested = os.environ.get("KEYLIFT_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "compiled"):
    raise ImportError(f"KEYLIFT_BACKEND must be 'numpy' or 'compiled', got {_requested!r}")
if _requested == "numpy":
    _impl = _net_numpy
    BACKEND = "numpy"
else:
    try:
        from keylift import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _net_numpy
        BACKEND = "numpy"

WEIGHTS_FORMAT_VERSION = 1


class GradientPoisonedError(FloatingPointError):
    """Raised when NaN/Inf gradients reach the optimizer; training aborts."""


@dataclass
class MlpParams:
    """Weights/biases of a feedforward stack plus hidden activation tags.

    ``weights[l]`` has shape (fan_in, fan_out); hidden activations are
    'tanh' or 'relu', the output layer is linear.
    """

    weights: list
    biases: list
    hidden_activations: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        if len(self.hidden_activations) != len(self.weights) - 1:
            raise ValueError("need one activation tag per hidden layer")
        for tag in self.hidden_activations:
            if tag not in ("tanh", "relu"):
                raise ValueError(f"unknown activation {tag!r}")
        for l in range(len(self.weights) - 1):
            if self.weights[l].shape[1] != self.weights[l + 1].shape[0]:
                raise ValueError(f"layer {l} output dim does not chain into layer {l + 1}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def act_codes(self) -> np.ndarray:
        codes = [_ACT_CODES[t] for t in self.hidden_activations] + [_ACT_CODES["linear"]]
        return np.asarray(codes, dtype=np.int32)

    def arrays(self) -> list:
        """Flat [W0, b0, W1, b1, ...] view used by the optimizer."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activations,
        )

    def finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass
class AdamState:
    """First/second moment accumulators plus the step count and hyperparameters."""

    m: list
    v: list
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal embedding of a scalar in [0, 1].

    Frequencies form a strictly decreasing geometric sequence from
    ``base`` down to 1; the embedding is [sin(w t)..., cos(w t)...].
    """

    dim: int = 64
    base: float = 1000.0

    def __post_init__(self):
        if self.dim % 2 != 0 or self.dim < 2:
            raise ValueError("embedding dim must be a positive even integer")
        if self.base <= 1.0:
            raise ValueError("frequency base must exceed 1")

    @property
    def frequencies(self) -> np.ndarray:
        k = self.dim // 2
        return self.base ** (np.arange(k - 1, -1, -1, dtype=np.float64) / (k - 1))


def embed_time(t, emb: TimeEmbedding) -> np.ndarray:
    """Embed scalar t (or a batch of shape (B,)) into (..., dim)."""
    w = emb.frequencies
    phase = np.multiply.outer(np.asarray(t, dtype=np.float64), w)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def init_params(layer_dims, rng: np.random.Generator, activation: str = "tanh") -> MlpParams:
    """Fan-in-scaled uniform weights (std 1/sqrt(fan_in)), zero biases."""
    if len(layer_dims) < 2:
        raise ValueError("need at least input and output dims")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, (activation,) * (len(layer_dims) - 2))


def init_adam(params: MlpParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    arrays = params.arrays()
    return AdamState(
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def forward(params: MlpParams, x: np.ndarray):
    """Evaluate the stack on x of shape (input_dim,) or (B, input_dim).

    Returns (output, cache); hand the cache to backward() unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.ascontiguousarray(x.reshape(1, -1) if single else x)
    if xb.shape[1] != params.input_dim:
        raise ValueError(f"expected input dim {params.input_dim}, got {xb.shape[1]}")
    y, acts = _impl.mlp_forward(xb, params.weights, params.biases, params.act_codes)
    return (y[0] if single else y), acts


def backward(params: MlpParams, cache, grad_output: np.ndarray):
    """Exact gradients of forward; returns ((dW, db) pairs, grad wrt input)."""
    g = np.asarray(grad_output, dtype=np.float64)
    single = g.ndim == 1
    gb = np.ascontiguousarray(g.reshape(1, -1) if single else g)
    if gb.shape[1] != params.output_dim or gb.shape[0] != cache[-1].shape[0]:
        raise ValueError("grad_output shape does not match the cached forward")
    dW, db, gx = _impl.mlp_backward(gb, params.weights, params.act_codes, cache)
    return list(zip(dW, db)), (gx[0] if single else gx)


def adam_step(params: MlpParams, grads, state: AdamState):
    """Bias-corrected Adam update, in place; returns (params, state).

    ``grads`` is a list of (dW, db) per layer, as returned by backward().

    Raises:
        GradientPoisonedError: on any non-finite gradient entry.
    """
    flat_grads = []
    for l, (dW, db) in enumerate(grads):
        if not (np.isfinite(dW).all() and np.isfinite(db).all()):
            raise GradientPoisonedError(
                f"non-finite gradient in layer {l} at step {state.step + 1}"
            )
        flat_grads.extend((np.ascontiguousarray(dW), np.ascontiguousarray(db)))
    arrays = params.arrays()
    if any(g.shape != a.shape for g, a in zip(flat_grads, arrays)):
        raise ValueError("gradient shapes do not mirror the parameters")
    state.step += 1
    _impl.adam_update(
        arrays, flat_grads, state.m, state.v, state.step, state.lr, state.beta1, state.beta2, state.eps
    )
    return params, state


def save_params(path, params: MlpParams, role: str, extra: dict | None = None) -> None:
    """Write the versioned binary weight file (JSON header + float64 body)."""
    header = {
        "format": "keylift-weights",
        "format_version": WEIGHTS_FORMAT_VERSION,
        "role": role,
        "layer_dims": params.layer_dims,
        "activations": list(params.hidden_activations),
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for W, b in zip(params.weights, params.biases):
            f.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(path):
    """Read a weight file; returns (params, role, extra dict).

    Raises ValueError on version or size mismatch.
    """
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt weight file header: {exc}") from exc
        if header.get("format") != "keylift-weights":
            raise ValueError("not a keylift weight file")
        if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
            raise ValueError(
                f"weight format version {header.get('format_version')} unsupported"
            )
        dims = header["layer_dims"]
        body = f.read()
    expected = sum((dims[l] * dims[l + 1] + dims[l + 1]) * 8 for l in range(len(dims) - 1))
    if len(body) != expected:
        raise ValueError(f"weight file body truncated: {len(body)} bytes, expected {expected}")
    weights, biases, off = [], [], 0
    for l in range(len(dims) - 1):
        n = dims[l] * dims[l + 1]
        weights.append(
            np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(dims[l], dims[l + 1]).copy()
        )
        off += n * 8
        biases.append(np.frombuffer(body, dtype="<f8", count=dims[l + 1], offset=off).copy())
        off += dims[l + 1] * 8
    params = MlpParams(weights, biases, tuple(header["activations"]))
    return params, header["role"], header.get("extra", {})


@dataclass
class TrainLog:
    """Per-epoch loss history.

    epoch_losses holds the sample-weighted mean; epoch_medians the median
    over the epoch's batch losses, which is the robust descent signal when
    the loss distribution is heavy-tailed (the DSM loss is: its weighted
    kernel-score norm scales like 1/t near the small-time cutoff).
    """

    epoch_losses: list = field(default_factory=list)
    epoch_medians: list = field(default_factory=list)
    steps: int = 0


def train_mse(
    params: MlpParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    lr_drop_epochs=(),
    lr_drop_factor: float = 0.1,
    hygiene_every: int = 100,
) -> TrainLog:
    """Generic mean-squared-error trainer shared by the regressor and baseline.

    Loss per batch is the mean over samples of the summed squared error.
    The learning rate is multiplied by ``lr_drop_factor`` at each epoch in
    ``lr_drop_epochs``. Deterministic given the rng state.
    """
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    state = init_adam(params, lr)
    log = TrainLog()
    for epoch in range(epochs):
        if epoch in set(lr_drop_epochs):
            state.lr *= lr_drop_factor
        order = rng.permutation(n)
        total = 0.0
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = np.ascontiguousarray(inputs[idx])
            yb = targets[idx]
            out, cache = forward(params, xb)
            diff = out - yb
            loss = float(np.mean(np.sum(diff * diff, axis=1)))
            grad_out = 2.0 * diff / diff.shape[0]
            grads, _ = backward(params, cache, grad_out)
            adam_step(params, grads, state)
            total += loss * len(idx)
            batch_losses.append(loss)
            log.steps += 1
            if hygiene_every and log.steps % hygiene_every == 0 and not params.finite():
                raise GradientPoisonedError(f"non-finite parameter at step {log.steps}")
        log.epoch_losses.append(total / n)
        log.epoch_medians.append(float(np.median(batch_losses)))
    return log
