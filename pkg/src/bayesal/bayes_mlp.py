"""Multilayer perceptron with Bernoulli weight masks.

The variational family over network weights is ``omega = theta * eps`` with
every weight entry ``eps_i ~ Bernoulli(0.5)``.  Biases are never masked.
Forward and backward passes are written out by hand for a plain stack of
dense layers (smooth ``tanh`` hidden units, softmax output).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
MASK_KEEP_PROB = 0.5
CHECKPOINT_MAGIC = "bayesal-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or mask dimensions do not match the network."""


class TrainingDivergence(RuntimeError):
    """Raised when the training loss becomes non-finite."""


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
}


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Base parameters ``theta`` of the network.

    ``weights[l]`` has shape ``(n_in, n_out)`` so a layer computes ``x @ W + b``.
    The last layer is always followed by a softmax.
    """

    weights: tuple
    biases: tuple
    hidden_activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias vector per weight matrix")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: expects {w.shape[0]} inputs, "
                                 f"previous layer emits {self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality of all parameters."""
        return (self.hidden_activation == other.hidden_activation
                and self.sizes == other.sizes
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


@dataclass(frozen=True, eq=False)
class MaskedParameters:
    """One Monte-Carlo draw ``omega = theta * eps`` of the weights."""

    params: ModelParams
    masks: tuple
    seed: int
    index: int

    @property
    def weights(self) -> tuple:
        return tuple(w * e for w, e in zip(self.params.weights, self.masks))


def init_params(sizes: Sequence[int], seed: int, scale: float = 1.0,
                hidden_activation: str = "tanh") -> ModelParams:
    """Glorot-style random initialisation for layer sizes ``(in, h1, ..., J)``."""
    if len(sizes) < 2:
        raise ShapeError("need at least an input and an output size")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = scale * np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return ModelParams(tuple(weights), tuple(biases), hidden_activation)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mask_arrays(params: ModelParams, mask) -> tuple:
    masks = mask.masks if isinstance(mask, MaskedParameters) else tuple(mask)
    if len(masks) != len(params.weights):
        raise ShapeError(f"mask has {len(masks)} layers, network has {len(params.weights)}")
    for i, (w, e) in enumerate(zip(params.weights, masks)):
        if np.shape(e) != w.shape:
            raise ShapeError(f"layer {i}: mask shape {np.shape(e)} != weight shape {w.shape}")
    return masks


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.n_inputs or x.ndim not in (1, 2):
        raise ShapeError(f"input shape {x.shape} incompatible with {params.n_inputs} inputs")
    return x


def _forward_layers(weights, biases, act, x):
    """Return the list of layer outputs; the last entry holds class probabilities."""
    outs = [x]
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        h = act(h @ w + b)
        outs.append(h)
    outs.append(softmax(h @ weights[-1] + biases[-1]))
    return outs


def forward(params: ModelParams, mask, x) -> np.ndarray:
    """Class distribution(s) for ``x`` under the masked weights ``theta * eps``.

    ``x`` may be a single fused feature vector or a 2-D batch; ``mask`` is a
    :class:`MaskedParameters` or a sequence of per-layer 0/1 arrays.
    """
    masks = _mask_arrays(params, mask)
    x = _check_input(params, x)
    weights = [w * e for w, e in zip(params.weights, masks)]
    act = _ACTIVATIONS[params.hidden_activation][0]
    return _forward_layers(weights, params.biases, act, x)[-1]


def sample_masks(params: ModelParams, M: int, seed: int) -> list[MaskedParameters]:
    """Draw ``M`` i.i.d. Bernoulli(0.5) weight masks, reproducibly from ``seed``."""
    if M < 1:
        raise ValueError(f"need at least one mask draw, got M={M}")
    rng = np.random.default_rng(seed)
    draws = []
    for m in range(M):
        masks = tuple((rng.random(w.shape) < MASK_KEEP_PROB).astype(float)
                      for w in params.weights)
        draws.append(MaskedParameters(params, masks, seed, m))
    return draws


def loss_and_grad(params: ModelParams, mask, X, y, l2: float = 0.0):
    """Mean cross-entropy of a minibatch under one mask, plus its gradient.

    The optional ``l2`` term stands in for the weight-prior KL and is applied
    to the unmasked weights ``theta``.  Returns ``(loss, dW, db)`` where
    ``dW``/``db`` are lists matching ``params.weights``/``params.biases``.
    """
    masks = _mask_arrays(params, mask)
    X = np.atleast_2d(_check_input(params, X))
    return _loss_and_grad(params.weights, params.biases, params.hidden_activation,
                          masks, X, np.asarray(y, dtype=int), l2)


def _loss_and_grad(theta, biases, activation, masks, X, y, l2):
    act, dact = _ACTIVATIONS[activation]
    weights = [w * e for w, e in zip(theta, masks)]
    outs = _forward_layers(weights, biases, act, X)
    probs = outs[-1]
    n = X.shape[0]
    rows = np.arange(n)
    loss = -np.mean(np.log(np.maximum(probs[rows, y], LOG_FLOOR)))
    if l2:
        loss += l2 * sum(float(np.sum(w * w)) for w in theta)

    delta = probs.copy()
    delta[rows, y] -= 1.0
    delta /= n
    dW, db = [None] * len(weights), [None] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        a_in = outs[layer]
        dW[layer] = (a_in.T @ delta) * masks[layer]
        db[layer] = delta.sum(axis=0)
        if layer:
            delta = (delta @ weights[layer].T) * dact(a_in)
    if l2:
        dW = [g + 2.0 * l2 * w for g, w in zip(dW, theta)]
    return float(loss), dW, db


def train_epochs(params: ModelParams, X, y, epochs: int, lr: float, batch_size: int,
                 seed: int, l2: float = 0.0) -> ModelParams:
    """Plain minibatch SGD on the single-sample Monte-Carlo ELBO.

    A fresh weight mask is drawn for every minibatch.  ``y`` holds 0-based
    class indices.  Raises :class:`TrainingDivergence` on a non-finite loss.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if epochs == 0:
        return params
    if np.any(y < 0) or np.any(y >= params.n_classes):
        raise ValueError("labels out of range for the output layer")

    rng = np.random.default_rng(seed)
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    n = X.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            masks = [(rng.random(w.shape) < MASK_KEEP_PROB).astype(float) for w in weights]
            loss, dW, db = _loss_and_grad(weights, biases, params.hidden_activation,
                                          masks, X[idx], y[idx], l2)
            if not np.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {start}; "
                    f"max |W| = {max(float(np.abs(w).max()) for w in weights):.3g}, lr = {lr}")
            for w, g in zip(weights, dW):
                w -= lr * g
            for b, g in zip(biases, db):
                b -= lr * g
    return ModelParams(tuple(weights), tuple(biases), params.hidden_activation)


@dataclass(frozen=True, eq=False)
class PredictiveMatrix:
    """``M x J`` class distributions for one item, one row per weight draw."""

    item_id: int
    probs: np.ndarray
    mask_seed: int

    def __post_init__(self):
        p = self.probs
        if p.ndim != 2 or p.shape[0] < 1:
            raise ShapeError(f"predictive matrix must be M x J with M >= 1, got {p.shape}")
        if np.any(p < 0) or np.any(p > 1) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
            raise ValueError(f"item {self.item_id}: rows are not probability vectors")

    @property
    def M(self) -> int:
        return self.probs.shape[0]

    @property
    def J(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class PredictiveBatch:
    """Predictive matrices for many items, stacked as ``(U, M, J)``."""

    ids: np.ndarray
    probs: np.ndarray
    mask_seed: int

    def __post_init__(self):
        if self.probs.ndim != 3 or self.probs.shape[0] != len(self.ids):
            raise ShapeError(f"expected ({len(self.ids)}, M, J) probabilities, got {self.probs.shape}")

    @property
    def M(self) -> int:
        return self.probs.shape[1]

    @property
    def J(self) -> int:
        return self.probs.shape[2]

    def __len__(self):
        return len(self.ids)

    def matrices(self) -> list[PredictiveMatrix]:
        return [PredictiveMatrix(int(i), p, self.mask_seed) for i, p in zip(self.ids, self.probs)]

    @classmethod
    def from_matrices(cls, pms: Sequence[PredictiveMatrix]) -> "PredictiveBatch":
        if not pms:
            raise ValueError("no predictive matrices")
        shapes = {pm.probs.shape for pm in pms}
        seeds = {pm.mask_seed for pm in pms}
        if len(shapes) != 1 or len(seeds) != 1:
            raise ValueError(f"matrices disagree on shape {shapes} or mask seed {seeds}")
        return cls(np.array([pm.item_id for pm in pms]), np.stack([pm.probs for pm in pms]),
                   seeds.pop())


def _stack_draws(masks: Sequence[MaskedParameters]):
    if not masks:
        raise ValueError("need at least one mask draw")
    seeds = {m.seed for m in masks}
    if len(seeds) != 1:
        raise ValueError(f"mask draws come from several seeds: {sorted(seeds)}")
    return seeds.pop()


def predictive_matrix(params: ModelParams, masks: Sequence[MaskedParameters], item_id: int,
                      x) -> PredictiveMatrix:
    """Row ``m`` is ``forward(params, masks[m], x)``."""
    seed = _stack_draws(masks)
    x = _check_input(params, x)
    if x.ndim != 1:
        raise ShapeError("predictive_matrix takes a single feature vector")
    rows = np.stack([forward(params, m, x) for m in masks])
    return PredictiveMatrix(int(item_id), rows, seed)


def predictive_batch(params: ModelParams, masks: Sequence[MaskedParameters], ids,
                     X) -> PredictiveBatch:
    """Predictive matrices for a whole set of items at once."""
    seed = _stack_draws(masks)
    X = np.atleast_2d(_check_input(params, X))
    out = np.empty((X.shape[0], len(masks), params.n_classes))
    for m, draw in enumerate(masks):
        out[:, m, :] = forward(params, draw, X)
    return PredictiveBatch(np.asarray(ids), out, seed)


def posterior_mean(pm) -> np.ndarray:
    """Average class distribution over the weight draws.

    Accepts a :class:`PredictiveMatrix`, a :class:`PredictiveBatch` or a raw
    array whose second-to-last axis indexes draws.
    """
    probs = pm.probs if isinstance(pm, (PredictiveMatrix, PredictiveBatch)) else np.asarray(pm)
    return probs.mean(axis=-2)


def save_params(params: ModelParams, path) -> None:
    """Write a versioned text checkpoint (17 significant digits, row-major)."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"activation {params.hidden_activation}",
             "sizes " + " ".join(str(s) for s in params.sizes)]
    for w, b in zip(params.weights, params.biases):
        lines.append(" ".join(f"{v:.17g}" for v in w.ravel()))
        lines.append(" ".join(f"{v:.17g}" for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> ModelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    activation = lines[1].split()[1]
    sizes = [int(s) for s in lines[2].split()[1:]]
    body = lines[3:]
    if len(body) != 2 * (len(sizes) - 1):
        raise ValueError(f"{path}: expected {2 * (len(sizes) - 1)} value lines, got {len(body)}")
    weights, biases = [], []
    for layer, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = np.array([float(v) for v in body[2 * layer].split()])
        b = np.array([float(v) for v in body[2 * layer + 1].split()])
        if w.size != n_in * n_out or b.size != n_out:
            raise ValueError(f"{path}: layer {layer} has wrong number of values")
        weights.append(w.reshape(n_in, n_out))
        biases.append(b)
    return ModelParams(tuple(weights), tuple(biases), activation)
