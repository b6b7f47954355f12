"""Feedforward sigmoid/softmax network: loss, gradient, curvature products.

Parameters for all layers live in one flat float64 vector ("param vector"):
for each layer, the (fan_in x fan_out) weight matrix in row-major order,
followed by its bias vector. All losses are *summed* over frames so that
results add exactly across disjoint batches; callers divide by frame count
when they want means.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: sizes per layer (input, hidden..., output) plus init seed.

    Hidden activations are logistic sigmoid; the output layer is linear
    logits consumed by softmax cross-entropy.
    """

    layer_sizes: tuple
    init_seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError("network needs at least input and output layers")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be >= 1, got {sizes}")

    @property
    def n_classes(self):
        return self.layer_sizes[-1]

    @property
    def input_dim(self):
        return self.layer_sizes[0]


def param_count(spec: NetworkSpec) -> int:
    """Total number of parameters: sum over layers of (fan_in + 1) * fan_out."""
    sizes = spec.layer_sizes
    return sum((nin + 1) * nout for nin, nout in zip(sizes[:-1], sizes[1:]))


def unpack_params(spec: NetworkSpec, params: np.ndarray):
    """Views (no copies) of the flat vector as per-layer (W, b) arrays."""
    if params.shape != (param_count(spec),):
        raise ConfigurationError(
            f"param vector has length {params.shape}, expected ({param_count(spec)},)"
        )
    layers = []
    off = 0
    sizes = spec.layer_sizes
    for nin, nout in zip(sizes[:-1], sizes[1:]):
        w = params[off : off + nin * nout].reshape(nin, nout)
        off += nin * nout
        b = params[off : off + nout]
        off += nout
        layers.append((w, b))
    return layers


def init_params(spec: NetworkSpec) -> np.ndarray:
    """Uniform weights on [-1/sqrt(fan_in), +1/sqrt(fan_in)], zero biases.

    Fully determined by ``spec.init_seed``.
    """
    rng = np.random.default_rng(spec.init_seed)
    params = np.zeros(param_count(spec))
    for w, _b in unpack_params(spec, params):
        r = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-r, r, size=w.shape)
    return params


@dataclass
class FrameBatch:
    """Labeled frames: features (n x input_dim), integer class labels (n,)."""

    features: np.ndarray
    labels: np.ndarray
    source_utterance_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigurationError("features must be a 2-d array of frames")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigurationError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} frames"
            )
        if self.frame_count < 1:
            raise ConfigurationError("batch must contain at least one frame")

    @property
    def frame_count(self):
        return self.features.shape[0]


@dataclass
class LossValue:
    """Summed cross-entropy (nats) over ``frame_count`` frames."""

    total: float
    frame_count: int

    @property
    def mean(self):
        return self.total / self.frame_count

    def __add__(self, other):
        return LossValue(self.total + other.total, self.frame_count + other.frame_count)


def _sigmoid(z):
    # piecewise form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_batch(spec, batch):
    if batch.features.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"feature dim {batch.features.shape[1]} != network input {spec.input_dim}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= spec.n_classes:
        raise ConfigurationError("labels outside [0, n_classes)")


def forward_activations(spec, params, features):
    """Forward pass. Returns (activations, logits) with activations[0] = input."""
    layers = unpack_params(spec, params)
    acts = [np.asarray(features, dtype=np.float64)]
    a = acts[0]
    for w, b in layers[:-1]:
        a = _sigmoid(a @ w + b)
        acts.append(a)
    w, b = layers[-1]
    return acts, a @ w + b


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    stable = logits - m
    return stable - np.log(np.exp(stable).sum(axis=1, keepdims=True))


def softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def forward_loss(spec, params, batch: FrameBatch) -> LossValue:
    """Summed softmax cross-entropy of the batch under ``params``."""
    _check_batch(spec, batch)
    _, logits = forward_activations(spec, params, batch.features)
    logp = _log_softmax(logits)
    total = -float(logp[np.arange(batch.frame_count), batch.labels].sum())
    if not np.isfinite(total):
        raise NumericError("non-finite loss", op="forward_loss")
    return LossValue(total, batch.frame_count)


def _backward(spec, params, acts, delta_out):
    """Accumulate dL/dparams given output-layer sensitivities ``delta_out``.

    The recursion is linear in the sensitivities, so the same pass serves
    both the exact gradient (delta = softmax - onehot) and the Gauss-Newton
    product (delta = H_L applied to a directional logit perturbation).
    """
    layers = unpack_params(spec, params)
    grad = np.zeros_like(params)
    gviews = unpack_params(spec, grad)
    delta = delta_out
    for l in range(len(layers) - 1, -1, -1):
        gw, gb = gviews[l]
        gw[...] = acts[l].T @ delta
        gb[...] = delta.sum(axis=0)
        if l > 0:
            a = acts[l]
            delta = (delta @ layers[l][0].T) * (a * (1.0 - a))
    return grad


def gradient(spec, params, batch: FrameBatch) -> np.ndarray:
    """Exact gradient of the summed batch loss, by backpropagation."""
    return loss_and_gradient(spec, params, batch)[1]


def loss_and_gradient(spec, params, batch: FrameBatch):
    """One forward/backward pass returning (LossValue, gradient)."""
    _check_batch(spec, batch)
    acts, logits = forward_activations(spec, params, batch.features)
    logp = _log_softmax(logits)
    total = -float(logp[np.arange(batch.frame_count), batch.labels].sum())
    probs = np.exp(logp)
    delta = probs
    delta[np.arange(batch.frame_count), batch.labels] -= 1.0
    grad = _backward(spec, params, acts, delta)
    if not (np.isfinite(total) and np.isfinite(grad).all()):
        raise NumericError("non-finite loss/gradient", op="loss_and_gradient")
    return LossValue(total, batch.frame_count), grad


def gnv_product(spec, params, batch: FrameBatch, v: np.ndarray, lam: float) -> np.ndarray:
    """Damped Gauss-Newton product (G + lam*I) v over the batch, matrix-free.

    G = J^T H_L J with J the Jacobian of the logits w.r.t. the parameters
    and H_L = diag(p) - p p^T the per-frame softmax cross-entropy Hessian
    in logit space. J v comes from a forward directional (R-) pass, H_L is
    applied per frame, and J^T folds back through the plain backward pass.
    G itself is never formed.
    """
    _check_batch(spec, batch)
    if v.shape != params.shape:
        raise ConfigurationError("direction vector length != param vector length")
    if lam < 0:
        raise ConfigurationError("damping must be nonnegative")
    layers = unpack_params(spec, params)
    vlayers = unpack_params(spec, np.asarray(v, dtype=np.float64))
    acts, logits = forward_activations(spec, params, batch.features)

    # directional forward pass: r_a carries d(activation)/d(eps) at eps=0
    r_a = np.zeros_like(acts[0])
    for l, ((w, _b), (vw, vb)) in enumerate(zip(layers, vlayers)):
        r_z = acts[l] @ vw + r_a @ w + vb
        if l < len(layers) - 1:
            a = acts[l + 1]
            r_a = (a * (1.0 - a)) * r_z
    jv = r_z  # directional logit perturbation, frames x classes

    probs = softmax(logits)
    hjv = probs * jv - probs * (probs * jv).sum(axis=1, keepdims=True)

    result = _backward(spec, params, acts, hjv)
    if lam > 0:
        result += lam * v
    if not np.isfinite(result).all():
        raise NumericError("non-finite curvature product", op="gnv_product")
    return result
