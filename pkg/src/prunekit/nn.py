"""Dense float64 engine for small sequential CNNs.

Forward and reverse passes for the layer kinds the pruning pipeline needs
(conv2d, relu, maxpool2d, flatten, linear, softmax cross-entropy head) plus
a momentum SGD step.  Tensors are plain numpy float64 arrays; batched
activations carry a leading batch axis.

Every function here is pure: inputs are never mutated and identical inputs
produce bit-identical outputs (reductions run in a fixed order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

CONV2D = "conv2d"
RELU = "relu"
MAXPOOL2D = "maxpool2d"
FLATTEN = "flatten"
LINEAR = "linear"
SOFTMAX_CE_HEAD = "softmax_ce_head"

LAYER_KINDS = (CONV2D, RELU, MAXPOOL2D, FLATTEN, LINEAR, SOFTMAX_CE_HEAD)


class ShapeError(ValueError):
    """A tensor dimension does not match the layer contract."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# Network description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network; only the fields for `kind` are used."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (0, 0)
    stride: int = 1
    padding: int = 0
    window: tuple[int, int] = (0, 0)
    in_features: int = 0
    out_features: int = 0


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv2d(in_channels: int, out_channels: int, kernel=3, stride: int = 1,
           padding: int = 0) -> LayerSpec:
    kh, kw = _pair(kernel)
    if min(in_channels, out_channels, kh, kw) < 1:
        raise ShapeError("conv2d: channel counts and kernel extents must be >= 1")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    return LayerSpec(CONV2D, in_channels=in_channels, out_channels=out_channels,
                     kernel=(kh, kw), stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def maxpool2d(window=2, stride: int | None = None) -> LayerSpec:
    wh, ww = _pair(window)
    if min(wh, ww) < 1:
        raise ShapeError("maxpool2d: window extents must be >= 1")
    return LayerSpec(MAXPOOL2D, window=(wh, ww), stride=int(stride if stride else wh))


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def linear(in_features: int, out_features: int) -> LayerSpec:
    if min(in_features, out_features) < 1:
        raise ShapeError("linear: feature counts must be >= 1")
    return LayerSpec(LINEAR, in_features=in_features, out_features=out_features)


def softmax_ce_head() -> LayerSpec:
    return LayerSpec(SOFTMAX_CE_HEAD)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers, input dims (c, h, w) and class count.

    Construction validates the whole chain: adjacent layers must be
    shape-compatible, the last layer must be the single softmax/cross-entropy
    head, and at least one conv2d must be present.
    """

    layers: tuple[LayerSpec, ...]
    input_dims: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        heads = [i for i, l in enumerate(self.layers) if l.kind == SOFTMAX_CE_HEAD]
        if heads != [len(self.layers) - 1]:
            raise ShapeError("network must end with exactly one softmax_ce_head")
        if not any(l.kind == CONV2D for l in self.layers):
            raise ShapeError("network must contain at least one conv2d layer")
        self.activation_dims()  # raises on any incompatibility

    def activation_dims(self) -> list[tuple[int, ...]]:
        """Output dims (without batch axis) of every layer in order."""
        dims: tuple[int, ...] = self.input_dims
        out = []
        for i, layer in enumerate(self.layers):
            dims = _layer_out_dims(layer, dims, i, self.num_classes)
            out.append(dims)
        return out

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == CONV2D]


def _layer_out_dims(layer: LayerSpec, dims: tuple[int, ...], i: int,
                    num_classes: int) -> tuple[int, ...]:
    if layer.kind == CONV2D:
        if len(dims) != 3:
            raise ShapeError(f"layer {i} (conv2d): expected (c, h, w) input, got {dims}")
        c, h, w = dims
        if c != layer.in_channels:
            raise ShapeError(f"layer {i} (conv2d): expected {layer.in_channels} input "
                             f"channels, got {c}")
        kh, kw = layer.kernel
        ho = (h + 2 * layer.padding - kh) // layer.stride + 1
        wo = (w + 2 * layer.padding - kw) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {i} (conv2d): kernel {layer.kernel} does not fit "
                             f"input {h}x{w} with padding {layer.padding}")
        return (layer.out_channels, ho, wo)
    if layer.kind == RELU:
        return dims
    if layer.kind == MAXPOOL2D:
        if len(dims) != 3:
            raise ShapeError(f"layer {i} (maxpool2d): expected (c, h, w) input, got {dims}")
        c, h, w = dims
        wh, ww = layer.window
        ho = (h - wh) // layer.stride + 1
        wo = (w - ww) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {i} (maxpool2d): window {layer.window} does not fit "
                             f"input {h}x{w}")
        return (c, ho, wo)
    if layer.kind == FLATTEN:
        return (int(np.prod(dims)),)
    if layer.kind == LINEAR:
        if len(dims) != 1 or dims[0] != layer.in_features:
            raise ShapeError(f"layer {i} (linear): expected ({layer.in_features},) input, "
                             f"got {dims}")
        return (layer.out_features,)
    if layer.kind == SOFTMAX_CE_HEAD:
        if len(dims) != 1 or dims[0] != num_classes:
            raise ShapeError(f"layer {i} (softmax_ce_head): expected ({num_classes},) "
                             f"logits, got {dims}")
        return dims
    raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    """Weight/bias pair for a conv2d or linear layer."""

    weights: np.ndarray
    bias: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())


def init_params(spec: NetworkSpec, seed=0) -> list[LayerParams | None]:
    """He-initialised weights, zero biases; deterministic for a given seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: list[LayerParams | None] = []
    for layer in spec.layers:
        if layer.kind == CONV2D:
            kh, kw = layer.kernel
            fan_in = layer.in_channels * kh * kw
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(layer.out_channels, layer.in_channels, kh, kw))
            params.append(LayerParams(as_tensor(w), np.zeros(layer.out_channels)))
        elif layer.kind == LINEAR:
            w = rng.normal(0.0, np.sqrt(2.0 / layer.in_features),
                           size=(layer.out_features, layer.in_features))
            params.append(LayerParams(as_tensor(w), np.zeros(layer.out_features)))
        else:
            params.append(None)
    return params


def copy_params(params: list[LayerParams | None]) -> list[LayerParams | None]:
    return [p.copy() if p is not None else None for p in params]


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Padded input and its strided (n, c, ho, wo, kh, kw) window view."""
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    hp, wp = xp.shape[2], xp.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return xp, win


def _conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None,
                  stride: int, padding: int) -> np.ndarray:
    c_out, c_in, kh, kw = weights.shape
    _, win = _conv_windows(x, kh, kw, stride, padding)
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    y = cols @ weights.reshape(c_out, -1).T
    if bias is not None:
        y = y + bias
    return np.ascontiguousarray(y.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))


def _conv_backward(x: np.ndarray, weights: np.ndarray, stride: int, padding: int,
                   d_out: np.ndarray):
    c_out, c_in, kh, kw = weights.shape
    n, _, h, w = x.shape
    xp, win = _conv_windows(x, kh, kw, stride, padding)
    ho, wo = d_out.shape[2], d_out.shape[3]

    dw = np.tensordot(d_out, win, axes=((0, 2, 3), (0, 2, 3)))
    db = d_out.sum(axis=(0, 2, 3))

    dmat = d_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    dcols = (dmat @ weights.reshape(c_out, -1)).reshape(n, ho, wo, c_in, kh, kw)
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
    return dx, dw, db


def conv2d_forward(x, weights, bias, mask=None, stride: int = 1,
                   padding: int = 0) -> np.ndarray:
    """Masked 2-D cross-correlation.

    out[i] = sum_j mask[j] * (x[j] star weights[i, j]) + bias[i]; input
    channels with mask[j] == 0 contribute nothing.  `x` may be a single
    (c, h, w) image or a (n, c, h, w) batch.
    """
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"input rank: expected 3 or 4 dims, got {x.ndim}")
    weights = as_tensor(weights)
    if weights.ndim != 4:
        raise ShapeError(f"weights rank: expected 4 dims, got {weights.ndim}")
    c_out, c_in = weights.shape[0], weights.shape[1]
    if x.shape[1] != c_in:
        raise ShapeError(f"input channels: expected {c_in}, got {x.shape[1]}")
    bias = as_tensor(bias)
    if bias.shape != (c_out,):
        raise ShapeError(f"bias length: expected {c_out}, got {bias.shape}")
    if mask is not None:
        mask = as_tensor(mask)
        if mask.shape != (c_in,):
            raise ShapeError(f"mask length: expected {c_in}, got {mask.shape}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        x = x * mask.reshape(1, -1, 1, 1)
    y = _conv_forward(x, weights, bias, stride, padding)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# Remaining layer ops
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(y_out: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * (y_out > 0.0)


def _pool_windows(x: np.ndarray, wh: int, ww: int, stride: int):
    win = sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::stride, ::stride]
    return win


def maxpool2d_forward(x: np.ndarray, window=(2, 2), stride: int = 2) -> np.ndarray:
    wh, ww = _pair(window)
    win = _pool_windows(x, wh, ww, stride)
    return win.max(axis=(4, 5))


def maxpool2d_backward(x: np.ndarray, window, stride: int,
                       d_out: np.ndarray) -> np.ndarray:
    """Gradient routed to each window's max; ties go to the lowest flat index."""
    wh, ww = _pair(window)
    win = _pool_windows(x, wh, ww, stride)
    n, c, ho, wo = win.shape[:4]
    idx = win.reshape(n, c, ho, wo, wh * ww).argmax(axis=4)
    rows = (np.arange(ho) * stride)[None, None, :, None] + idx // ww
    cols = (np.arange(wo) * stride)[None, None, None, :] + idx % ww
    dx = np.zeros_like(x)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, rows, cols), d_out)
    return dx


def linear_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weights.T + bias


def linear_backward(x: np.ndarray, weights: np.ndarray, d_out: np.ndarray):
    dw = d_out.T @ x
    db = d_out.sum(axis=0)
    dx = d_out @ weights
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy; for one sample this is -log(softmax(logits)[label])."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(labels)), labels]
    return float(np.mean(log_norm - picked))


# ---------------------------------------------------------------------------
# Whole-network passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Everything a forward pass produced: input, per-layer outputs, logits.

    outputs[i] is the (batched) output of layers[i]; the head's entry holds
    softmax probabilities and `logits` is the head's input.
    """

    x: np.ndarray
    outputs: list[np.ndarray]
    logits: np.ndarray


@dataclass
class Gradients:
    """Loss gradients for every layer of a network.

    weights[i] pairs with layers[i] (None for parameterless layers);
    activations[i] is dC/d(outputs[i]) and is None for the head slot, whose
    input gradient lives at the preceding layer.  `wrt_input` is dC/d(x).
    """

    weights: list[LayerParams | None]
    activations: list[np.ndarray | None]
    wrt_input: np.ndarray
    loss: float


def _mask_for(masks, i):
    if masks is None:
        return None
    return masks.get(i)


def forward_collect(spec: NetworkSpec, params: list[LayerParams | None], x,
                    masks: dict[int, np.ndarray] | None = None) -> ForwardTrace:
    """Run the (optionally channel-masked) network, keeping every activation.

    `masks` maps conv layer index -> binary vector over that conv's input
    channels; missing entries mean all-ones.
    """
    x = as_tensor(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != tuple(spec.input_dims):
        raise ShapeError(f"input dims: expected {tuple(spec.input_dims)}, "
                         f"got {x.shape[1:]}")
    cur = x
    outputs: list[np.ndarray] = []
    logits = None
    for i, layer in enumerate(spec.layers):
        if layer.kind == CONV2D:
            p = params[i]
            m = _mask_for(masks, i)
            if m is not None:
                cur = cur * as_tensor(m).reshape(1, -1, 1, 1)
            cur = _conv_forward(cur, p.weights, p.bias, layer.stride, layer.padding)
        elif layer.kind == RELU:
            cur = relu_forward(cur)
        elif layer.kind == MAXPOOL2D:
            cur = maxpool2d_forward(cur, layer.window, layer.stride)
        elif layer.kind == FLATTEN:
            cur = cur.reshape(cur.shape[0], -1)
        elif layer.kind == LINEAR:
            p = params[i]
            cur = linear_forward(cur, p.weights, p.bias)
        elif layer.kind == SOFTMAX_CE_HEAD:
            logits = cur
            cur = softmax(cur)
        outputs.append(cur)
    return ForwardTrace(x=x, outputs=outputs, logits=logits)


def backward_collect(spec: NetworkSpec, params: list[LayerParams | None],
                     trace: ForwardTrace, labels,
                     masks: dict[int, np.ndarray] | None = None) -> Gradients:
    """Backpropagate mean cross-entropy against `labels` through a forward trace."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = trace.x.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels: expected shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        bad = labels[(labels < 0) | (labels >= spec.num_classes)][0]
        raise ValueError(f"label {bad} out of range for {spec.num_classes} classes")

    loss = cross_entropy(trace.logits, labels)
    probs = trace.outputs[-1]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    grad = (probs - onehot) / n

    num_layers = len(spec.layers)
    weight_grads: list[LayerParams | None] = [None] * num_layers
    act_grads: list[np.ndarray | None] = [None] * num_layers
    if num_layers >= 2:
        act_grads[num_layers - 2] = grad

    for i in range(num_layers - 2, -1, -1):
        layer = spec.layers[i]
        x_in = trace.outputs[i - 1] if i > 0 else trace.x
        if layer.kind == CONV2D:
            m = _mask_for(masks, i)
            xm = x_in * as_tensor(m).reshape(1, -1, 1, 1) if m is not None else x_in
            dx, dw, db = _conv_backward(xm, params[i].weights, layer.stride,
                                        layer.padding, grad)
            if m is not None:
                dx = dx * as_tensor(m).reshape(1, -1, 1, 1)
            weight_grads[i] = LayerParams(dw, db)
            grad = dx
        elif layer.kind == RELU:
            grad = relu_backward(trace.outputs[i], grad)
        elif layer.kind == MAXPOOL2D:
            grad = maxpool2d_backward(x_in, layer.window, layer.stride, grad)
        elif layer.kind == FLATTEN:
            grad = grad.reshape(x_in.shape)
        elif layer.kind == LINEAR:
            dx, dw, db = linear_backward(x_in, params[i].weights, grad)
            weight_grads[i] = LayerParams(dw, db)
            grad = dx
        if i > 0:
            act_grads[i - 1] = grad

    return Gradients(weights=weight_grads, activations=act_grads,
                     wrt_input=grad, loss=loss)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: list[LayerParams | None], grads: list[LayerParams | None],
             lr: float, momentum: float = 0.0, nesterov: bool = False,
             weight_decay: float = 0.0,
             velocity: list[LayerParams | None] | None = None):
    """One SGD step with classic momentum; returns (new_params, new_velocity).

    Weight decay is added to the gradient before the momentum update.  With
    nesterov, the step uses g + momentum * v as in the usual lookahead form.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if velocity is None:
        velocity = [LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias))
                    if p is not None else None for p in params]
    new_params: list[LayerParams | None] = []
    new_velocity: list[LayerParams | None] = []
    for p, g, v in zip(params, grads, velocity):
        if p is None:
            new_params.append(None)
            new_velocity.append(None)
            continue
        if g.weights.shape != p.weights.shape or g.bias.shape != p.bias.shape:
            raise ShapeError("gradient shape does not match parameter shape")
        upd_w, vel_w = _sgd_update(p.weights, g.weights, v.weights, lr, momentum,
                                   nesterov, weight_decay)
        upd_b, vel_b = _sgd_update(p.bias, g.bias, v.bias, lr, momentum,
                                   nesterov, weight_decay)
        new_params.append(LayerParams(upd_w, upd_b))
        new_velocity.append(LayerParams(vel_w, vel_b))
    return new_params, new_velocity


def _sgd_update(w, g, v, lr, momentum, nesterov, weight_decay):
    g = g + weight_decay * w
    v_new = momentum * v + g
    step = g + momentum * v_new if nesterov else v_new
    return w - lr * step, v_new
