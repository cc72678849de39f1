"""Small dense-tensor ConvNet/MLP with hand-written backpropagation.

Images enter as ``(N, H, W, C)`` float64 arrays and stay channels-last through
the convolutional trunk.  Every parametric layer owns one flat float64 vector
(weights followed by bias), so a layer's parameters and gradients can be fed
to the gradient-mixing solver without any reshaping.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool", "flatten", "softmax-head")
PARAMETRIC = ("conv2d", "dense", "softmax-head")

CHECKPOINT_MAGIC = b"GMXCKPT\x00"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Input or parameter shapes do not fit the network."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0  # in channels (conv2d) or in features (dense/head)
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAMETRIC and (self.in_size < 1 or self.out_size < 1):
            raise ValueError(f"{self.kind} needs positive in/out sizes")
        if self.kind in ("conv2d", "maxpool") and self.kernel < 1:
            raise ValueError(f"{self.kind} needs a kernel size")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAMETRIC

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_size, self.in_size, self.kernel, self.kernel)
        return (self.out_size, self.in_size)

    @property
    def n_params(self) -> int:
        if not self.has_params:
            return 0
        return int(np.prod(self.weight_shape)) + self.out_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def conv(in_ch, out_ch, kernel=3, stride=1, padding=1) -> LayerSpec:
    return LayerSpec("conv2d", in_ch, out_ch, kernel, stride, padding)


def dense(in_features, out_features) -> LayerSpec:
    return LayerSpec("dense", in_features, out_features)


def head(in_features, n_classes) -> LayerSpec:
    return LayerSpec("softmax-head", in_features, n_classes)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


def maxpool(kernel=2) -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=kernel)


def digit_convnet(image_size=28, channels=1, widths=(8, 8, 16, 16), hidden=64):
    """4 conv layers + 1 hidden fc layer; the classifier head is the second fc.

    Returns ``(trunk_layers, trunk_width)``.
    """
    c1, c2, c3, c4 = widths
    layers = [
        conv(channels, c1), RELU, conv(c1, c2), RELU, maxpool(2),
        conv(c2, c3), RELU, conv(c3, c4), RELU, maxpool(2),
        FLATTEN,
    ]
    side = image_size // 4
    layers += [dense(side * side * c4, hidden), RELU]
    return layers, hidden


# ----------------------------------------------------------------------------
# layer primitives


def _split(spec: LayerSpec, theta: np.ndarray):
    n_w = int(np.prod(spec.weight_shape))
    return theta[:n_w].reshape(spec.weight_shape), theta[n_w:]


def _conv_forward(spec, theta, x):
    w, b = _split(spec, theta)
    n, h, wd, c = x.shape
    if c != spec.in_size:
        raise DimensionError(f"conv2d expects {spec.in_size} channels, got {c}")
    k, s, p = spec.kernel, spec.stride, spec.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    oh = (h + 2 * p - k) // s + 1
    ow = (wd + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError("conv2d kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    cols = win.reshape(n * oh * ow, c * k * k)
    wmat = w.reshape(spec.out_size, -1)
    out = cols @ wmat.T + b
    return out.reshape(n, oh, ow, spec.out_size), (cols, xp.shape, oh, ow)


def _conv_backward(spec, theta, cache, dy, need_dx=True):
    w, _ = _split(spec, theta)
    cols, xp_shape, oh, ow = cache
    k, s, p = spec.kernel, spec.stride, spec.padding
    dmat = dy.reshape(-1, spec.out_size)
    dw = dmat.T @ cols
    db = dmat.sum(axis=0)
    dtheta = np.concatenate([dw.ravel(), db])
    if not need_dx:
        return None, dtheta
    if s == 1 and p <= k - 1:
        # stride-1 input gradient is a full convolution with the flipped kernel
        q = k - 1 - p
        dyp = np.pad(dy, ((0, 0), (q, q), (q, q), (0, 0))) if q else dy
        h, wd = xp_shape[1] - 2 * p, xp_shape[2] - 2 * p
        win = np.lib.stride_tricks.sliding_window_view(dyp, (k, k), axis=(1, 2))[:, :h, :wd]
        wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(spec.in_size, -1)
        dx = win.reshape(-1, spec.out_size * k * k) @ wf.T
        return dx.reshape(xp_shape[0], h, wd, spec.in_size), dtheta
    wk = w.transpose(2, 3, 0, 1)
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] += dy @ wk[i, j]
    dx = dxp[:, p : xp_shape[1] - p, p : xp_shape[2] - p, :] if p else dxp
    return dx, dtheta


def _dense_forward(spec, theta, x):
    if x.ndim != 2 or x.shape[1] != spec.in_size:
        raise DimensionError(f"{spec.kind} expects {spec.in_size} features, got shape {x.shape}")
    w, b = _split(spec, theta)
    return x @ w.T + b, x


def _dense_backward(spec, theta, x, dy):
    w, _ = _split(spec, theta)
    return dy @ w, np.concatenate([(dy.T @ x).ravel(), dy.sum(axis=0)])


def _maxpool_forward(spec, x):
    k = spec.kernel
    n, h, w, c = x.shape
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise DimensionError("maxpool window larger than input")
    xc = x[:, : oh * k, : ow * k, :]
    win = xc.reshape(n, oh, k, ow, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _maxpool_backward(spec, cache, dy):
    k = spec.kernel
    shape, arg = cache
    n, oh, ow, c = dy.shape
    dwin = np.zeros((n, oh, ow, c, k * k))
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[:, : oh * k, : ow * k, :] = (
        dwin.reshape(n, oh, ow, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, oh * k, ow * k, c)
    )
    return dx


def layer_forward(spec: LayerSpec, theta, x):
    """Returns ``(output, cache)``."""
    kind = spec.kind
    if kind == "conv2d":
        if x.ndim != 4:
            raise DimensionError(f"conv2d expects a 4-d batch, got shape {x.shape}")
        return _conv_forward(spec, theta, x)
    if kind in ("dense", "softmax-head"):
        return _dense_forward(spec, theta, x)
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "maxpool":
        if x.ndim != 4:
            raise DimensionError(f"maxpool expects a 4-d batch, got shape {x.shape}")
        return _maxpool_forward(spec, x)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise ValueError(kind)


def layer_backward(spec: LayerSpec, theta, cache, dy, need_dx=True):
    """Returns ``(d_input, d_theta or None)``; ``d_input`` may be None when not needed."""
    kind = spec.kind
    if kind == "conv2d":
        return _conv_backward(spec, theta, cache, dy, need_dx)
    if kind in ("dense", "softmax-head"):
        return _dense_backward(spec, theta, cache, dy)
    if kind == "relu":
        return dy * cache, None
    if kind == "maxpool":
        return _maxpool_backward(spec, cache, dy), None
    if kind == "flatten":
        return dy.reshape(cache), None
    raise ValueError(kind)


# ----------------------------------------------------------------------------
# network containers


@dataclass
class NetworkParams:
    """Trunk layers shared by every domain plus one classifier head per label space.

    ``trunk`` holds one flat parameter vector per *parametric* trunk layer, in
    order; ``heads`` maps head id to the flat vector of its classifier layer.
    """

    layers: tuple[LayerSpec, ...]
    head_specs: dict[str, LayerSpec]
    trunk: list[np.ndarray]
    heads: dict[str, np.ndarray]
    rng_seed: int = 0

    def __post_init__(self):
        self.layers = tuple(self.layers)
        param_layers = [s for s in self.layers if s.has_params]
        if len(param_layers) != len(self.trunk):
            raise DimensionError(
                f"{len(param_layers)} parametric trunk layers but {len(self.trunk)} parameter tensors"
            )
        for spec, theta in zip(param_layers, self.trunk):
            if theta.shape != (spec.n_params,):
                raise DimensionError(f"{spec.kind} expects {spec.n_params} params, got {theta.shape}")
        widths = {s.in_size for s in self.head_specs.values()}
        if len(widths) > 1:
            raise DimensionError("all heads must share the trunk output width")
        if set(self.head_specs) != set(self.heads):
            raise DimensionError("head specs and head parameters disagree")
        for hid, spec in self.head_specs.items():
            if spec.kind != "softmax-head":
                raise ValueError(f"head {hid!r} must be a softmax-head layer")
            if self.heads[hid].shape != (spec.n_params,):
                raise DimensionError(f"head {hid!r} expects {spec.n_params} params")

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.has_params]

    @property
    def depth(self) -> int:
        """Total depth L counting the head; the trunk has L-1 layers."""
        return len(self.trunk) + 1

    def n_classes(self, head_id: str) -> int:
        return self._head_spec(head_id).out_size

    def _head_spec(self, head_id):
        try:
            return self.head_specs[head_id]
        except KeyError:
            raise KeyError(f"unknown head {head_id!r}") from None

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.layers,
            dict(self.head_specs),
            [t.copy() for t in self.trunk],
            {k: v.copy() for k, v in self.heads.items()},
            self.rng_seed,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate(self.trunk + [self.heads[h] for h in sorted(self.heads)])


def _init_layer(spec: LayerSpec, rng: np.random.Generator) -> np.ndarray:
    # He-style uniform: Var(w) = 2 / fan_in; bias starts at zero.
    fan_in = int(np.prod(spec.weight_shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=int(np.prod(spec.weight_shape)))
    return np.concatenate([w, np.zeros(spec.out_size)])


def init_network(layers: Sequence[LayerSpec], heads: dict[str, int], seed: int,
                 trunk_width: int | None = None) -> NetworkParams:
    """Builds a randomly initialised network.

    ``heads`` maps head id to number of classes.  ``trunk_width`` defaults to
    the output size of the last parametric trunk layer.
    """
    layers = tuple(layers)
    param_layers = [s for s in layers if s.has_params]
    if trunk_width is None:
        trunk_width = param_layers[-1].out_size
    rng = np.random.default_rng(seed)
    trunk = [_init_layer(s, rng) for s in param_layers]
    head_specs = {h: head(trunk_width, n) for h, n in heads.items()}
    head_params = {h: _init_layer(head_specs[h], rng) for h in sorted(heads)}
    return NetworkParams(layers, head_specs, trunk, head_params, seed)


def _trunk_forward(params: NetworkParams, batch: np.ndarray):
    x = np.asarray(batch, dtype=np.float64)
    caches = []
    it = iter(params.trunk)
    for spec in params.layers:
        theta = next(it) if spec.has_params else None
        x, cache = layer_forward(spec, theta, x)
        caches.append(cache)
    return x, caches


def forward(params: NetworkParams, head_id: str, batch: np.ndarray) -> np.ndarray:
    """Logits of shape ``(N, n_classes)`` for the given head."""
    spec = params._head_spec(head_id)
    feats, _ = _trunk_forward(params, batch)
    logits, _ = layer_forward(spec, params.heads[head_id], feats)
    return logits


# ----------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy_loss(logits, labels):
    """Mean cross entropy; returns ``(loss, softmax_probs)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("need at least one row of logits")
    if labels.shape != (logits.shape[0],):
        raise ValueError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


def _check_soft_targets(targets, n_classes):
    if targets.ndim != 2 or targets.shape[1] != n_classes:
        raise ValueError("soft targets must be (N, n_classes)")
    if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("soft target rows must be non-negative and sum to 1")


def kl_soft_loss(logits, soft_targets, direction="target||model"):
    """Mean KL divergence between soft targets and the model's softmax.

    ``direction="target||model"`` computes KL(y || p); ``"model||target"``
    computes KL(p || y).  Zero-probability target entries contribute 0 in the
    first form.  Returns ``(loss, softmax_probs)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(soft_targets, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("need at least one row of logits")
    _check_soft_targets(y, logits.shape[1])
    logp = log_softmax(logits)
    p = np.exp(logp)
    if direction == "target||model":
        pos = y > 0
        terms = np.zeros_like(y)
        terms[pos] = y[pos] * (np.log(y[pos]) - logp[pos])
    elif direction == "model||target":
        terms = p * (logp - np.log(np.maximum(y, 1e-12)))
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    # clamp tiny negative rounding so the loss is never reported below zero
    return max(float(terms.sum(axis=1).mean()), 0.0), p


def _dlogits(loss, logits, targets, kl_direction):
    n = logits.shape[0]
    if loss == "ce":
        value, p = cross_entropy_loss(logits, targets)
        g = p.copy()
        g[np.arange(n), targets] -= 1.0
    elif loss == "kl":
        value, p = kl_soft_loss(logits, targets, kl_direction)
        y = np.asarray(targets, dtype=np.float64)
        if kl_direction == "target||model":
            g = p - y
        else:
            a = np.log(p) - np.log(np.maximum(y, 1e-12))
            g = p * (a - (p * a).sum(axis=1, keepdims=True))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, g / n


# ----------------------------------------------------------------------------
# gradients


@dataclass
class GradientSet:
    trunk_grads: list[np.ndarray]
    head_grads: dict[str, np.ndarray] = field(default_factory=dict)
    batch_size: int = 0
    loss: float = float("nan")

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet([c * g for g in self.trunk_grads],
                           {h: c * g for h, g in self.head_grads.items()},
                           self.batch_size, self.loss)


def backward(params: NetworkParams, head_id: str, batch, targets, loss="ce",
             kl_direction="target||model") -> GradientSet:
    """Exact gradient of the mean loss w.r.t. every trunk layer and the used head.

    ``loss="ce"`` takes integer labels, ``loss="kl"`` takes soft probability rows.
    """
    spec = params._head_spec(head_id)
    feats, caches = _trunk_forward(params, batch)
    logits, head_cache = layer_forward(spec, params.heads[head_id], feats)
    if loss == "ce":
        targets = np.asarray(targets)
    value, dy = _dlogits(loss, logits, targets, kl_direction)
    dx, dhead = layer_backward(spec, params.heads[head_id], head_cache, dy)
    grads = [None] * len(params.trunk)
    idx = len(params.trunk)
    for pos in range(len(params.layers) - 1, -1, -1):
        spec_l, cache = params.layers[pos], caches[pos]
        theta = None
        if spec_l.has_params:
            idx -= 1
            theta = params.trunk[idx]
        dx, dtheta = layer_backward(spec_l, theta, cache, dx, need_dx=pos > 0)
        if dtheta is not None:
            grads[idx] = dtheta
    return GradientSet(grads, {head_id: dhead}, len(logits), value)


def loss_value(params: NetworkParams, head_id: str, batch, targets, loss="ce",
               kl_direction="target||model") -> float:
    logits = forward(params, head_id, batch)
    if loss == "ce":
        return cross_entropy_loss(logits, targets)[0]
    return kl_soft_loss(logits, targets, kl_direction)[0]


# ----------------------------------------------------------------------------
# optimisation


class MomentumState:
    """Velocity buffers keyed like the parameters; created lazily at zero."""

    def __init__(self):
        self.trunk: dict[int, np.ndarray] = {}
        self.heads: dict[str, np.ndarray] = {}

    def copy(self) -> "MomentumState":
        new = MomentumState()
        new.trunk = {k: v.copy() for k, v in self.trunk.items()}
        new.heads = {k: v.copy() for k, v in self.heads.items()}
        return new


def _momentum_update(theta, g, v, lr, momentum):
    if g.shape != theta.shape:
        raise DimensionError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
    if v is None:
        v = np.zeros_like(theta)
    elif v.shape != theta.shape:
        raise DimensionError("velocity buffer misaligned with parameters")
    v *= momentum
    v += g
    theta -= lr * v
    return v


def sgd_momentum_step(params: NetworkParams, grads: GradientSet, lr: float, momentum: float,
                      state: MomentumState, head_lr: float | None = None) -> NetworkParams:
    """In-place SGD with heavy-ball momentum: ``v = m*v + g; theta -= lr*v``.

    Heads absent from ``grads.head_grads`` keep both parameters and velocity.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if len(grads.trunk_grads) != len(params.trunk):
        raise DimensionError("gradient set has the wrong number of trunk layers")
    head_lr = lr if head_lr is None else head_lr
    for l, (theta, g) in enumerate(zip(params.trunk, grads.trunk_grads)):
        state.trunk[l] = _momentum_update(theta, g, state.trunk.get(l), lr, momentum)
    for h, g in grads.head_grads.items():
        if h not in params.heads:
            raise KeyError(f"unknown head {h!r}")
        state.heads[h] = _momentum_update(params.heads[h], g, state.heads.get(h), head_lr, momentum)
    return params


# ----------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic, uint32 LE header length, UTF-8 JSON header
# {"format_version", "rng_seed", "layers", "heads": [[id, spec], ...]},
# then float64 LE arrays for each parametric trunk layer in order, then each
# head in header order.  Extra metadata lives under the header's "meta" key.


def save_checkpoint(params: NetworkParams, path, meta: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "rng_seed": int(params.rng_seed),
        "layers": [s.to_dict() for s in params.layers],
        "heads": [[h, params.head_specs[h].to_dict()] for h in sorted(params.heads)],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for theta in params.trunk:
        buf.write(theta.astype("<f8").tobytes())
    for h in sorted(params.heads):
        buf.write(params.heads[h].astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, with_meta=False):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a gradmix checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    layers = tuple(LayerSpec(**d) for d in header["layers"])
    head_specs = {h: LayerSpec(**d) for h, d in header["heads"]}
    off = 12 + hlen

    def take(n):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr

    try:
        trunk = [take(s.n_params) for s in layers if s.has_params]
        heads = {h: take(head_specs[h].n_params) for h, _ in header["heads"]}
    except ValueError as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    params = NetworkParams(layers, head_specs, trunk, heads, header["rng_seed"])
    return (params, header["meta"]) if with_meta else params
