"""Convolutional residual denoiser with hand-written forward and reverse passes.

Layout: a length-``2*S*S_bar`` vector (real parts of all SAs, then imaginary
parts) becomes ``2S`` feature maps of ``side x side`` pixels, map ``c = part*S + s``.
Internally activations are channels-last, ``(batch, side, side, channels)``.

Network::

    x0   = lift3x3(maps)
    x_b  = x_{b-1} + LN2(conv3x3(relu(LN1(conv3x3(x_{b-1})))))     b = 1..B
    out  = skip * u + vec(head2_1x1(relu(head1_1x1(x_B))))
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ArrayGeometry

LN_EPS = 1e-5


def param_shapes(S: int, C: int, B: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"lift.w": (3, 3, 2 * S, C), "lift.b": (C,)}
    for b in range(B):
        for j in (1, 2):
            shapes[f"block{b}.conv{j}.w"] = (3, 3, C, C)
            shapes[f"block{b}.conv{j}.b"] = (C,)
            shapes[f"block{b}.ln{j}.g"] = (C,)
            shapes[f"block{b}.ln{j}.b"] = (C,)
    shapes["head1.w"] = (1, 1, C, C)
    shapes["head1.b"] = (C,)
    shapes["head2.w"] = (1, 1, C, 2 * S)
    shapes["head2.b"] = (2 * S,)
    shapes["skip"] = ()
    return shapes


@dataclass
class NleParameters:
    """All trainable tensors of the denoiser plus its hyperparameters."""

    S: int
    side: int
    C: int
    B: int
    tensors: dict[str, np.ndarray] = field(repr=False)
    version: int = 1

    @property
    def dim(self) -> int:
        return 2 * self.S * self.side * self.side

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "NleParameters":
        return NleParameters(self.S, self.side, self.C, self.B,
                             {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def validate(self) -> None:
        expected = param_shapes(self.S, self.C, self.B)
        if set(expected) != set(self.tensors):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")


def init_params(rng: np.random.Generator, geometry: ArrayGeometry, C: int = 32, B: int = 3,
                skip_init: float = 1.0) -> NleParameters:
    """He-normal conv kernels, unit/zero norm affine, zero last head conv.

    The network starts as ``u -> skip_init * u``: the identity by default.
    """
    S = geometry.S
    if C < 2 * S:
        raise ValueError(f"channel width C={C} must be at least 2S={2 * S}")
    if B < 1:
        raise ValueError("need at least one residual block")
    tensors = {}
    for name, shape in param_shapes(S, C, B).items():
        if name == "skip":
            tensors[name] = np.array(float(skip_init))
        elif name.endswith(".w") and name != "head2.w":
            fan_in = shape[0] * shape[1] * shape[2]
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return NleParameters(S=S, side=geometry.side, C=C, B=B, tensors=tensors)


def to_maps(u: np.ndarray, S: int, side: int) -> np.ndarray:
    """``(N, 2*S*side^2)`` vectors -> ``(N, side, side, 2S)`` channels-last maps."""
    n = u.shape[0]
    return u.reshape(n, 2 * S, side, side).transpose(0, 2, 3, 1)


def from_maps(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    return x.transpose(0, 3, 1, 2).reshape(n, -1)


def _im2col3(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9 * c))
    for dy in range(3):
        for dx in range(3):
            k = (dy * 3 + dx) * c
            cols[..., k:k + c] = p[:, dy:dy + h, dx:dx + w, :]
    return cols


def _col2im3(dcols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    dp = np.zeros((n, h + 2, w + 2, c))
    for dy in range(3):
        for dx in range(3):
            k = (dy * 3 + dx) * c
            dp[:, dy:dy + h, dx:dx + w, :] += dcols[..., k:k + c]
    return dp[:, 1:-1, 1:-1, :]


def _conv_fwd(x, w, b):
    kh = w.shape[0]
    cols = _im2col3(x) if kh == 3 else x
    out = cols.reshape(-1, cols.shape[-1]) @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(x.shape[:3] + (w.shape[-1],)), cols


def _conv_bwd(dout, cols, w, cin):
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    c2 = cols.reshape(-1, cols.shape[-1])
    dw = (c2.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(cols.shape)
    dx = _col2im3(dcols, cin) if w.shape[0] == 3 else dcols
    return dx, dw, db


def _ln_fwd(x, g, b):
    axes = (1, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, cache, g):
    xhat, inv = cache
    axes = (1, 2, 3)
    dg = (dy * xhat).sum(axis=(0, 1, 2))
    db = dy.sum(axis=(0, 1, 2))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dg, db


def _check_input(theta: NleParameters, u: np.ndarray) -> tuple[np.ndarray, bool]:
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u2 = u[None, :] if single else u
    if u2.ndim != 2 or u2.shape[1] != theta.dim:
        raise ValueError(f"input length {u.shape[-1]} != network dimension {theta.dim}")
    return u2, single


def _forward(theta: NleParameters, u: np.ndarray, keep: bool):
    t = theta.tensors
    caches = []
    x, cols = _conv_fwd(to_maps(u, theta.S, theta.side), t["lift.w"], t["lift.b"])
    caches.append(cols)
    for b in range(theta.B):
        p = f"block{b}."
        z1, c1 = _conv_fwd(x, t[p + "conv1.w"], t[p + "conv1.b"])
        n1, l1 = _ln_fwd(z1, t[p + "ln1.g"], t[p + "ln1.b"])
        a1 = np.maximum(n1, 0.0)
        z2, c2 = _conv_fwd(a1, t[p + "conv2.w"], t[p + "conv2.b"])
        n2, l2 = _ln_fwd(z2, t[p + "ln2.g"], t[p + "ln2.b"])
        caches.append((c1, l1, n1 > 0, c2, l2))
        x = x + n2
    hid, ch1 = _conv_fwd(x, t["head1.w"], t["head1.b"])
    act = np.maximum(hid, 0.0)
    out, ch2 = _conv_fwd(act, t["head2.w"], t["head2.b"])
    y = t["skip"] * u + from_maps(out)
    if keep:
        return y, (caches, ch1, hid > 0, ch2)
    return y, None


def nle_forward(theta: NleParameters, u: np.ndarray) -> np.ndarray:
    """Apply the denoiser to one vector or a ``(batch, dim)`` array."""
    u2, single = _check_input(theta, u)
    y, _ = _forward(theta, u2, keep=False)
    return y[0] if single else y


def nle_forward_backward(theta: NleParameters, u: np.ndarray, upstream_fn):
    """Forward pass, then reverse pass with upstream gradient ``upstream_fn(output)``.

    Returns ``(output, gradients)``; lets the loss be evaluated on the same
    forward pass that is differentiated.
    """
    u2, single = _check_input(theta, u)
    y, cache = _forward(theta, u2, keep=True)
    up = upstream_fn(y[0] if single else y)
    grads = _backward(theta, u2, y, cache, np.asarray(up, dtype=float).reshape(y.shape))
    if single:
        grads["input"] = grads["input"][0]
        return y[0], grads
    return y, grads


def nle_backward(theta: NleParameters, u: np.ndarray, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of ``<upstream, nle_forward(theta, u)>``.

    The result maps every parameter name to its gradient and ``"input"`` to the
    gradient with respect to ``u``. Batched inputs sum parameter gradients over
    the batch.
    """
    u2, single = _check_input(theta, u)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.size != u2.size:
        raise ValueError("upstream gradient shape does not match the output")
    y, cache = _forward(theta, u2, keep=True)
    grads = _backward(theta, u2, y, cache, upstream.reshape(u2.shape))
    if single:
        grads["input"] = grads["input"][0]
    return grads


def _backward(theta, u, y, cache, dy):
    t = theta.tensors
    caches, ch1, mask_h, ch2 = cache
    g: dict[str, np.ndarray] = {}
    g["skip"] = np.array(float(np.sum(dy * u)))
    du = t["skip"] * dy
    dout = to_maps(dy, theta.S, theta.side)
    dact, g["head2.w"], g["head2.b"] = _conv_bwd(dout, ch2, t["head2.w"], theta.C)
    dhid = dact * mask_h
    dx, g["head1.w"], g["head1.b"] = _conv_bwd(dhid, ch1, t["head1.w"], theta.C)
    for b in reversed(range(theta.B)):
        p = f"block{b}."
        c1, l1, mask1, c2, l2 = caches[b + 1]
        dz2, g[p + "ln2.g"], g[p + "ln2.b"] = _ln_bwd(dx, l2, t[p + "ln2.g"])
        da1, g[p + "conv2.w"], g[p + "conv2.b"] = _conv_bwd(dz2, c2, t[p + "conv2.w"], theta.C)
        dn1 = da1 * mask1
        dz1, g[p + "ln1.g"], g[p + "ln1.b"] = _ln_bwd(dn1, l1, t[p + "ln1.g"])
        dxb, g[p + "conv1.w"], g[p + "conv1.b"] = _conv_bwd(dz1, c1, t[p + "conv1.w"], theta.C)
        dx = dx + dxb
    dmaps, g["lift.w"], g["lift.b"] = _conv_bwd(dx, caches[0], t["lift.w"], 2 * theta.S)
    g["input"] = du + from_maps(dmaps)
    return g


def zero_grads(theta: NleParameters) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in theta.tensors.items()}
