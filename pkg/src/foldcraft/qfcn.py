"""Fully-convolutional goal-conditioned Q-network in plain numpy.

Activations are NHWC arrays.  Kernels are stored (out_ch, in_ch, kh, kw).
All layer kernels are dtype-generic: training runs in float32, the
finite-difference checks run the very same code in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractError(ValueError):
    """Raised when an input violates a kernel's shape contract."""


# ---------------------------------------------------------------------------
# layer kernels

def _wmat(w):
    """Kernel as a (kh*kw*in_ch, out_ch) matrix matching the im2col order."""
    O = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(O, -1).T


def conv2d_forward(x, w, b, stride):
    """'Same' zero-padded convolution.  Returns (y, cols) where cols is the
    im2col matrix (taps ordered kh, kw, channel) kept for the backward pass."""
    O, C, k, _ = w.shape
    if x.shape[-1] != C:
        raise ContractError(f"expected {C} input channels, got {x.shape[-1]}")
    p = k // 2
    N, H, W, _ = x.shape
    Ho, Wo = -(-H // stride), -(-W // stride)
    if k == 1:
        cols = np.ascontiguousarray(x[:, ::stride, ::stride]).reshape(-1, C)
    else:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(x, (k, k), axis=(1, 2))
        win = win[:, :stride * Ho:stride, :stride * Wo:stride].transpose(0, 1, 2, 4, 5, 3)
        cols = np.ascontiguousarray(win).reshape(N * Ho * Wo, k * k * C)
    y = cols @ _wmat(w)
    y += b
    return y.reshape(N, Ho, Wo, O), cols


def conv2d_backward(dy, cols, w, x_shape, stride):
    """Gradients (dx, dw, db) of a 'same' convolution."""
    O, C, k, _ = w.shape
    N, H, W, _ = x_shape
    Ho, Wo = dy.shape[1:3]
    dy2 = dy.reshape(-1, O)
    dw = (cols.T @ dy2).T.reshape(O, k, k, C).transpose(0, 3, 1, 2)
    db = dy2.sum(0)
    dcols = (dy2 @ _wmat(w).T).reshape(N, Ho, Wo, k, k, C)
    p = k // 2
    dxp = np.zeros((N, H + 2 * p + stride, W + 2 * p + stride, C), dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
    dx = dxp[:, p:p + H, p:p + W]
    return dx, np.ascontiguousarray(dw), db


def _up_axis(x, axis):
    """2x linear upsampling along ``axis`` (1 or 2) of an NHWC array."""
    n = x.shape[axis]
    shape = list(x.shape)
    shape[axis] = 2 * n
    out = np.empty(shape, x.dtype)
    sl = [slice(None)] * 4

    def at(s):
        sl[axis] = s
        return tuple(sl)

    even, odd = out[at(slice(0, None, 2))], out[at(slice(1, None, 2))]
    np.multiply(x, 0.75, out=even)
    np.multiply(x, 0.75, out=odd)
    even[at(slice(1, None))] += 0.25 * x[at(slice(None, -1))]
    even[at(slice(0, 1))] += 0.25 * x[at(slice(0, 1))]
    odd[at(slice(None, -1))] += 0.25 * x[at(slice(1, None))]
    odd[at(slice(-1, None))] += 0.25 * x[at(slice(-1, None))]
    return out


def _up_axis_adjoint(g, axis):
    sl = [slice(None)] * 4

    def at(s):
        sl[axis] = s
        return tuple(sl)

    even, odd = g[at(slice(0, None, 2))], g[at(slice(1, None, 2))]
    dx = 0.75 * (even + odd)
    dx[at(slice(None, -1))] += 0.25 * even[at(slice(1, None))]
    dx[at(slice(0, 1))] += 0.25 * even[at(slice(0, 1))]
    dx[at(slice(1, None))] += 0.25 * odd[at(slice(None, -1))]
    dx[at(slice(-1, None))] += 0.25 * odd[at(slice(-1, None))]
    return dx


def upsample2x_forward(x):
    """Bilinear 2x upsampling of NHWC maps (half-pixel aligned, edge-clamped).

    Each output sample is 0.75 * nearest source + 0.25 * next-nearest.
    """
    return _up_axis(_up_axis(x, 1), 2)


def upsample2x_backward(dy):
    """Adjoint of :func:`upsample2x_forward`."""
    return _up_axis_adjoint(_up_axis_adjoint(dy, 2), 1)


def huber_loss(pred, target, delta: float = 1.0):
    """Huber value and derivative w.r.t. ``pred`` (elementwise)."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r ** 2, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------------------
# network

@dataclass(frozen=True)
class LayerSpec:
    kind: str            # "conv" or "up"
    cin: int = 0
    cout: int = 0
    k: int = 0
    stride: int = 1
    relu: bool = False


def default_layers(in_ch: int = 6, width: int = 32, out_ch: int = 1) -> tuple[LayerSpec, ...]:
    """4-layer strided encoder, then (up, conv3) x2, up, 1x1 projection."""
    return (
        LayerSpec("conv", in_ch, width, 5, 2, True),
        LayerSpec("conv", width, width, 5, 2, True),
        LayerSpec("conv", width, width, 5, 2, True),
        LayerSpec("conv", width, width, 5, 1, True),
        LayerSpec("up"),
        LayerSpec("conv", width, width, 3, 1, True),
        LayerSpec("up"),
        LayerSpec("conv", width, width, 3, 1, True),
        LayerSpec("up"),
        LayerSpec("conv", width, out_ch, 1, 1, False),
    )


class QNetwork:
    """Parameters plus the forward/backward passes of the heatmap network."""

    def __init__(self, layers=None, seed: int = 0, dtype=np.float32):
        self.layers = tuple(layers or default_layers())
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        for L in self.layers:
            if L.kind != "conv":
                continue
            fan_in = L.cin * L.k * L.k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (L.cout, L.cin, L.k, L.k))
            self.params += [w.astype(self.dtype), np.zeros(L.cout, self.dtype)]

    @property
    def in_channels(self) -> int:
        return self.layers[0].cin

    @property
    def out_channels(self) -> int:
        return [L for L in self.layers if L.kind == "conv"][-1].cout

    @property
    def downsample(self) -> int:
        f = 1
        for L in self.layers:
            if L.kind == "conv":
                f *= L.stride
        return f

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.layers, other.dtype = self.layers, self.dtype
        other.params = [p.copy() for p in self.params]
        return other

    def astype(self, dtype) -> "QNetwork":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = [p.astype(dtype) for p in self.params]
        return other

    def zero_output_layer(self) -> None:
        self.params[-2][:] = 0
        self.params[-1][:] = 0

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ContractError(f"input must be (N, H, W, {self.in_channels}), got {x.shape}")
        N, H, W, _ = x.shape
        if H != W or H % self.downsample:
            raise ContractError(f"input must be square with side divisible by "
                                f"{self.downsample}, got {H}x{W}")

    def _fused(self) -> set[int]:
        """Indices of 1x1 linear convs that directly follow an upsample.

        Bilinear upsampling commutes with a per-pixel affine map (its weights
        sum to one), so those projections run at the lower resolution."""
        L = self.layers
        return {i for i in range(1, len(L))
                if L[i].kind == "conv" and L[i].k == 1 and not L[i].relu
                and L[i - 1].kind == "up"}

    def forward(self, x, keep: bool = False):
        """Heatmaps (N, H, W, out_ch) for a batch of NHWC inputs.

        With ``keep=True`` also returns the cache for :meth:`backward`.
        """
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        fused = self._fused()
        cache = []
        pi = 0
        for i, L in enumerate(self.layers):
            if L.kind == "up":
                cache.append(None)
                if i + 1 not in fused:
                    x = upsample2x_forward(x)
                continue
            w, b = self.params[pi], self.params[pi + 1]
            pi += 2
            x_shape = x.shape
            x, cols = conv2d_forward(x, w, b, L.stride)
            if L.relu:
                np.maximum(x, 0, out=x)
            if i in fused:
                x = upsample2x_forward(x)
            cache.append((cols if keep else None, x_shape, x if (keep and L.relu) else None))
        return (x, cache) if keep else x

    def backward(self, cache, dout):
        """Parameter gradients for an upstream gradient ``dout`` on the output."""
        fused = self._fused()
        grads = [None] * len(self.params)
        pi = len(self.params)
        g = np.asarray(dout, dtype=self.dtype)
        for i in reversed(range(len(self.layers))):
            L, c = self.layers[i], cache[i]
            if L.kind == "up":
                if i + 1 not in fused:
                    g = upsample2x_backward(g)
                continue
            pi -= 2
            cols, x_shape, act = c
            if i in fused:
                g = upsample2x_backward(g)
            if L.relu:
                g = g * (act > 0)
            g, dw, db = conv2d_backward(g, cols, self.params[pi], x_shape, L.stride)
            grads[pi], grads[pi + 1] = dw, db
        return grads

    def backward_pixels(self, cache, pixels, out_shape):
        """Gradients when only single output pixels carry gradient.

        ``pixels`` is a list of (n, row, col, channel, grad_value); the output
        gradient is zero everywhere else.
        """
        dout = np.zeros(out_shape, self.dtype)
        for n, r, c, ch, g in pixels:
            if not (0 <= r < out_shape[1] and 0 <= c < out_shape[2]):
                raise ContractError(f"pixel ({r}, {c}) outside {out_shape[1:3]}")
            dout[n, r, c, ch] += g
        return self.backward(cache, dout)

    # -- persistence -----------------------------------------------------

    _MAGIC = b"FCQN"
    _KIND = {"conv": 1, "up": 2}

    def to_bytes(self, image_px: int = 0) -> bytes:
        """Magic, u32 version, u32 image size, u32 layer count, per layer
        5 x u32 (kind, cin, cout, k, stride) + u8 relu, then every weight and
        bias tensor as little-endian float32 in layer order."""
        out = [self._MAGIC, struct.pack("<III", 1, image_px, len(self.layers))]
        for L in self.layers:
            out.append(struct.pack("<IIIIIB", self._KIND[L.kind], L.cin, L.cout, L.k,
                                   L.stride, int(L.relu)))
        out += [p.astype("<f4").tobytes() for p in self.params]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["QNetwork", int]:
        if data[:4] != cls._MAGIC:
            raise ValueError("not a foldcraft checkpoint")
        version, image_px, nl = struct.unpack_from("<III", data, 4)
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 16
        kinds = {v: k for k, v in cls._KIND.items()}
        layers = []
        for _ in range(nl):
            kind, cin, cout, k, stride, relu = struct.unpack_from("<IIIIIB", data, off)
            off += struct.calcsize("<IIIIIB")
            layers.append(LayerSpec(kinds[kind], cin, cout, k, stride, bool(relu)))
        net = cls(layers)
        for i, p in enumerate(net.params):
            arr = np.frombuffer(data, "<f4", p.size, off).reshape(p.shape)
            net.params[i] = arr.astype(np.float32)
            off += 4 * p.size
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return net, image_px

    def save(self, path, image_px: int = 0) -> None:
        Path(path).write_bytes(self.to_bytes(image_px))

    @classmethod
    def load(cls, path) -> "QNetwork":
        return cls.from_bytes(Path(path).read_bytes())[0]


def _chw_to_batch(x):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ContractError(f"expected a single (C, H, W) tensor, got {x.shape}")
    return np.moveaxis(x, 0, -1)[None]


def forward(net: QNetwork, x):
    """Heatmap (out_ch, H, W) for one channel-first (6, H, W) input."""
    return np.moveaxis(net.forward(_chw_to_batch(x))[0], -1, 0)


def backward(net: QNetwork, x, row: int, col: int, grad_value: float, channel: int = 0):
    """Parameter gradients of ``grad_value * heatmap[channel, row, col]``."""
    out, cache = net.forward(_chw_to_batch(x), keep=True)
    return net.backward_pixels(cache, [(0, row, col, channel, grad_value)], out.shape)


# ---------------------------------------------------------------------------
# optimiser

class Adam:
    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float | None = None) -> None:
        """In-place bias-corrected Adam update."""
        if any(not np.isfinite(g).all() for g in grads):
            raise FloatingPointError("non-finite gradient: training diverged")
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, grads, state: Adam, lr: float, step: int | None = None):
    """Functional wrapper; ``step`` is checked against the optimiser clock."""
    if step is not None and step != state.t + 1:
        raise ValueError(f"expected step {state.t + 1}, got {step}")
    state.step(params, grads, lr)
    return params


# ---------------------------------------------------------------------------
# finite-difference self check

@dataclass
class GradCheckReport:
    """Max relative error of analytic vs central-difference gradients."""
    errors: dict
    tolerances: dict
    n_checked: dict
    n_skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return all(self.errors[k] < self.tolerances[k] for k in self.errors)

    def lines(self) -> list[str]:
        return [f"{k:<10} max rel err {self.errors[k]:.2e}  (< {self.tolerances[k]:g}, "
                f"{self.n_checked[k]} entries)  {'ok' if self.errors[k] < self.tolerances[k] else 'FAIL'}"
                for k in self.errors]


def _rel_err(a, n, floor=1e-6):
    return float(np.abs(a - n) / max(abs(a), abs(n), floor))


def _fd_entries(f, arrays, analytic, picks, eps):
    """Max relative error over ``picks`` = [(array index, flat index)]."""
    worst = 0.0
    for ai, fi in picks:
        a = arrays[ai].reshape(-1)
        old = a[fi]
        a[fi] = old + eps
        fp = f()
        a[fi] = old - eps
        fm = f()
        a[fi] = old
        worst = max(worst, _rel_err(analytic[ai].reshape(-1)[fi], (fp - fm) / (2 * eps)))
    return worst


def _sample_picks(rng, arrays, n):
    sizes = np.array([a.size for a in arrays])
    flat = rng.choice(sizes.sum(), size=min(n, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in flat:
        ai = int(np.searchsorted(bounds, f, side="right"))
        out.append((ai, int(f - (bounds[ai - 1] if ai else 0))))
    return out


def gradient_check(net_size: str = "small", seed: int = 0, n_samples: int = 100,
                   eps: float = 1e-3) -> GradCheckReport:
    """Compare every backward kernel against central finite differences.

    Layer checks use a random linear readout of the layer output so every
    output position carries gradient.  The network check backpropagates a
    single output pixel, as training does.  Everything runs in float64:
    with eps = 1e-3 the float32 rounding noise alone (~1e-7 / 1e-3) would
    exceed the tolerance.  Network perturbations that flip any ReLU are
    skipped because the difference quotient then straddles a kink.
    """
    import time
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    H = {"small": 16, "medium": 32}[net_size]
    errors, checked = {}, {}

    def conv_case(name, cin, cout, k, stride, size):
        x = rng.random((2, size, size, cin))
        w = rng.normal(0, np.sqrt(2 / (cin * k * k)), (cout, cin, k, k))
        b = rng.normal(0, 0.1, cout)
        r = rng.normal(size=(2, -(-size // stride), -(-size // stride), cout))
        y, cols = conv2d_forward(x, w, b, stride)
        dx, dw, db = conv2d_backward(r, cols, w, x.shape, stride)
        f = lambda: float((conv2d_forward(x, w, b, stride)[0] * r).sum())
        picks = _sample_picks(rng, [x, w, b], n_samples)
        errors[name] = _fd_entries(f, [x, w, b], [dx, dw, db], picks, eps)
        checked[name] = len(picks)

    conv_case("conv_s1", 5, 4, 3, 1, 9)
    conv_case("conv_s2", 6, 4, 5, 2, H)

    x = rng.random((2, 6, 6, 3))
    r = rng.normal(size=(2, 12, 12, 3))
    dx = upsample2x_backward(r)
    picks = _sample_picks(rng, [x], n_samples)
    errors["upsample"] = _fd_entries(lambda: float((upsample2x_forward(x) * r).sum()),
                                     [x], [dx], picks, eps)
    checked["upsample"] = len(picks)

    worst = 0.0
    residuals = [-3.0, -1.7, -0.6, -0.05, 0.05, 0.5, 1.2, 3.0]
    for res in residuals:
        p = np.array([res])
        _, g = huber_loss(p[0], 0.0)
        worst = max(worst, _fd_entries(lambda: huber_loss(p[0], 0.0)[0], [p], [np.array([g])],
                                       [(0, 0)], eps))
    errors["huber"], checked["huber"] = worst, len(residuals)

    net = QNetwork(seed=seed, dtype=np.float64)
    for p in net.params[1::2]:
        p[:] = rng.normal(0, 0.05, p.shape)      # non-zero biases exercise db
    xin = rng.random((1, H, H, net.in_channels))
    row, col = (int(v) for v in rng.integers(0, H, 2))
    out, cache = net.forward(xin, keep=True)
    grads = net.backward_pixels(cache, [(0, row, col, 0, 1.0)], out.shape)

    def pattern():
        _, c = net.forward(xin, keep=True)
        return [a > 0 for (_, _, a) in (e for e in c if e is not None) if a is not None]

    base = pattern()
    worst, n_ok, skipped = 0.0, 0, 0
    for ai, fi in _sample_picks(rng, net.params, 20 * n_samples):
        if n_ok >= n_samples:
            break
        a = net.params[ai].reshape(-1)
        old = a[fi]
        vals, stable = [], True
        for d in (eps, -eps):
            a[fi] = old + d
            vals.append(float(net.forward(xin)[0, row, col, 0]))
            stable &= all(np.array_equal(p, q) for p, q in zip(pattern(), base))
        a[fi] = old
        if not stable:
            skipped += 1
            continue
        worst = max(worst, _rel_err(grads[ai].reshape(-1)[fi], (vals[0] - vals[1]) / (2 * eps)))
        n_ok += 1
    errors["network"], checked["network"] = worst, n_ok
    tol = {"conv_s1": 1e-4, "conv_s2": 1e-4, "upsample": 1e-6, "huber": 1e-4, "network": 1e-4}
    return GradCheckReport(errors, tol, checked, skipped, time.perf_counter() - t0)
