"""Recognition networks with hand-written backpropagation.

A :class:`RecognitionNet` is a stack of layers followed by an output head
that turns the last layer's activations into natural parameters:

* :class:`CategoricalHead` emits logits unchanged.
* :class:`GaussianHead` reads a mean and a lower-triangular factor ``L`` and
  returns ``h = P m``, ``J = -P/2`` with ``P = L L^T + eps I``, so the output
  is always a valid Gaussian natural parameter.

Inputs are batched row-wise: ``x`` has shape ``(B, d)``.
"""

import struct

import numpy as np

from .expfam import CategoricalNat, GaussianNat

__all__ = [
    "Dense",
    "Relu",
    "Conv2d",
    "MaxPool2d",
    "CategoricalHead",
    "GaussianHead",
    "RecognitionNet",
    "mlp",
    "conv_net",
    "Adam",
    "grad_check",
    "write_weights",
    "read_weights",
]


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    def __init__(self, d_in, d_out, rng=None):
        rng = np.random.default_rng(rng)
        self.W = _glorot(rng, d_in, d_out, (d_in, d_out))
        self.b = np.zeros(d_out)

    @property
    def params(self):
        return [self.W, self.b]

    @property
    def shape(self):
        return self.W.shape

    def forward(self, x):
        return x @ self.W + self.b, x

    def backward(self, x, gy):
        return gy @ self.W.T, [x.T @ gy, gy.sum(axis=0)]


class Relu:
    params = []

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, gy):
        return gy * mask, []


class Conv2d:
    """Valid-padding 2-D convolution on flattened ``(C, H, W)`` inputs.

    ``kernel`` is an int or a ``(kh, kw)`` pair; a 1-D signal of length P is
    the ``(1, 1, P)`` case with kernel ``(1, k)``. Output is flattened
    ``(C_out, H - kh + 1, W - kw + 1)``.
    """

    def __init__(self, in_shape, out_channels, kernel, rng=None):
        rng = np.random.default_rng(rng)
        C, H, W = in_shape
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        if kh > H or kw > W:
            raise ValueError(f"kernel {(kh, kw)} exceeds input {(H, W)}")
        self.in_shape = (C, H, W)
        self.kernel = (kh, kw)
        self.out_shape = (out_channels, H - kh + 1, W - kw + 1)
        fan_in = C * kh * kw
        self.W = _glorot(rng, fan_in, out_channels * kh * kw, (fan_in, out_channels))
        self.b = np.zeros(out_channels)

    @property
    def params(self):
        return [self.W, self.b]

    def _patches(self, x):
        B = x.shape[0]
        C, H, W = self.in_shape
        kh, kw = self.kernel
        img = x.reshape(B, C, H, W)
        win = np.lib.stride_tricks.sliding_window_view(img, (kh, kw), axis=(2, 3))
        # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C*kh*kw)
        _, Ho, Wo = self.out_shape
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * kh * kw)

    def forward(self, x):
        cols = self._patches(x)
        y = cols @ self.W + self.b
        B = x.shape[0]
        return y.transpose(0, 3, 1, 2).reshape(B, -1), cols

    def backward(self, cols, gy):
        B, Ho, Wo, F = cols.shape
        Co = self.W.shape[1]
        C, H, W = self.in_shape
        kh, kw = self.kernel
        g = gy.reshape(B, Co, Ho, Wo).transpose(0, 2, 3, 1)
        gW = np.einsum("bhwf,bhwo->fo", cols, g)
        gb = g.sum(axis=(0, 1, 2))
        gcols = (g @ self.W.T).reshape(B, Ho, Wo, C, kh, kw)
        gx = np.zeros((B, C, H, W))
        for di in range(kh):
            for dj in range(kw):
                gx[:, :, di:di + Ho, dj:dj + Wo] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return gx.reshape(B, -1), [gW, gb]


class MaxPool2d:
    """Non-overlapping max pooling on flattened ``(C, H, W)`` inputs.

    Trailing rows and columns that do not fill a window are dropped. Ties
    route the gradient to the first maximal entry.
    """

    params = []

    def __init__(self, in_shape, pool):
        C, H, W = in_shape
        ph, pw = (pool, pool) if np.isscalar(pool) else tuple(pool)
        if H // ph == 0 or W // pw == 0:
            raise ValueError(f"pool {(ph, pw)} exceeds input {(H, W)}")
        self.in_shape = (C, H, W)
        self.pool = (ph, pw)
        self.out_shape = (C, H // ph, W // pw)

    def forward(self, x):
        B = x.shape[0]
        C, H, W = self.in_shape
        ph, pw = self.pool
        _, Ho, Wo = self.out_shape
        win = x.reshape(B, C, H, W)[:, :, :Ho * ph, :Wo * pw]
        win = win.reshape(B, C, Ho, ph, Wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, ph * pw)
        arg = np.argmax(win, axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y.reshape(B, -1), arg

    def backward(self, arg, gy):
        B = arg.shape[0]
        C, H, W = self.in_shape
        ph, pw = self.pool
        _, Ho, Wo = self.out_shape
        g = np.zeros((B, C, Ho, Wo, ph * pw))
        np.put_along_axis(g, arg[..., None], gy.reshape(B, C, Ho, Wo, 1), axis=-1)
        g = g.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * ph, Wo * pw)
        gx = np.zeros((B, C, H, W))
        gx[:, :, :Ho * ph, :Wo * pw] = g
        return gx.reshape(B, -1), []


class CategoricalHead:
    def __init__(self, K):
        self.K = K
        self.n_outputs = K

    def forward(self, raw):
        return raw

    def backward(self, raw, g_logits):
        return g_logits

    def natural(self, out):
        return CategoricalNat(out)


class GaussianHead:
    def __init__(self, K, eps=1e-4, offset=1.0):
        self.K = K
        self.eps = eps
        self.offset = offset
        self.n_outputs = K + K * (K + 1) // 2
        self._tril = np.tril_indices(K)

    def _unpack(self, raw):
        K = self.K
        m = raw[:, :K]
        L = np.zeros((raw.shape[0], K, K))
        L[:, self._tril[0], self._tril[1]] = raw[:, K:]
        # identity offset keeps the initial precision near one
        return m, L + self.offset * np.eye(K)

    def forward(self, raw):
        m, L = self._unpack(raw)
        P = L @ np.swapaxes(L, 1, 2) + self.eps * np.eye(self.K)
        h = np.einsum("bij,bj->bi", P, m)
        return h, -0.5 * P

    def backward(self, raw, upstream):
        g_h, g_J = upstream
        m, L = self._unpack(raw)
        P = L @ np.swapaxes(L, 1, 2) + self.eps * np.eye(self.K)
        g_m = np.einsum("bij,bi->bj", P, g_h)
        g_P = np.einsum("bi,bj->bij", g_h, m) - 0.5 * g_J
        g_L = (g_P + np.swapaxes(g_P, 1, 2)) @ L
        g_raw = np.empty_like(raw)
        g_raw[:, :self.K] = g_m
        g_raw[:, self.K:] = g_L[:, self._tril[0], self._tril[1]]
        return g_raw

    def natural(self, out):
        h, J = out
        return GaussianNat(h, J)


class RecognitionNet:
    """Layer stack plus output head mapping observations to natural parameters."""

    def __init__(self, layers, head):
        self.layers = list(layers)
        self.head = head

    @property
    def params(self):
        """Parameter arrays keyed ``"<layer>.<index>"``; updated in place by :class:`Adam`."""
        out = {}
        for i, layer in enumerate(self.layers):
            for p_idx, p in enumerate(layer.params):
                out[f"{i}.{p_idx}"] = p
        return out

    def forward_cached(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d_in = self._input_dim()
        if d_in is not None and x.shape[1] != d_in:
            raise ValueError(f"input has {x.shape[1]} features, network expects {d_in}")
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return self.head.forward(x), (caches, x)

    def __call__(self, x):
        return self.forward_cached(x)[0]

    def natural(self, x):
        """Natural parameters for a single observation vector."""
        out = self(np.asarray(x, dtype=float)[None, :])
        if isinstance(out, tuple):
            return self.head.natural(tuple(o[0] for o in out))
        return self.head.natural(out[0])

    def backward(self, cache, upstream):
        """Gradients of ``sum(upstream * output)`` with respect to every parameter."""
        caches, raw = cache
        g = self.head.backward(raw, upstream)
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g, pg = self.layers[i].backward(caches[i], g)
            for p_idx, gp in enumerate(pg):
                grads[f"{i}.{p_idx}"] = gp
        return grads

    def _input_dim(self):
        first = self.layers[0]
        if isinstance(first, Dense):
            return first.W.shape[0]
        if isinstance(first, (Conv2d, MaxPool2d)):
            return int(np.prod(first.in_shape))
        return None

    def weight_blocks(self):
        """One list of parameter arrays per parametrised layer."""
        return [layer.params for layer in self.layers if layer.params]

    def set_weight_blocks(self, blocks):
        layers = [layer for layer in self.layers if layer.params]
        if len(blocks) < len(layers):
            raise ValueError(f"checkpoint has {len(blocks)} layers, network needs {len(layers)}")
        for layer, arrays in zip(layers, blocks):
            for p, a in zip(layer.params, arrays):
                if p.shape != a.shape:
                    raise ValueError(f"shape mismatch {p.shape} vs {a.shape}")
                p[...] = a
        return blocks[len(layers):]

    def save(self, path):
        write_weights(path, self.weight_blocks())

    def load(self, path):
        """Load weights; returns any trailing blocks not consumed by the layers."""
        return self.set_weight_blocks(read_weights(path))


def mlp(d_in, hidden, head, seed=None):
    """Dense/ReLU recognition network ``d_in -> hidden... -> head``."""
    rng = np.random.default_rng(seed)
    sizes = [d_in, *hidden]
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [Dense(a, b, rng), Relu()]
    layers.append(Dense(sizes[-1], head.n_outputs, rng))
    return RecognitionNet(layers, head)


def conv_net(in_shape, channels, kernel, pool, hidden, head, seed=None):
    """Conv/ReLU/max-pool blocks followed by a dense ReLU stack.

    Parameters
    ----------
    in_shape : tuple
        ``(C, H, W)`` of the flattened input; ``(1, 1, P)`` for 1-D frames.
    channels : sequence of int
        Output channels of each convolutional block.
    kernel, pool : int or pair
        Shared kernel and pooling sizes of every block.
    hidden : sequence of int
        Widths of the dense layers after the last block.
    """
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(in_shape)
    for c in channels:
        conv = Conv2d(shape, c, kernel, rng)
        pooling = MaxPool2d(conv.out_shape, pool)
        layers += [conv, Relu(), pooling]
        shape = pooling.out_shape
    sizes = [int(np.prod(shape)), *hidden]
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [Dense(a, b, rng), Relu()]
    layers.append(Dense(sizes[-1], head.n_outputs, rng))
    return RecognitionNet(layers, head)


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Descent step on every ``params[name]`` given ``grads[name]``."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape for {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def grad_check(net, x, loss, step=1e-5):
    """Largest relative discrepancy between backprop and central differences.

    ``loss(out)`` must return ``(value, d value / d out)`` where ``out`` is
    the network output for ``x``.
    """
    out, cache = net.forward_cached(x)
    _, g_out = loss(out)
    analytic = net.backward(cache, g_out)
    worst = 0.0
    for name, p in net.params.items():
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss(net(x))[0]
            flat[i] = orig - step
            fm = loss(net(x))[0]
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: b"RPMW", u32 version, u32 layer count, then per layer
# u32 array count and per array u32 ndim, u32 dims..., float64 data; all
# little-endian, arrays row-major.

_MAGIC = b"RPMW"
_VERSION = 1


def write_weights(path, blocks):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blocks)))
        for arrays in blocks:
            fh.write(struct.pack("<I", len(arrays)))
            for a in arrays:
                a = np.ascontiguousarray(a, dtype="<f8")
                fh.write(struct.pack("<I", a.ndim))
                fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
                fh.write(a.tobytes())


def read_weights(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an RPMW weight file")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    blocks = []
    try:
        for _ in range(n_layers):
            (n_arrays,) = struct.unpack_from("<I", data, off)
            off += 4
            arrays = []
            for _ in range(n_arrays):
                (ndim,) = struct.unpack_from("<I", data, off)
                off += 4
                shape = struct.unpack_from(f"<{ndim}I", data, off)
                off += 4 * ndim
                count = int(np.prod(shape))
                if off + 8 * count > len(data):
                    raise ValueError(f"{path}: truncated weight file")
                arrays.append(np.frombuffer(data, "<f8", count, off).reshape(shape).copy())
                off += 8 * count
            blocks.append(arrays)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated weight file") from exc
    return blocks
