"""Synthetic datasets and file formats.

All generators are pure functions of their arguments and seed.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BouncingBallConfig",
    "SequenceDataset",
    "DiscreteDataset",
    "TextureCorpus",
    "oscillator_latents",
    "gen_textured_ball",
    "gen_structured_ball",
    "gen_peer_pairs",
    "gen_synthetic_digits",
    "gen_texture_corpus",
    "load_idx",
    "write_idx",
    "read_pgm",
    "write_pgm",
    "write_rpmd",
    "read_rpmd",
]


@dataclass
class BouncingBallConfig:
    """Settings shared by the two bouncing-ball generators.

    The latent is the first coordinate of ``z_{t+1} = rho R(phi) z_t + noise``.
    ``dynamics``, when given, replaces ``rho R(phi)``.
    """

    n_sequences: int = 50
    T: int = 50
    P: int = 32
    seed: int = 0
    variant: str = "textured"
    rho: float = 0.999
    phi: float = 2 * np.pi * 3 / 50
    noise_scale: float = 0.05
    dynamics: np.ndarray = None
    init_scale: float = 1.0
    # textured variant
    component_std: float = 0.3
    texture_width: float = 1.5
    texture_floor: float = 0.02
    # structured variant
    bump_amplitude: float = 2.0
    bump_width: float = 1.5
    stripe_amplitude: float = 1.0
    stripe_period: float = 6.0
    stripe_speed: float = 0.5
    pixel_noise: float = 0.2

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.P < 4:
            raise ValueError(f"P must be >= 4, got {self.P}")
        if self.n_sequences < 1:
            raise ValueError("n_sequences must be >= 1")
        if self.variant not in ("textured", "structured"):
            raise ValueError(f"variant must be 'textured' or 'structured', got {self.variant!r}")
        if not 0 <= self.component_std < 1:
            raise ValueError("component_std must lie in [0, 1)")
        if not 0 < self.texture_floor < 0.5:
            raise ValueError("texture_floor must lie in (0, 0.5)")
        if self.texture_width <= 0:
            raise ValueError("texture_width must be positive")

    @property
    def transition(self):
        if self.dynamics is not None:
            A = np.asarray(self.dynamics, dtype=float)
            if A.shape != (2, 2):
                raise ValueError("dynamics must be a 2x2 matrix")
            return A
        c, s = np.cos(self.phi), np.sin(self.phi)
        return self.rho * np.array([[c, -s], [s, c]])


@dataclass
class SequenceDataset:
    """J factor streams ``observations[j]`` of shape (N, T, d_j) and the true latent (N, T)."""

    observations: list
    z_true: np.ndarray
    times: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N, T = self.z_true.shape
        for v in self.observations:
            if v.shape[:2] != (N, T):
                raise ValueError("observation streams must share (N, T) with z_true")
        if not np.all(np.isfinite(self.z_true)):
            raise ValueError("z_true must be finite")
        if self.times is None:
            self.times = np.arange(T, dtype=float)


@dataclass
class DiscreteDataset:
    """Grouped views ``X`` (N, J, d) with labels used for evaluation only."""

    X: np.ndarray
    labels: np.ndarray


@dataclass
class TextureCorpus:
    images: np.ndarray
    patch_labels: np.ndarray
    topic_weights: np.ndarray
    patch_size: int


def oscillator_latents(cfg, rng):
    """Latent states (N, T, 2) of the damped rotation system."""
    A = cfg.transition
    z = np.empty((cfg.n_sequences, cfg.T, 2))
    z[:, 0] = cfg.init_scale * rng.standard_normal((cfg.n_sequences, 2))
    for t in range(1, cfg.T):
        z[:, t] = z[:, t - 1] @ A.T + cfg.noise_scale * rng.standard_normal((cfg.n_sequences, 2))
    return z


def _bump_center(z, P):
    return (P - 1) * (0.5 + 0.4 * np.tanh(z))


def _texture_weights(z, P, width, floor):
    # weight of the positive component, peaked at the ball position
    p = np.arange(P)
    return floor + (0.5 - floor) * np.exp(-0.5 * ((p - _bump_center(z, P)[..., None]) / width) ** 2)


def gen_textured_ball(cfg: BouncingBallConfig) -> SequenceDataset:
    """Pixels from two-component mixtures whose marginal mean is 0 and variance 1.

    Pixel ``p`` at latent ``z`` picks the positive component with probability
    ``w = f + (1/2 - f) exp(-(p - b(z))^2 / (2 v^2))``, a bump of width ``v``
    around the ball position ``b(z) = (P-1)(1/2 + 0.4 tanh z)``. Component means
    ``c sqrt((1-w)/w)`` and ``-c sqrt(w/(1-w))`` with ``c^2 = 1 - s^2``
    give mean 0 and variance 1 for every ``z``, so the ball only shows in
    higher moments.
    """
    rng = np.random.default_rng(cfg.seed)
    z = oscillator_latents(cfg, rng)[..., 0]
    w = _texture_weights(z, cfg.P, cfg.texture_width, cfg.texture_floor)
    s = cfg.component_std
    c = np.sqrt(1.0 - s * s)
    pos = rng.random(w.shape) < w
    mean = np.where(pos, c * np.sqrt((1 - w) / w), -c * np.sqrt(w / (1 - w)))
    x = mean + s * rng.standard_normal(w.shape)
    return SequenceDataset([x], z, meta={"variant": "textured", "centre": _bump_center(z, cfg.P)})


def gen_structured_ball(cfg: BouncingBallConfig) -> SequenceDataset:
    """Moving stripes plus a Gaussian bump centred at a latent-dependent pixel."""
    rng = np.random.default_rng(cfg.seed)
    z = oscillator_latents(cfg, rng)[..., 0]
    p = np.arange(cfg.P)
    t = np.arange(cfg.T)
    phase0 = rng.uniform(0, 2 * np.pi, cfg.n_sequences)
    stripes = cfg.stripe_amplitude * np.sin(
        2 * np.pi * p[None, None, :] / cfg.stripe_period
        - cfg.stripe_speed * t[None, :, None] - phase0[:, None, None]
    )
    centre = _bump_center(z, cfg.P)
    bump = cfg.bump_amplitude * np.exp(-0.5 * ((p - centre[..., None]) / cfg.bump_width) ** 2)
    x = stripes + bump + cfg.pixel_noise * rng.standard_normal(bump.shape)
    return SequenceDataset([x], z, meta={"variant": "structured", "centre": centre})


def gen_peer_pairs(images, labels, seed=0):
    """Disjoint same-class pairs; odd classes drop one image with a warning."""
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels).ravel()
    if len(images) != len(labels):
        raise ValueError("images and labels must have the same length")
    flat = images.reshape(len(images), -1)
    rng = np.random.default_rng(seed)
    firsts, seconds, pair_labels = [], [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) % 2:
            warnings.warn(f"class {c} has an odd count; dropping one image", stacklevel=2)
            idx = idx[:-1]
        firsts.append(idx[0::2])
        seconds.append(idx[1::2])
        pair_labels.append(np.full(len(idx) // 2, c))
    if not firsts or sum(len(f) for f in firsts) == 0:
        raise ValueError("no class has two images to pair")
    a, b = np.concatenate(firsts), np.concatenate(seconds)
    order = rng.permutation(len(a))
    X = np.stack([flat[a[order]], flat[b[order]]], axis=1)
    return DiscreteDataset(X, np.concatenate(pair_labels)[order])


def _smooth_field(rng, shape, width):
    # white noise blurred by a separable Gaussian, unit standard deviation
    noise = rng.standard_normal(shape)
    r = np.arange(-3 * int(np.ceil(width)), 3 * int(np.ceil(width)) + 1)
    k = np.exp(-0.5 * (r / width) ** 2)
    k /= k.sum()
    out = noise
    for ax in range(len(shape)):
        out = np.apply_along_axis(lambda v: np.convolve(np.pad(v, len(r) // 2, mode="wrap"), k, "valid"),
                                  ax, out)
    return (out - out.mean()) / out.std()


def gen_synthetic_digits(n_classes=10, per_class=400, side=12, noise=0.5, seed=0):
    """Offline stand-in for a digit corpus: smooth class templates plus noise.

    Returns images of shape (n_classes * per_class, side, side) and labels.
    """
    if n_classes < 1 or per_class < 1 or side < 2:
        raise ValueError("n_classes, per_class must be >= 1 and side >= 2")
    rng = np.random.default_rng(seed)
    templates = np.stack([_smooth_field(rng, (side, side), side / 6) for _ in range(n_classes)])
    labels = np.repeat(np.arange(n_classes), per_class)
    images = templates[labels] + noise * rng.standard_normal((len(labels), side, side))
    order = rng.permutation(len(labels))
    return images[order], labels[order], templates


def _texture_patch(rng, k, size, n, noise):
    # Texture k: Gaussian with an oriented grating as mean and white noise.
    ang = np.pi * k / 3.0 + 0.3
    freq = 2 * np.pi * (1.0 + 0.5 * k) / size
    yy, xx = np.mgrid[0:size, 0:size]
    mean = np.sin(freq * (np.cos(ang) * xx + np.sin(ang) * yy))
    return mean[None] + noise * rng.standard_normal((n, size, size))


def gen_texture_corpus(n_images=100, grid=4, patch_size=8, n_textures=3, concentration=0.3, noise=1.0,
                       seed=0):
    """Images tiled from textured patches with per-image Dirichlet topic weights.

    Returns a :class:`TextureCorpus` with images (N, grid*s, grid*s), patch
    labels (N, grid*grid) in row-major patch order, and the weights.
    """
    if n_textures < 1 or grid < 1 or patch_size < 2:
        raise ValueError("need n_textures >= 1, grid >= 1, patch_size >= 2")
    rng = np.random.default_rng(seed)
    omega = rng.dirichlet(np.full(n_textures, concentration), size=n_images)
    n_patch = grid * grid
    labels = np.array([rng.choice(n_textures, size=n_patch, p=w) for w in omega])
    patches = np.empty((n_images, n_patch, patch_size, patch_size))
    for k in range(n_textures):
        mask = labels == k
        patches[mask] = _texture_patch(rng, k, patch_size, int(mask.sum()), noise)
    imgs = patches.reshape(n_images, grid, grid, patch_size, patch_size)
    imgs = imgs.transpose(0, 1, 3, 2, 4).reshape(n_images, grid * patch_size, grid * patch_size)
    return TextureCorpus(imgs, labels, omega, patch_size)


# ---------------------------------------------------------------------------
# file formats

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def load_idx(path):
    """Read an IDX ubyte file; images are scaled to [0, 1], labels stay integers."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == _IDX_IMAGES:
        if len(data) < 16:
            raise ValueError(f"{path}: truncated IDX header")
        shape = struct.unpack(">III", data[4:16])
        off = 16
    elif magic == _IDX_LABELS:
        shape = struct.unpack(">I", data[4:8])
        off = 8
    else:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    count = int(np.prod(shape))
    if len(data) - off < count:
        raise ValueError(f"{path}: truncated IDX payload, expected {count} bytes, found {len(data) - off}")
    raw = np.frombuffer(data, np.uint8, count, off).reshape(shape)
    if magic == _IDX_IMAGES:
        return raw.astype(float) / 255.0
    return raw.astype(np.int64)


def write_idx(path, array):
    """Write uint8 data as IDX: 3-d arrays as images, 1-d as labels."""
    a = np.asarray(array)
    if a.ndim == 3:
        header = struct.pack(">IIII", _IDX_IMAGES, *a.shape)
    elif a.ndim == 1:
        header = struct.pack(">II", _IDX_LABELS, a.shape[0])
    else:
        raise ValueError("IDX export supports (N, H, W) images or (N,) labels")
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValueError("IDX values must fit in a byte")
    with open(path, "wb") as fh:
        fh.write(header + a.astype(np.uint8).tobytes())


def _pgm_tokens(data):
    # header tokens of a P5 file, skipping comments; returns tokens and payload offset
    tokens, i = [], 0
    while len(tokens) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1


def read_pgm(path):
    """Binary PGM (P5, maxval 255) scaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, off = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if len(data) - off < w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, np.uint8, w * h, off).reshape(h, w).astype(float) / 255.0


def write_pgm(path, image):
    """Write an image in [0, 1] as P5 with maxval 255."""
    img = np.clip(np.round(np.asarray(image, dtype=float) * 255), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-d")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())


_RPMD = b"RPMD"


def write_rpmd(path, arrays):
    """Named float arrays: magic, u32 count, then per array u32 name length,
    utf-8 name, u32 ndim, u32 dims, little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(_RPMD + struct.pack("<I", len(arrays)))
        for name, a in arrays.items():
            a = np.ascontiguousarray(a, dtype="<f8")
            key = name.encode()
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def read_rpmd(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _RPMD:
        raise ValueError(f"{path}: not an RPMD container")
    out = {}
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        off = 8
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + klen].decode()
            off += 4 + klen
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(shape))
            if off + 8 * n > len(data):
                raise ValueError(f"{path}: truncated RPMD container")
            out[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
    except struct.error as exc:
        raise ValueError(f"{path}: truncated RPMD container") from exc
    return out
