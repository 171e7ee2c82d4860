"""Shifted-window transformer classifier.

The network is built entirely from the ops in :mod:`swinscan.tensor`:
patch embedding, stages of window attention blocks with alternating
cyclic shift, patch merging between stages, and a linear head.  Two
class counts share one code path: 2 (tumor present yes/no) and
3 (meningioma / glioma / pituitary).

Weight files use the "SWNW" container described next to
:func:`save_weights`; round trips are bit exact.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    ConfigurationError,
    DimensionError,
    InputError,
    WeightFormatError,
)

MASK_NEG = -1e9  # finite stand-in for -inf so softmax never sees a NaN


@dataclass(frozen=True)
class SwinConfig:
    """Architecture hyperparameters.

    The defaults are the desk-scale setup used throughout: 64 px input,
    4 px patches, two stages of two blocks, token grids 16x16 then 8x8.
    """

    image_size: int = 64
    in_channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple = (2, 2)
    num_heads: tuple = (2, 4)
    window_size: int = 4
    shift_size: int = 2
    mlp_ratio: int = 4
    num_classes: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if len(self.depths) == 0 or len(self.depths) != len(self.num_heads):
            raise ConfigurationError("depths and num_heads must be equal-length and non-empty")
        if not 0 <= self.shift_size < self.window_size:
            raise ConfigurationError(
                f"shift_size {self.shift_size} must lie in [0, window_size {self.window_size})"
            )
        if self.num_classes not in (2, 3):
            raise ConfigurationError(f"num_classes must be 2 or 3, got {self.num_classes}")
        side = self.image_size // self.patch_size
        for s in range(len(self.depths)):
            if side % self.window_size != 0:
                raise ConfigurationError(
                    f"stage {s} token grid {side} not divisible by window_size {self.window_size}"
                )
            if s + 1 < len(self.depths):
                if side % 2 != 0:
                    raise ConfigurationError(f"stage {s} grid {side} is odd, cannot merge")
                side //= 2
            if (self.embed_dim * (2 ** s)) % self.num_heads[s] != 0:
                raise ConfigurationError(
                    f"stage {s} channels not divisible by {self.num_heads[s]} heads"
                )

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    def stage_grid(self, stage: int) -> int:
        return self.grid_size // (2 ** stage)


def default_config(num_classes: int) -> SwinConfig:
    """The fixed desk-scale architecture for a given head size."""
    return SwinConfig(num_classes=num_classes)


# ---------------------------------------------------------------------------
# parameters


def _block_paths(prefix: str, dim: int, heads: int, window: int):
    t = (2 * window - 1) ** 2
    return [
        (prefix + "norm1.gamma", (dim,)),
        (prefix + "norm1.beta", (dim,)),
        (prefix + "attn.qkv.weight", (dim, 3 * dim)),
        (prefix + "attn.qkv.bias", (3 * dim,)),
        (prefix + "attn.proj.weight", (dim, dim)),
        (prefix + "attn.proj.bias", (dim,)),
        (prefix + "attn.bias_table", (t, heads)),
        (prefix + "norm2.gamma", (dim,)),
        (prefix + "norm2.beta", (dim,)),
        (prefix + "mlp.fc1.weight", (dim, 0)),  # hidden filled in below
        (prefix + "mlp.fc1.bias", (0,)),
        (prefix + "mlp.fc2.weight", (0, dim)),
        (prefix + "mlp.fc2.bias", (dim,)),
    ]


def expected_shapes(config: SwinConfig) -> dict:
    """Canonical parameter path -> shape map declared by a config."""
    patch_dim = config.in_channels * config.patch_size ** 2
    shapes = {
        "patch_embed.proj.weight": (patch_dim, config.embed_dim),
        "patch_embed.proj.bias": (config.embed_dim,),
    }
    for s, depth in enumerate(config.depths):
        dim = config.stage_dim(s)
        hidden = config.mlp_ratio * dim
        for b in range(depth):
            for path, shape in _block_paths(
                f"stage{s}.block{b}.", dim, config.num_heads[s], config.window_size
            ):
                if path.endswith("mlp.fc1.weight"):
                    shape = (dim, hidden)
                elif path.endswith("mlp.fc1.bias"):
                    shape = (hidden,)
                elif path.endswith("mlp.fc2.weight"):
                    shape = (hidden, dim)
                shapes[path] = shape
        if s + 1 < len(config.depths):
            shapes[f"merge{s}.norm.gamma"] = (4 * dim,)
            shapes[f"merge{s}.norm.beta"] = (4 * dim,)
            shapes[f"merge{s}.reduce.weight"] = (4 * dim, 2 * dim)
    final = config.stage_dim(len(config.depths) - 1)
    shapes["head.norm.gamma"] = (final,)
    shapes["head.norm.beta"] = (final,)
    shapes["head.fc.weight"] = (final, config.num_classes)
    shapes["head.fc.bias"] = (config.num_classes,)
    return shapes


def _trunc_normal(rng, shape, std=0.02):
    # resample anything beyond two standard deviations
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class ModelWeights:
    """Named map from parameter path to Tensor.

    Immutable as a collection once constructed: training updates tensor
    contents in place, but the path set never changes.  Concurrent
    forward passes may share an instance read-only.
    """

    def __init__(self, config: SwinConfig, params: dict):
        expected = expected_shapes(config)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ConfigurationError(
                f"weight set does not match config: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for path, t in params.items():
            if t.shape != expected[path]:
                raise ConfigurationError(
                    f"parameter {path} has shape {list(t.shape)}, expected {list(expected[path])}"
                )
        self.config = config
        self._params = {path: params[path] for path in sorted(params)}

    @classmethod
    def init(cls, config: SwinConfig, seed: int) -> "ModelWeights":
        """Fresh weights: truncated normal (std 0.02) matrices and
        tables, ones for norm scales, zeros for every bias."""
        rng = np.random.default_rng(seed)
        params = {}
        for path, shape in expected_shapes(config).items():
            if path.endswith(".gamma"):
                data = np.ones(shape)
            elif path.endswith(".beta") or path.endswith(".bias") or path.endswith("bias_table"):
                data = np.zeros(shape)
            else:
                data = _trunc_normal(rng, shape)
            params[path] = T.Tensor(data, requires_grad=True)
        return cls(config, params)

    def __getitem__(self, path: str) -> T.Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def paths(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def subset(self, prefix: str) -> dict:
        """All parameters under a prefix, keyed by the remainder."""
        n = len(prefix)
        return {path[n:]: t for path, t in self._params.items() if path.startswith(prefix)}


# ---------------------------------------------------------------------------
# window mechanics


class MacCounter:
    """Accumulates multiply-accumulate counts for attention calls."""

    __slots__ = ("macs",)

    def __init__(self):
        self.macs = 0

    def add(self, n):
        self.macs += int(n)


def patch_embed(image: np.ndarray, weights: ModelWeights) -> T.Tensor:
    """Flatten non-overlapping patches and project them linearly.

    Returns one token per patch, row-major over the patch grid.
    """
    tokens = _patch_embed_batch(np.asarray(image, dtype=np.float64)[None], weights)
    return T.reshape(tokens, tokens.shape[1:])


def _patch_embed_batch(images: np.ndarray, weights: ModelWeights) -> T.Tensor:
    config = weights.config
    b, c, h, w = images.shape
    if c != config.in_channels:
        raise InputError(f"expected {config.in_channels} channels, got {c}")
    if (h, w) != (config.image_size, config.image_size):
        raise InputError(
            f"expected {config.image_size}x{config.image_size} input, got {h}x{w}"
        )
    p = config.patch_size
    g = config.grid_size
    # each patch flattened channel-major, patches row-major over the grid
    x = images.reshape(b, c, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
    tokens = T.matmul(T.Tensor(x), weights["patch_embed.proj.weight"])
    return T.add(tokens, weights["patch_embed.proj.bias"])


def window_partition(tokens: T.Tensor, window_size: int) -> T.Tensor:
    """Split an H x W x C token grid into windows.

    The result stacks windows along the first axis, shape
    (num_windows, window_size**2, C): windows in row-major grid order,
    tokens row-major within each window.
    """
    h, w, c = tokens.shape
    x = T.reshape(tokens, (1, h, w, c))
    return _window_partition_batch(x, window_size)


def _window_partition_batch(tokens: T.Tensor, window_size: int) -> T.Tensor:
    b, h, w, c = tokens.shape
    if h % window_size != 0 or w % window_size != 0:
        raise ConfigurationError(
            f"grid {h}x{w} not divisible by window_size {window_size}"
        )
    hw, ww = h // window_size, w // window_size
    x = T.reshape(tokens, (b, hw, window_size, ww, window_size, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * hw * ww, window_size * window_size, c))


def window_reverse(windows: T.Tensor, h: int, w: int, window_size: int) -> T.Tensor:
    """Exact inverse of :func:`window_partition` for one grid."""
    n_win, n_tok, c = windows.shape
    if n_win * n_tok != h * w or n_tok != window_size ** 2:
        raise DimensionError(
            f"{n_win} windows of {n_tok} tokens cannot tile a {h}x{w} grid"
        )
    x = _window_reverse_batch(windows, 1, h, w, window_size)
    return T.reshape(x, (h, w, c))


def _window_reverse_batch(windows: T.Tensor, b: int, h: int, w: int, window_size: int) -> T.Tensor:
    c = windows.shape[-1]
    hw, ww = h // window_size, w // window_size
    x = T.reshape(windows, (b, hw, ww, window_size, window_size, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def cyclic_shift(tokens: T.Tensor, dy: int, dx: int) -> T.Tensor:
    """Toroidal roll of the grid by (-dy, -dx).

    cyclic_shift(cyclic_shift(x, dy, dx), -dy, -dx) is the identity.
    """
    axis_h = tokens.ndim - 3
    return T.roll(tokens, (-dy, -dx), (axis_h, axis_h + 1))


def build_shift_mask(h: int, w: int, window_size: int, shift_size: int) -> np.ndarray:
    """Per-window additive attention mask for a shifted grid.

    Tokens that originated in different regions before the cyclic shift
    must not attend to each other; those pairs get MASK_NEG, all others
    zero.  Shape (num_windows, window_size**2, window_size**2).
    """
    n_win = (h // window_size) * (w // window_size)
    n_tok = window_size ** 2
    if shift_size == 0:
        return np.zeros((n_win, n_tok, n_tok))
    # region ids in post-shift coordinates: three row bands and three
    # column bands, cut at -window_size and -shift_size
    ids = np.zeros((h, w))
    cut = (slice(0, -window_size), slice(-window_size, -shift_size), slice(-shift_size, None))
    region = 0
    for rows in cut:
        for cols in cut:
            ids[rows, cols] = region
            region += 1
    win_ids = (
        ids.reshape(h // window_size, window_size, w // window_size, window_size)
        .transpose(0, 2, 1, 3)
        .reshape(n_win, n_tok)
    )
    diff = win_ids[:, :, None] - win_ids[:, None, :]
    return np.where(diff == 0, 0.0, MASK_NEG)


def relative_bias_index(window_size: int) -> np.ndarray:
    """Map every token pair to its slot in the (2w-1)**2 bias table.

    Pairs with the same (row delta, col delta) share a slot.
    """
    coords = np.stack(
        np.meshgrid(np.arange(window_size), np.arange(window_size), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    delta = coords[:, None, :] - coords[None, :, :] + window_size - 1
    return delta[:, :, 0] * (2 * window_size - 1) + delta[:, :, 1]


def window_attention(
    windows: T.Tensor,
    weights: dict,
    bias_table: T.Tensor,
    num_heads: int,
    mask: np.ndarray = None,
    counter: MacCounter = None,
) -> T.Tensor:
    """Multi-head self-attention inside each window.

    ``weights`` maps "qkv.weight", "qkv.bias", "proj.weight", and
    "proj.bias" to tensors.  ``mask`` is an additive per-window matrix
    (entries 0 or MASK_NEG) applied before the softmax; ``bias_table``
    supplies the relative position bias.
    """
    n_win, n_tok, c = windows.shape
    if c % num_heads != 0:
        raise ConfigurationError(f"channels {c} not divisible by {num_heads} heads")
    dh = c // num_heads
    window_size = int(round(n_tok ** 0.5))
    if window_size ** 2 != n_tok:
        raise DimensionError(f"{n_tok} tokens per window is not a square count")

    qkv = T.add(T.matmul(windows, weights["qkv.weight"]), weights["qkv.bias"])
    qkv = T.reshape(qkv, (n_win, n_tok, 3, num_heads, dh))
    qkv = T.permute(qkv, (2, 0, 3, 1, 4))
    q = T.reshape(T.slice_axis(qkv, 0, 0, 1), (n_win, num_heads, n_tok, dh))
    k = T.reshape(T.slice_axis(qkv, 0, 1, 2), (n_win, num_heads, n_tok, dh))
    v = T.reshape(T.slice_axis(qkv, 0, 2, 3), (n_win, num_heads, n_tok, dh))

    attn = T.matmul(q, T.permute(k, (0, 1, 3, 2)))
    attn = T.scale(attn, 1.0 / np.sqrt(dh))

    idx = relative_bias_index(window_size).reshape(-1)
    bias = T.take_rows(bias_table, idx)
    bias = T.permute(T.reshape(bias, (n_tok, n_tok, num_heads)), (2, 0, 1))
    attn = T.add(attn, bias)

    if mask is not None:
        if mask.shape != (n_win, n_tok, n_tok):
            raise DimensionError(
                f"mask shape {list(mask.shape)} does not match {n_win} windows of {n_tok} tokens"
            )
        full = np.repeat(mask[:, None, :, :], num_heads, axis=1)
        attn = T.add(attn, T.Tensor(full))

    attn = T.softmax_lastdim(attn)
    out = T.matmul(attn, v)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (n_win, n_tok, c))
    out = T.add(T.matmul(out, weights["proj.weight"]), weights["proj.bias"])

    if counter is not None:
        per_window = (
            n_tok * c * 3 * c            # qkv projection
            + num_heads * n_tok * n_tok * dh  # logits
            + num_heads * n_tok * n_tok * dh  # weighted values
            + n_tok * c * c              # output projection
        )
        counter.add(n_win * per_window)
    return out


def merge_neighborhoods(tokens: T.Tensor) -> T.Tensor:
    """Concatenate each 2x2 neighborhood into one 4C token.

    Channel slot order is fixed: top-left, bottom-left, top-right,
    bottom-right.  Shape (H, W, C) -> (H/2, W/2, 4C).
    """
    h, w, c = tokens.shape
    x = T.reshape(tokens, (1, h, w, c))
    x = _merge_neighborhoods_batch(x)
    return T.reshape(x, (h // 2, w // 2, 4 * c))


def _merge_neighborhoods_batch(tokens: T.Tensor) -> T.Tensor:
    b, h, w, c = tokens.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ConfigurationError(f"grid {h}x{w} has an odd extent, cannot merge 2x2")
    x = T.reshape(tokens, (b, h // 2, 2, w // 2, 2, c))
    # slot index = 2 * column parity + row parity: TL, BL, TR, BR
    x = T.permute(x, (0, 1, 3, 4, 2, 5))
    return T.reshape(x, (b, h // 2, w // 2, 4 * c))


def patch_merging(tokens: T.Tensor, weights: dict) -> T.Tensor:
    """Downsample: 2x2 concatenation, norm, then linear 4C -> 2C."""
    h, w, c = tokens.shape
    x = T.reshape(tokens, (1, h, w, c))
    x = _patch_merging_batch(x, weights)
    return T.reshape(x, (h // 2, w // 2, 2 * c))


def _patch_merging_batch(tokens: T.Tensor, weights: dict) -> T.Tensor:
    x = _merge_neighborhoods_batch(tokens)
    x = T.layer_norm(x, weights["norm.gamma"], weights["norm.beta"])
    return T.matmul(x, weights["reduce.weight"])


# ---------------------------------------------------------------------------
# full forward pass


def _block(x, weights, prefix, heads, window_size, shift, counter):
    b, h, w, c = x.shape
    p = weights.subset(prefix)

    shortcut = x
    x = T.layer_norm(x, p["norm1.gamma"], p["norm1.beta"])
    if shift:
        x = cyclic_shift(x, shift, shift)
        mask = build_shift_mask(h, w, window_size, shift)
        mask = np.tile(mask, (b, 1, 1))
    else:
        mask = None
    windows = _window_partition_batch(x, window_size)
    attn_w = {key[5:]: t for key, t in p.items() if key.startswith("attn.")}
    windows = window_attention(
        windows, attn_w, p["attn.bias_table"], heads, mask=mask, counter=counter
    )
    x = _window_reverse_batch(windows, b, h, w, window_size)
    if shift:
        x = cyclic_shift(x, -shift, -shift)
    x = T.add(shortcut, x)

    y = T.layer_norm(x, p["norm2.gamma"], p["norm2.beta"])
    y = T.gelu(T.add(T.matmul(y, p["mlp.fc1.weight"]), p["mlp.fc1.bias"]))
    y = T.add(T.matmul(y, p["mlp.fc2.weight"]), p["mlp.fc2.bias"])
    return T.add(x, y)


def forward_batch(
    images: np.ndarray, config: SwinConfig, weights: ModelWeights, counter: MacCounter = None
) -> T.Tensor:
    """Logits for a batch of normalized images, shape (B, num_classes)."""
    if weights.config != config:
        raise ConfigurationError("weights were built for a different config")
    images = np.asarray(images, dtype=np.float64)
    b = images.shape[0]
    tokens = _patch_embed_batch(images, weights)
    g = config.grid_size
    x = T.reshape(tokens, (b, g, g, config.embed_dim))

    for s, depth in enumerate(config.depths):
        for blk in range(depth):
            shift = 0 if blk % 2 == 0 else config.shift_size
            x = _block(
                x,
                weights,
                f"stage{s}.block{blk}.",
                config.num_heads[s],
                config.window_size,
                shift,
                counter,
            )
        if s + 1 < len(config.depths):
            x = _patch_merging_batch(x, weights.subset(f"merge{s}."))

    _, h, w, c = x.shape
    x = T.reshape(x, (b, h * w, c))
    x = T.layer_norm(x, weights["head.norm.gamma"], weights["head.norm.beta"])
    pooled = T.reduce_mean(x, axis=1)
    return T.add(T.matmul(pooled, weights["head.fc.weight"]), weights["head.fc.bias"])


def forward_classify(image: np.ndarray, config: SwinConfig, weights: ModelWeights):
    """Logits and softmax probabilities for a single normalized image."""
    logits = forward_batch(np.asarray(image, dtype=np.float64)[None], config, weights)
    logits = T.reshape(logits, (config.num_classes,))
    probs = T.softmax_lastdim(logits).data.copy()
    return logits, probs


# ---------------------------------------------------------------------------
# weight files

_MAGIC = b"SWNW"
_VERSION = 1


def _config_words(config: SwinConfig):
    return [
        config.image_size,
        config.in_channels,
        config.patch_size,
        config.embed_dim,
        len(config.depths),
        *config.depths,
        *config.num_heads,
        config.window_size,
        config.shift_size,
        config.mlp_ratio,
        config.num_classes,
    ]


def save_weights(path: str, weights: ModelWeights) -> None:
    """Write a SWNW weight file.

    Layout, all integers little-endian uint32: magic "SWNW", format
    version, the config block (image_size, in_channels, patch_size,
    embed_dim, stage count, depths, heads, window_size, shift_size,
    mlp_ratio, num_classes), parameter count, then per parameter: path
    length, path bytes (utf-8), rank, extents, and the raw float64
    little-endian values.  Parameters are written in sorted path order.
    """
    config = weights.config
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    words = _config_words(config)
    out += struct.pack(f"<{len(words)}I", *words)
    items = sorted(weights.items())
    out += struct.pack("<I", len(items))
    for name, tensor in items:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        out += np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightFormatError(
                f"truncated weight file: needed {n} bytes", offset=self.pos
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(path: str, expected_config: SwinConfig | None = None) -> ModelWeights:
    """Read a SWNW weight file; inverse of :func:`save_weights`.

    When expected_config is given, a file whose embedded config differs
    raises ConfigurationError instead of returning surprise weights.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != _MAGIC:
        raise WeightFormatError("bad magic, not a SWNW weight file", offset=0)
    version = r.u32()
    if version != _VERSION:
        raise WeightFormatError(f"unsupported format version {version}", offset=4)
    image_size, in_channels, patch_size, embed_dim, n_stages = (r.u32() for _ in range(5))
    depths = tuple(r.u32() for _ in range(n_stages))
    heads = tuple(r.u32() for _ in range(n_stages))
    window_size, shift_size, mlp_ratio, num_classes = (r.u32() for _ in range(4))
    try:
        config = SwinConfig(
            image_size=image_size,
            in_channels=in_channels,
            patch_size=patch_size,
            embed_dim=embed_dim,
            depths=depths,
            num_heads=heads,
            window_size=window_size,
            shift_size=shift_size,
            mlp_ratio=mlp_ratio,
            num_classes=num_classes,
        )
    except ConfigurationError as exc:
        raise WeightFormatError(f"config block invalid: {exc}", offset=8) from exc
    count = r.u32()
    params = {}
    for _ in range(count):
        name_at = r.pos
        name = r.take(r.u32()).decode("utf-8")
        if name in params:
            raise WeightFormatError(f"duplicate parameter {name}", offset=name_at)
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(8 * size)
        data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = T.Tensor(data, requires_grad=True)
    if r.pos != len(blob):
        raise WeightFormatError("trailing bytes after last parameter", offset=r.pos)
    if expected_config is not None and config != expected_config:
        raise ConfigurationError(
            f"weight file config {config} does not match expected {expected_config}"
        )
    return ModelWeights(config, params)
