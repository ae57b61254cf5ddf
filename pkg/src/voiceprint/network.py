"""VGG-style embedding network built from the layer primitives.

Conv blocks with max-pooling between blocks (none after the last), global
average pooling so one parameter set accepts any input geometry, then a
1024-unit hidden layer, dropout, and a 256-d embedding that is L2
normalized. A bias-free classification head (`head.weight`, one row per
class) lives alongside the trunk so checkpoints carry everything needed
for evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigError, FormatError

CHECKPOINT_MAGIC = b"VPCK"
CHECKPOINT_VERSION = 1

PRESETS = {
    # (conv_count, channels) per block
    "vgg16m": ((2, 64), (2, 128), (2, 256), (3, 512), (3, 512)),
    "tiny": ((1, 8), (1, 16)),
}


@dataclass(frozen=True)
class NetworkConfig:
    blocks: tuple[tuple[int, int], ...]
    num_classes: int
    hidden_dim: int = 1024
    dropout_p: float = 0.3
    embedding_dim: int = 256
    use_global_avg_pool: bool = True

    def __post_init__(self):
        if self.embedding_dim <= 0 or self.num_classes < 1:
            raise ValueError("embedding_dim and num_classes must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if not self.blocks or any(n < 1 or ch < 1 for n, ch in self.blocks):
            raise ValueError("blocks must be non-empty (conv_count, channels) pairs")
        if not self.use_global_avg_pool:
            raise ValueError("only the global-average-pool variant is supported")

    @staticmethod
    def preset(name: str, num_classes: int, **overrides) -> "NetworkConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown network preset {name!r}; have {sorted(PRESETS)}")
        return NetworkConfig(blocks=PRESETS[name], num_classes=num_classes, **overrides)


@dataclass
class Parameter:
    name: str
    data: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.data)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class EmbeddingNetwork:
    """Trunk + head parameters with explicit forward/backward passes."""

    def __init__(self, config: NetworkConfig, seed: int = 0,
                 dtype=np.float32, init: bool = True):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)

        def add(name, shape, fan_in):
            data = (he_uniform(rng, shape, fan_in, self.dtype) if init
                    else np.zeros(shape, self.dtype))
            self.params[name] = Parameter(name, data)

        in_ch = 3
        for b, (n_convs, channels) in enumerate(config.blocks, start=1):
            for i in range(1, n_convs + 1):
                add(f"block{b}.conv{i}.weight", (channels, in_ch, 3, 3), in_ch * 9)
                self.params[f"block{b}.conv{i}.bias"] = Parameter(
                    f"block{b}.conv{i}.bias", np.zeros(channels, self.dtype))
                in_ch = channels
        add("fc1.weight", (in_ch, config.hidden_dim), in_ch)
        self.params["fc1.bias"] = Parameter("fc1.bias", np.zeros(config.hidden_dim, self.dtype))
        add("fc2.weight", (config.hidden_dim, config.embedding_dim), config.hidden_dim)
        self.params["fc2.bias"] = Parameter("fc2.bias", np.zeros(config.embedding_dim, self.dtype))
        add("head.weight", (config.num_classes, config.embedding_dim), config.embedding_dim)

    def parameter_count(self, include_head: bool = True) -> int:
        return sum(p.data.size for p in self.params.values()
                   if include_head or not p.name.startswith("head."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad.fill(0)

    @property
    def head_weight(self) -> Parameter:
        return self.params["head.weight"]

    def forward_embed(self, x: np.ndarray, train: bool = False,
                      dropout_rng: np.random.Generator | None = None,
                      keep_cache: bool = False):
        """Map [N,3,H,W] inputs to unit-norm embeddings [N, embedding_dim].

        Returns (embeddings, cache); cache is None unless keep_cache asks
        for the intermediates the backward pass needs.
        """
        if x.ndim != 4 or x.shape[1] != 3:
            raise layers.ShapeError(f"expected [N,3,H,W] input, got {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        steps = [] if keep_cache else None
        n_blocks = len(self.config.blocks)
        for b, (n_convs, _) in enumerate(self.config.blocks, start=1):
            for i in range(1, n_convs + 1):
                name = f"block{b}.conv{i}"
                cols = layers.im2col3x3(x) if keep_cache else None
                pre = layers.conv2d_forward(x, self.params[f"{name}.weight"].data,
                                            self.params[f"{name}.bias"].data, cols=cols)
                if keep_cache:
                    steps.append(("conv", name, x, cols, pre))
                x = layers.relu_forward(pre)
            if b < n_blocks:
                out, arg = layers.maxpool2_forward(x)
                if keep_cache:
                    steps.append(("pool", x.shape, arg))
                x = out
        if keep_cache:
            steps.append(("gap", x.shape))
        x = layers.global_avg_pool_forward(x)

        for name in ("fc1", "fc2"):
            pre = layers.dense_forward(x, self.params[f"{name}.weight"].data,
                                       self.params[f"{name}.bias"].data)
            if keep_cache:
                steps.append(("dense", name, x, pre))
            x = layers.relu_forward(pre)
            if name == "fc1":
                x, mask = layers.dropout_forward(x, self.config.dropout_p,
                                                 train, dropout_rng)
                if keep_cache:
                    steps.append(("dropout", mask))
        emb, norms = layers.l2_normalize_forward(x)
        if keep_cache:
            steps.append(("l2norm", emb, norms))
        return emb, steps

    def backward(self, cache, grad_emb: np.ndarray) -> None:
        """Accumulate parameter gradients from d(loss)/d(embeddings)."""
        if not cache:
            raise ValueError("backward needs the cache from keep_cache=True")
        g = grad_emb
        first_conv = next(i for i, s in enumerate(cache) if s[0] == "conv")
        for i in range(len(cache) - 1, -1, -1):
            step = cache[i]
            kind = step[0]
            if kind == "l2norm":
                _, emb, norms = step
                g = layers.l2_normalize_backward(emb, norms, g)
            elif kind == "dropout":
                g = layers.dropout_backward(step[1], g)
            elif kind == "dense":
                _, name, x_in, pre = step
                g = layers.relu_backward(pre, g)
                g, gw, gb = layers.dense_backward(
                    x_in, self.params[f"{name}.weight"].data, g)
                self.params[f"{name}.weight"].grad += gw
                self.params[f"{name}.bias"].grad += gb
            elif kind == "gap":
                g = layers.global_avg_pool_backward(step[1], g)
            elif kind == "pool":
                _, x_shape, arg = step
                g = layers.maxpool2_backward(x_shape, arg, g)
            elif kind == "conv":
                _, name, x_in, cols, pre = step
                g = layers.relu_backward(pre, g)
                g, gw, gb = layers.conv2d_backward(
                    x_in, self.params[f"{name}.weight"].data, g,
                    cols=cols, need_input_grad=(i != first_conv))
                self.params[f"{name}.weight"].grad += gw
                self.params[f"{name}.bias"].grad += gb
            else:
                raise AssertionError(f"unknown step {kind}")


def stack_features(arrays) -> np.ndarray:
    """Stack (H, W, 3) feature images into an NCHW batch."""
    batch = np.stack([np.asarray(a) for a in arrays])
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


def _config_to_text(config: NetworkConfig, extra: dict[str, str]) -> str:
    lines = [
        "blocks=" + ",".join(f"{n}x{ch}" for n, ch in config.blocks),
        f"num_classes={config.num_classes}",
        f"hidden_dim={config.hidden_dim}",
        f"dropout_p={config.dropout_p!r}",
        f"embedding_dim={config.embedding_dim}",
        f"use_global_avg_pool={int(config.use_global_avg_pool)}",
    ]
    for key in sorted(extra):
        if "=" in key or "\n" in key or "\n" in extra[key]:
            raise ValueError(f"invalid metadata entry {key!r}")
        lines.append(f"{key}={extra[key]}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> tuple[NetworkConfig, dict[str, str]]:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            fields[key] = value
    try:
        blocks = tuple(
            (int(part.split("x")[0]), int(part.split("x")[1]))
            for part in fields.pop("blocks").split(","))
        config = NetworkConfig(
            blocks=blocks,
            num_classes=int(fields.pop("num_classes")),
            hidden_dim=int(fields.pop("hidden_dim")),
            dropout_p=float(fields.pop("dropout_p")),
            embedding_dim=int(fields.pop("embedding_dim")),
            use_global_avg_pool=bool(int(fields.pop("use_global_avg_pool"))),
        )
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"bad checkpoint config block: {exc}") from exc
    return config, fields


def checkpoint_to_bytes(net: EmbeddingNetwork, extra: dict[str, str] | None = None) -> bytes:
    config_blob = _config_to_text(net.config, extra or {}).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(config_blob)),
           config_blob, struct.pack("<I", len(net.params))]
    for name, p in net.params.items():
        blob = name.encode()
        out.append(struct.pack("<H", len(blob)) + blob)
        out.append(struct.pack("<B", p.data.ndim))
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


def checkpoint_from_bytes(blob: bytes) -> tuple[EmbeddingNetwork, dict[str, str]]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, config_len = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 10
    config, extra = _config_from_text(blob[pos:pos + config_len].decode())
    pos += config_len
    (n_params,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    net = EmbeddingNetwork(config, dtype=np.float32, init=False)
    seen = set()
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name not in net.params or net.params[name].data.shape != tuple(shape):
            raise FormatError(f"unexpected parameter {name} {tuple(shape)}")
        net.params[name].data = data.copy()
        seen.add(name)
    if seen != set(net.params):
        raise FormatError("checkpoint is missing parameters")
    return net, extra


def save_checkpoint(path, net: EmbeddingNetwork, extra: dict[str, str] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(net, extra))


def load_checkpoint(path) -> tuple[EmbeddingNetwork, dict[str, str]]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
