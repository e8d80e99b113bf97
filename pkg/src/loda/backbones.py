"""Frozen feature producers: a pre-norm ViT encoder and a four-stage CNN.

Both are initialised from a seed instead of real pretrained checkpoints.
Weights produced elsewhere can be loaded with :func:`load_frozen` as long as
they follow the tensor names documented on :func:`init_vit` / :func:`init_cnn`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import functional as F
from .exceptions import ConfigError, ShapeError, WeightFileError
from .tensor import Tensor, concat, reshape, rng, transpose

Params = dict[str, Tensor]


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 64
    num_layers: int = 4
    num_attn_heads: int = 4
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_attn_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_attn_heads {self.num_attn_heads}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return 1 + self.grid ** 2

    @classmethod
    def full(cls) -> "VitConfig":
        return cls(image_size=224, patch_size=16, embed_dim=768, num_layers=12, num_attn_heads=12)


@dataclass(frozen=True)
class CnnConfig:
    """Stem plus four stages; stage ``j`` halves the resolution of stage ``j-1``.

    ``stem_stride * stage_strides[0]`` is the stride of the first feature map.
    """

    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_strides: tuple[int, ...] = (2, 2, 2, 2)
    kernel_sizes: tuple[int, ...] = (3, 3, 3, 3)
    stem_channels: int = 8
    stem_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if not (len(self.stage_channels) == len(self.stage_strides) == len(self.kernel_sizes) == 4):
            raise ConfigError("CNN needs exactly 4 stages")
        if any(s != 2 for s in self.stage_strides[1:]):
            raise ConfigError(f"stages 2-4 must have stride 2, got {self.stage_strides}")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError("kernel sizes must be odd")

    @property
    def total_stride(self) -> int:
        return self.stem_stride * math.prod(self.stage_strides)

    def feature_sizes(self, size: int) -> list[int]:
        first = size // (self.stem_stride * self.stage_strides[0])
        return [first >> j for j in range(4)]

    @classmethod
    def full(cls) -> "CnnConfig":
        return cls(stage_channels=(256, 512, 1024, 2048), stage_strides=(2, 2, 2, 2),
                   kernel_sizes=(3, 3, 3, 3), stem_channels=64, stem_stride=2)


@dataclass
class FrozenParams:
    vit: Params
    cnn: Params
    vit_config: VitConfig = field(default_factory=VitConfig)
    cnn_config: CnnConfig = field(default_factory=CnnConfig)

    def items(self):
        for k, v in self.vit.items():
            yield f"vit.{k}", v
        for k, v in self.cnn.items():
            yield f"cnn.{k}", v

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw bytes of every tensor."""
        h = hashlib.sha256()
        for name, t in sorted(self.items()):
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return sum(t.size for _, t in self.items())


# initialisation --------------------------------------------------------------


def _lecun(gen, shape, fan_in):
    return Tensor(gen.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))


def init_vit(cfg: VitConfig, gen: np.random.Generator) -> Params:
    """Tensor names: ``patch.w (p*p*3, D)``, ``patch.b``, ``cls (1,1,D)``,
    ``pos (1,l,D)``, per layer ``L{i}.{ln1_g,ln1_b,qkv_w,qkv_b,proj_w,proj_b,
    ln2_g,ln2_b,fc1_w,fc1_b,fc2_w,fc2_b}``, and ``norm_g``/``norm_b``."""
    d, p = cfg.embed_dim, cfg.patch_size
    hidden = d * cfg.mlp_ratio
    params: Params = {
        "patch.w": _lecun(gen, (p * p * 3, d), p * p * 3),
        "patch.b": Tensor(np.zeros(d)),
        "cls": Tensor(gen.normal(0.0, 0.02, size=(1, 1, d))),
        "pos": Tensor(gen.normal(0.0, 0.02, size=(1, cfg.num_tokens, d))),
    }
    for i in range(cfg.num_layers):
        params.update({
            f"L{i}.ln1_g": Tensor(np.ones(d)),
            f"L{i}.ln1_b": Tensor(np.zeros(d)),
            f"L{i}.qkv_w": _lecun(gen, (d, 3 * d), d),
            f"L{i}.qkv_b": Tensor(np.zeros(3 * d)),
            f"L{i}.proj_w": _lecun(gen, (d, d), d),
            f"L{i}.proj_b": Tensor(np.zeros(d)),
            f"L{i}.ln2_g": Tensor(np.ones(d)),
            f"L{i}.ln2_b": Tensor(np.zeros(d)),
            f"L{i}.fc1_w": _lecun(gen, (d, hidden), d),
            f"L{i}.fc1_b": Tensor(np.zeros(hidden)),
            f"L{i}.fc2_w": _lecun(gen, (hidden, d), hidden),
            f"L{i}.fc2_b": Tensor(np.zeros(d)),
        })
    params["norm_g"] = Tensor(np.ones(d))
    params["norm_b"] = Tensor(np.zeros(d))
    return params


def init_cnn(cfg: CnnConfig, gen: np.random.Generator) -> Params:
    """Tensor names: ``stem.w``, ``stem.b``, ``S{j}.w``, ``S{j}.b`` for j=0..3."""
    params: Params = {}
    k = cfg.kernel_sizes[0]
    params["stem.w"] = Tensor(gen.normal(0.0, math.sqrt(2.0 / (3 * k * k)), size=(cfg.stem_channels, 3, k, k)))
    params["stem.b"] = Tensor(np.zeros(cfg.stem_channels))
    c_in = cfg.stem_channels
    for j, (c, ks) in enumerate(zip(cfg.stage_channels, cfg.kernel_sizes)):
        params[f"S{j}.w"] = Tensor(gen.normal(0.0, math.sqrt(2.0 / (c_in * ks * ks)), size=(c, c_in, ks, ks)))
        params[f"S{j}.b"] = Tensor(np.zeros(c))
        c_in = c
    return params


def init_frozen(seed: int, vit_cfg: VitConfig | None = None, cnn_cfg: CnnConfig | None = None) -> FrozenParams:
    vit_cfg = vit_cfg or VitConfig()
    cnn_cfg = cnn_cfg or CnnConfig()
    gen = rng(seed)
    return FrozenParams(init_vit(vit_cfg, gen), init_cnn(cnn_cfg, gen), vit_cfg, cnn_cfg)


def load_frozen(path, vit_cfg: VitConfig | None = None, cnn_cfg: CnnConfig | None = None) -> FrozenParams:
    """Load frozen backbone weights written by :func:`loda.weights.save_weights`."""
    from .weights import load_weights

    vit_cfg = vit_cfg or VitConfig()
    cnn_cfg = cnn_cfg or CnnConfig()
    template = init_frozen(0, vit_cfg, cnn_cfg)
    raw = load_weights(path, namespace="frozen")
    vit, cnn = {}, {}
    for name, ref in template.items():
        if name not in raw:
            raise WeightFileError(f"{path}: missing tensor {name!r}")
        arr = raw[name]
        if arr.shape != ref.shape:
            raise ShapeError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {ref.shape}")
        group, key = name.split(".", 1)
        (vit if group == "vit" else cnn)[key] = Tensor(arr)
    return FrozenParams(vit, cnn, vit_cfg, cnn_cfg)


def save_frozen(frozen: FrozenParams, path) -> None:
    from .weights import save_weights

    save_weights({k: v.data for k, v in frozen.items()}, path, namespace="frozen")


# ViT forward -----------------------------------------------------------------


def patchify(image: Tensor, patch: int) -> Tensor:
    """(b, C, H, W) -> (b, n_patches, patch*patch*C), row-major patch order."""
    b, c, h, w = image.shape
    gh, gw = h // patch, w // patch
    x = reshape(image, (b, c, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 3, 5, 1))
    return reshape(x, (b, gh * gw, patch * patch * c))


def patch_embed(image: Tensor, cfg: VitConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Image to (b, 1 + grid^2, D) tokens: CLS first, position embeddings added."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"patch_embed: expected (b,3,H,W), got {image.shape}")
    b, _, h, w = image.shape
    if h != cfg.image_size or w != cfg.image_size:
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ConfigError(f"image {h}x{w} not divisible into {cfg.patch_size}px patches")
        raise ShapeError(f"patch_embed: image {h}x{w} does not match image_size {cfg.image_size}")
    tokens = F.affine(patchify(image, cfg.patch_size), params["patch.w"], params["patch.b"])
    cls = params["cls"] * Tensor(np.ones((b, 1, 1)))
    return concat([cls, tokens], axis=1) + params["pos"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention on already-projected inputs.

    q: (b, n_q, r); k, v: (b, n_kv, r).  Returns (b, n_q, r).
    """
    r = q.shape[-1]
    if r % heads:
        raise ConfigError(f"dimension {r} not divisible by {heads} heads")
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = (qh @ transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(r // heads))
    weights = F.softmax(scores, axis=-1)
    out = _merge_heads(weights @ vh)
    return (out, weights) if return_weights else out


def vit_encoder_layer(tokens: Tensor, i: int, cfg: VitConfig, params: Mapping[str, Tensor]) -> Tensor:
    if not 0 <= i < cfg.num_layers:
        raise ConfigError(f"layer index {i} outside [0, {cfg.num_layers})")
    p = f"L{i}."
    d = cfg.embed_dim
    h = F.layernorm(tokens, params[p + "ln1_g"], params[p + "ln1_b"], cfg.ln_eps)
    qkv = F.affine(h, params[p + "qkv_w"], params[p + "qkv_b"])
    q, k, v = qkv[:, :, :d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:]
    attn = attention(q, k, v, cfg.num_attn_heads)
    tokens = tokens + F.affine(attn, params[p + "proj_w"], params[p + "proj_b"])
    h = F.layernorm(tokens, params[p + "ln2_g"], params[p + "ln2_b"], cfg.ln_eps)
    h = F.gelu(F.affine(h, params[p + "fc1_w"], params[p + "fc1_b"]))
    return tokens + F.affine(h, params[p + "fc2_w"], params[p + "fc2_b"])


def vit_final_cls(tokens: Tensor, cfg: VitConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Final layer norm applied to the CLS token, shape (b, D)."""
    return F.layernorm(tokens[:, 0, :], params["norm_g"], params["norm_b"], cfg.ln_eps)


# CNN forward -----------------------------------------------------------------


def cnn_forward(image: Tensor, cfg: CnnConfig, params: Mapping[str, Tensor]) -> list[Tensor]:
    """Post-activation feature map of each of the four stages."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"cnn_forward: expected (b,3,H,W), got {image.shape}")
    h, w = image.shape[2:]
    if h % cfg.total_stride or w % cfg.total_stride:
        raise ConfigError(f"input {h}x{w} not divisible by total CNN stride {cfg.total_stride}")
    k = cfg.kernel_sizes[0]
    x = F.relu(F.conv2d(image, params["stem.w"], params["stem.b"], stride=cfg.stem_stride, padding=k // 2))
    maps = []
    for j in range(4):
        ks = cfg.kernel_sizes[j]
        x = F.relu(F.conv2d(x, params[f"S{j}.w"], params[f"S{j}.b"], stride=cfg.stage_strides[j], padding=ks // 2))
        maps.append(x)
    return maps
