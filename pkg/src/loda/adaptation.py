"""Local distortion extractor, cross-attention injector and regression head.

The model keeps the frozen backbones untouched and owns a separate set of
trainable tensors whose membership depends on the training mode:

``loda``            extractor + injector + head
``linear_probe``    head only
``full_finetune``   a trainable copy of every ViT tensor + head
``extractor_only``  extractor + direct additive fusion + head
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .backbones import (
    FrozenParams,
    attention,
    cnn_forward,
    patch_embed,
    vit_encoder_layer,
    vit_final_cls,
)
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor, concat, flatten, no_grad, reshape, rng, transpose

MODES = ("loda", "linear_probe", "full_finetune", "extractor_only")


@dataclass(frozen=True)
class AdapterConfig:
    latent_dim: int = 16
    heads: int = 4
    interactions: int = 4
    extractor_channels: int = 16
    pooled_size: int = 4

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ConfigError(f"latent_dim {self.latent_dim} not divisible by heads {self.heads}")
        if self.interactions < 1 or self.pooled_size < 1 or self.extractor_channels < 1:
            raise ConfigError("interactions, pooled_size and extractor_channels must be >= 1")

    @classmethod
    def full(cls) -> "AdapterConfig":
        return cls(latent_dim=64, heads=4, interactions=12, extractor_channels=64, pooled_size=7)


def _lecun(gen, shape, fan_in) -> Tensor:
    return Tensor(gen.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_extractor(stage_channels, acfg: AdapterConfig, gen) -> dict[str, Tensor]:
    c = acfg.extractor_channels
    params = {}
    for j, cj in enumerate(stage_channels):
        p = f"extractor.S{j}."
        params[p + "conv1_w"] = _lecun(gen, (c, cj, 1, 1), cj)
        params[p + "conv1_b"] = _zeros(c)
        params[p + "conv3_w"] = _lecun(gen, (c, c, 3, 3), 9 * c)
        params[p + "conv3_b"] = _zeros(c)
    return params


def init_injector(embed_dim: int, acfg: AdapterConfig, gen) -> dict[str, Tensor]:
    d, r, c = embed_dim, acfg.latent_dim, acfg.extractor_channels
    params = {
        "injector.kv_w": _lecun(gen, (c, r), c),
        "injector.kv_b": _zeros(r),
    }
    for i in range(acfg.interactions):
        p = f"injector.I{i}."
        params[p + "q_w"] = _lecun(gen, (d, r), d)
        params[p + "q_b"] = _zeros(r)
        for proj in ("attn_q", "attn_k", "attn_v", "attn_o"):
            params[p + proj + "_w"] = _lecun(gen, (r, r), r)
            params[p + proj + "_b"] = _zeros(r)
        bound = 1.0 / math.sqrt(r)
        params[p + "up_w"] = Tensor(gen.uniform(-bound, bound, size=(r, d)), requires_grad=True)
        params[p + "up_b"] = _zeros(d)
        params[p + "gate"] = _zeros(d)
    return params


def init_direct(embed_dim: int, acfg: AdapterConfig, gen) -> dict[str, Tensor]:
    d, c = embed_dim, acfg.extractor_channels
    params = {
        "direct.w": _lecun(gen, (c, d), c),
        "direct.b": _zeros(d),
    }
    for i in range(acfg.interactions):
        params[f"direct.I{i}.gate"] = _zeros(d)
    return params


def init_head(embed_dim: int, gen) -> dict[str, Tensor]:
    return {"head.w": _lecun(gen, (embed_dim, 1), embed_dim), "head.b": _zeros(1)}


# operations ------------------------------------------------------------------


def extract_local_distortion(feats: list[Tensor], params, acfg: AdapterConfig) -> Tensor:
    """Stage maps -> multi-scale distortion tokens of shape (b, 4*m*n, c).

    Each stage goes through 1x1 conv, 3x3 conv and adaptive average pooling to
    (m, n); the pooled maps are flattened and concatenated in stage order.
    """
    if len(feats) != 4:
        raise ShapeError(f"expected 4 stage maps, got {len(feats)}")
    blocks = []
    for j, fmap in enumerate(feats):
        p = f"extractor.S{j}."
        w1 = params[p + "conv1_w"]
        if fmap.shape[1] != w1.shape[1]:
            raise ShapeError(f"stage {j}: feature map {fmap.shape} vs conv1x1 weight {w1.shape}")
        x = F.conv2d(fmap, w1, params[p + "conv1_b"])
        x = F.conv2d(x, params[p + "conv3_w"], params[p + "conv3_b"], padding=1)
        x = F.avgpool2d(x, acfg.pooled_size)
        blocks.append(transpose(flatten(x, 2), (0, 2, 1)))  # (b, m*n, c)
    return concat(blocks, axis=1)


def project_msd(msd: Tensor, params) -> Tensor:
    """Shared key/value down-projection of the distortion tokens, (b, T, r)."""
    return F.affine(msd, params["injector.kv_w"], params["injector.kv_b"])


def cross_attend(vit_tokens: Tensor, kv: Tensor, params, i: int, heads: int, return_weights: bool = False):
    """Queried distortion tokens in latent space: MHCA(q, kv, kv) + q."""
    p = f"injector.I{i}."
    q = F.affine(vit_tokens, params[p + "q_w"], params[p + "q_b"])
    qq = F.affine(q, params[p + "attn_q_w"], params[p + "attn_q_b"])
    kk = F.affine(kv, params[p + "attn_k_w"], params[p + "attn_k_b"])
    vv = F.affine(kv, params[p + "attn_v_w"], params[p + "attn_v_b"])
    attn, weights = attention(qq, kk, vv, heads, return_weights=True)
    out = F.affine(attn, params[p + "attn_o_w"], params[p + "attn_o_b"]) + q
    return (out, weights) if return_weights else out


def inject(vit_tokens: Tensor, kv: Tensor, params, i: int, heads: int) -> Tensor:
    """Gated fusion of the queried distortion tokens into the ViT tokens.

    ``kv`` is the down-projected distortion token set from :func:`project_msd`.
    """
    if vit_tokens.ndim != 3 or kv.ndim != 3 or vit_tokens.shape[0] != kv.shape[0]:
        raise ShapeError(f"inject: tokens {vit_tokens.shape} vs distortion tokens {kv.shape}")
    p = f"injector.I{i}."
    queried = cross_attend(vit_tokens, kv, params, i, heads)
    up = F.affine(queried, params[p + "up_w"], params[p + "up_b"])
    return vit_tokens + params[p + "gate"] * up


def direct_fusion_tokens(msd: Tensor, params, grid: int) -> Tensor:
    """Distortion tokens reshaped onto the ViT patch grid, CLS slot zero."""
    b, t, c = msd.shape
    per_stage = t // 4
    side = int(round(math.sqrt(per_stage)))
    x = reshape(msd, (b, 4, per_stage, c)).mean(axis=1)
    x = F.affine(x, params["direct.w"], params["direct.b"])  # (b, m*n, D)
    d = x.shape[-1]
    x = reshape(transpose(x, (0, 2, 1)), (b, d, side, side))
    x = F.avgpool2d(x, grid)
    x = transpose(flatten(x, 2), (0, 2, 1))  # (b, grid^2, D)
    return concat([Tensor(np.zeros((b, 1, d))), x], axis=1)


# model -----------------------------------------------------------------------


class LoDaModel:
    """Frozen backbones plus the mode's trainable tensors."""

    def __init__(self, frozen: FrozenParams, acfg: AdapterConfig | None = None, mode: str = "loda", seed: int = 0):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.frozen = frozen
        self.vit_cfg = frozen.vit_config
        self.cnn_cfg = frozen.cnn_config
        self.acfg = acfg or AdapterConfig()
        self.mode = mode
        if self.vit_cfg.num_layers % self.acfg.interactions:
            raise ConfigError(
                f"interaction count {self.acfg.interactions} does not divide {self.vit_cfg.num_layers} layers")
        gen = rng(seed)
        d = self.vit_cfg.embed_dim
        params: dict[str, Tensor] = {}
        if mode in ("loda", "extractor_only"):
            params.update(init_extractor(self.cnn_cfg.stage_channels, self.acfg, gen))
        if mode == "loda":
            params.update(init_injector(d, self.acfg, gen))
        if mode == "extractor_only":
            params.update(init_direct(d, self.acfg, gen))
        if mode == "full_finetune":
            for k, v in frozen.vit.items():
                params[f"vit.{k}"] = Tensor(v.data, requires_grad=True)
        params.update(init_head(d, gen))
        self.params = params

    # parameter views -----------------------------------------------------------
    @property
    def uses_cnn(self) -> bool:
        return self.mode in ("loda", "extractor_only")

    @property
    def vit_params(self) -> dict[str, Tensor]:
        if self.mode == "full_finetune":
            return {k[4:]: v for k, v in self.params.items() if k.startswith("vit.")}
        return self.frozen.vit

    def named_trainable(self) -> Iterator[tuple[str, Tensor]]:
        return iter(sorted(self.params.items()))

    def named_frozen(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.frozen.items():
            if name.startswith("cnn.") and not self.uses_cnn:
                continue
            if name.startswith("vit.") and self.mode == "full_finetune":
                continue
            yield name, t

    def set_gates(self, value) -> None:
        """Overwrite every gate vector (testing and analysis helper)."""
        for name, t in self.params.items():
            if name.endswith("gate"):
                t.data = np.broadcast_to(np.asarray(value, dtype=np.float64), t.shape).copy()

    def interaction_layers(self) -> list[int]:
        step = self.vit_cfg.num_layers // self.acfg.interactions
        return [k * step for k in range(self.acfg.interactions)]

    # forward -------------------------------------------------------------------
    def cnn_features(self, images: Tensor) -> list[Tensor]:
        with no_grad():
            return cnn_forward(images, self.cnn_cfg, self.frozen.cnn)

    def forward(self, images: Tensor, *, return_tokens: bool = False, return_features: bool = False):
        """Quality scores (b, 1); optionally per-layer tokens and CNN maps."""
        p = self.params
        vit = self.vit_params
        feats = None
        fusion = None
        if self.uses_cnn:
            feats = self.cnn_features(images)
            msd = extract_local_distortion(feats, p, self.acfg)
            if self.mode == "loda":
                fusion = project_msd(msd, p)
            else:
                fusion = direct_fusion_tokens(msd, p, self.vit_cfg.grid)
        tokens = patch_embed(images, self.vit_cfg, vit)
        starts = self.interaction_layers()
        per_layer = []
        for layer in range(self.vit_cfg.num_layers):
            if fusion is not None and layer in starts:
                i = starts.index(layer)
                if self.mode == "loda":
                    tokens = inject(tokens, fusion, p, i, self.acfg.heads)
                else:
                    tokens = tokens + p[f"direct.I{i}.gate"] * fusion
            tokens = vit_encoder_layer(tokens, layer, self.vit_cfg, vit)
            if return_tokens:
                per_layer.append(tokens)
        score = F.affine(vit_final_cls(tokens, self.vit_cfg, vit), p["head.w"], p["head.b"])
        extras = []
        if return_tokens:
            extras.append(per_layer)
        if return_features:
            extras.append(feats)
        return (score, *extras) if extras else score

    __call__ = forward

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        for name, t in self.params.items():
            if name not in state:
                raise ShapeError(f"missing trainable tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"trainable tensor {name!r} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.copy()
        extra = sorted(set(state) - set(self.params))
        if extra:
            raise ShapeError(f"unexpected trainable tensors: {extra}")


def frozen_vit_head_forward(model: LoDaModel, images: Tensor) -> Tensor:
    """Score from the frozen ViT and the model's head, no adaptation at all."""
    vit = model.frozen.vit
    tokens = patch_embed(images, model.vit_cfg, vit)
    for layer in range(model.vit_cfg.num_layers):
        tokens = vit_encoder_layer(tokens, layer, model.vit_cfg, vit)
    return F.affine(vit_final_cls(tokens, model.vit_cfg, vit), model.params["head.w"], model.params["head.b"])


def trainable_parameters(model: LoDaModel) -> tuple[list[tuple[str, Tensor]], int]:
    named = list(model.named_trainable())
    return named, sum(t.size for _, t in named)


def parameter_counts(model: LoDaModel) -> dict[str, int]:
    _, trainable = trainable_parameters(model)
    frozen = sum(t.size for _, t in model.named_frozen())
    return {"trainable": trainable, "frozen": frozen, "total": trainable + frozen}
