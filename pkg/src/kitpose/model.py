"""The KITPose network.

Pipeline: a small strided conv backbone produces stride-4 features; a 1x1
conv head maps them to per-keypoint features F_k (supervised by GHRL);
each channel slice of F_k is flattened and projected to one keypoint token
(no spatial patch splitting); body part prompts join the tokens; a stack
of single-head attention + FFN layers drives the interactions; the output
head projects each keypoint token back to a heatmap.

Setting n_layers=0 disables the encoder (and with it the prompts), which
leaves exactly the backbone-plus-heads baseline used for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .layers import Conv2dLayer, LayerNorm, Linear, trunc_normal
from .prompts import ClusterResult, NanoBlock, PromptConfig, make_body_part_prompts
from .tensor import Tensor

__all__ = ["ModelConfig", "ForwardResult", "MiniBackbone", "KitLayer",
           "KitPoseModel", "tokenize_channels", "keypoint_feature_head"]


@dataclass
class ModelConfig:
    n_keypoints: int = 17
    embed_dim: int = 128
    n_layers: int = 2
    n_prompts: int = 4
    heatmap_size: tuple[int, int] = (32, 32)
    backbone_channels: int = 32
    backbone_widths: tuple[int, int] = (16, 32)
    nano_hidden: int = 16
    ffn_expansion: int = 3
    norm_placement: str = "pre"
    prompts_enabled: bool = True
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.norm_placement not in ("pre", "post", "none"):
            raise ValueError("norm_placement must be pre, post or none")
        if self.prompt.n_prompts != self.n_prompts:
            self.prompt = replace(self.prompt, n_prompts=self.n_prompts)

    @property
    def input_size(self) -> tuple[int, int]:
        return (self.heatmap_size[0] * 4, self.heatmap_size[1] * 4)

    @property
    def use_prompts(self) -> bool:
        # prompts only participate through the encoder
        return self.prompts_enabled and self.n_layers > 0 and self.n_prompts > 0


@dataclass
class ForwardResult:
    heatmaps: Tensor
    f_k: Tensor
    attn_maps: list[np.ndarray]
    cluster: ClusterResult | None


def _pad_to_odd(x: Tensor) -> Tensor:
    """Zero-pad the bottom/right edge so each spatial extent becomes odd.

    A stride-2 convolution with an odd kernel can never produce an integral
    output extent from an even input (parity), so the strided stages pad
    one row/column first and convolve without implicit padding.
    """
    c, h, w = x.shape
    if h % 2 == 0:
        x = T.concat([x, T.zeros((c, 1, w))], axis=1)
        h += 1
    if w % 2 == 0:
        x = T.concat([x, T.zeros((c, h, 1))], axis=2)
    return x


class MiniBackbone:
    """Three convolutions (two strided) producing stride-4 features.

    Stands in for a large high-resolution backbone behind the same
    interface; the receptive field is deliberately small so global
    structure must come from the token interactions.
    """

    def __init__(self, rng, widths: tuple[int, int], out_channels: int):
        w1, w2 = widths
        self.conv1 = Conv2dLayer(rng, 3, w1, kernel=3, stride=2, pad=0)
        self.conv2 = Conv2dLayer(rng, w1, w2, kernel=3, stride=2, pad=0)
        self.conv3 = Conv2dLayer(rng, w2, out_channels, kernel=3, stride=1)

    def __call__(self, image: Tensor) -> Tensor:
        if image.shape[1] % 4 or image.shape[2] % 4:
            raise ValueError("input height and width must be divisible by 4")
        x = T.relu(self.conv1(_pad_to_odd(image)))
        x = T.relu(self.conv2(_pad_to_odd(x)))
        return T.relu(self.conv3(x))

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        yield from self.conv3.named_params(f"{prefix}.conv3")


class KitLayer:
    """One keypoint-interactive block: single-head attention plus FFN.

    All four projections are square (embed_dim x embed_dim); there is no
    head-splitting reshape anywhere.  The attention map of the last call
    is kept for inspection.
    """

    def __init__(self, rng, dim: int, ffn_expansion: int = 3,
                 norm_placement: str = "pre"):
        self.dim = dim
        self.w_q = Tensor(trunc_normal(rng, (dim, dim)), requires_grad=True)
        self.w_k = Tensor(trunc_normal(rng, (dim, dim)), requires_grad=True)
        self.w_v = Tensor(trunc_normal(rng, (dim, dim)), requires_grad=True)
        self.w_o = Tensor(trunc_normal(rng, (dim, dim)), requires_grad=True)
        self.ffn1 = Linear(rng, dim, ffn_expansion * dim)
        self.ffn2 = Linear(rng, ffn_expansion * dim, dim)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.norm_placement = norm_placement

    def __call__(self, tokens: Tensor) -> tuple[Tensor, np.ndarray]:
        place = self.norm_placement
        x = self.norm1(tokens) if place == "pre" else tokens
        q = T.matmul(x, T.transpose(self.w_q))
        k = T.matmul(x, T.transpose(self.w_k))
        v = T.matmul(x, T.transpose(self.w_v))
        attn = T.softmax_rows(T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(self.dim)))
        out1 = tokens + T.matmul(T.matmul(attn, v), T.transpose(self.w_o))
        if place == "post":
            out1 = self.norm1(out1)

        h = self.norm2(out1) if place == "pre" else out1
        out = out1 + self.ffn2(T.gelu(self.ffn1(h)))
        if place == "post":
            out = self.norm2(out)
        return out, attn.data.copy()

    def named_params(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o
        yield from self.ffn1.named_params(f"{prefix}.ffn1")
        yield from self.ffn2.named_params(f"{prefix}.ffn2")
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.norm2.named_params(f"{prefix}.norm2")


def tokenize_channels(f_k: Tensor, proj: Tensor) -> Tensor:
    """Flatten each channel slice row-major and project it to one token."""
    n, h, w = f_k.shape
    if proj.shape[0] != h * w:
        raise ValueError(f"projection expects rows of length {h * w}, got {proj.shape}")
    return T.matmul(T.reshape(f_k, (n, h * w)), proj)


def keypoint_feature_head(f_i: Tensor, head: Conv2dLayer) -> Tensor:
    """1x1 convolution adjusting backbone channels to one per keypoint."""
    return head(f_i)


class KitPoseModel:
    """Full network; all parameters addressable via named_params()."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h, w = cfg.heatmap_size
        self.backbone = MiniBackbone(rng, cfg.backbone_widths, cfg.backbone_channels)
        self.kpt_head = Conv2dLayer(rng, cfg.backbone_channels, cfg.n_keypoints,
                                    kernel=1, pad=0)
        self.tok_proj = Tensor(trunc_normal(rng, (h * w, cfg.embed_dim)),
                               requires_grad=True)
        self.pos_embed = Tensor(trunc_normal(rng, (cfg.n_keypoints, cfg.embed_dim)),
                                requires_grad=True)
        self.nanoblock = None
        if cfg.use_prompts:
            self.nanoblock = NanoBlock(rng, cfg.backbone_channels, cfg.nano_hidden,
                                       cfg.n_prompts, (h, w), cfg.embed_dim)
        self.layers = [KitLayer(rng, cfg.embed_dim, cfg.ffn_expansion,
                                cfg.norm_placement) for _ in range(cfg.n_layers)]
        self.out_head = Linear(rng, cfg.embed_dim, h * w)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in self.backbone.named_params("backbone"):
            out[name] = t
        for name, t in self.kpt_head.named_params("kpt_head"):
            out[name] = t
        out["tok_proj"] = self.tok_proj
        out["pos_embed"] = self.pos_embed
        if self.nanoblock is not None:
            for name, t in self.nanoblock.named_params("nanoblock"):
                out[name] = t
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_params(f"layers.{i}"):
                out[name] = t
        for name, t in self.out_head.named_params("out_head"):
            out[name] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def kit_forward(self, f_i: Tensor,
                    dbp_override: np.ndarray | None = None) -> ForwardResult:
        """Heads, tokenization and encoder on top of backbone features."""
        cfg = self.cfg
        n = cfg.n_keypoints
        h, w = cfg.heatmap_size
        f_k = keypoint_feature_head(f_i, self.kpt_head)
        tokens = tokenize_channels(f_k, self.tok_proj) + self.pos_embed

        cluster = None
        x = tokens
        if cfg.use_prompts:
            pbp, cluster = make_body_part_prompts(tokens, f_i, cfg.prompt,
                                                  self.nanoblock,
                                                  dbp_override=dbp_override)
            x = T.concat([tokens, pbp], axis=0)

        attn_maps: list[np.ndarray] = []
        for layer in self.layers:
            x, attn = layer(x)
            attn_maps.append(attn)

        kpt_tokens = T.narrow(x, 0, 0, n) if x.shape[0] != n else x
        heatmaps = T.reshape(self.out_head(kpt_tokens), (n, h, w))
        return ForwardResult(heatmaps=heatmaps, f_k=f_k, attn_maps=attn_maps,
                             cluster=cluster)

    def forward(self, image: Tensor,
                dbp_override: np.ndarray | None = None) -> ForwardResult:
        if image.shape[1:] != self.cfg.input_size:
            raise ValueError(f"expected {self.cfg.input_size} input, got {image.shape[1:]}")
        f_i = self.backbone((image - 0.5) * 2.0)
        return self.kit_forward(f_i, dbp_override=dbp_override)

    __call__ = forward
