"""Multi-query transformer for multi-task dense prediction.

Pipeline per image::

    conv pyramid -> fused map -> per-scale maps x_s
    query bank p_(s,t) --shared encoder + query learning (x D)--> p_hat_(s,t)
    cross-task / cross-scale grouping -> self-attention -> residual fusion -> p_hat_t
    x_dec --shared decoder with p_hat_t (x D)--> x_hat_t -> 1x1 head -> upsample
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import ConvParams, LayerNormParams, MhsaParams, MlpParams
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    add_sum,
    concat_rows,
    constant,
    gelu,
    l2_normalize,
    reshape,
    split_rows,
)

TASK_KINDS = ("seg", "partseg", "depth", "normals", "edge", "sal")


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    classes: int = 0

    @property
    def out_channels(self) -> int:
        if self.kind in ("seg", "partseg"):
            if self.classes < 2:
                raise ConfigError(f"task {self.name!r}: {self.kind} needs classes >= 2")
            return self.classes
        if self.kind == "normals":
            return 3
        if self.kind in ("depth", "edge", "sal"):
            return 1
        raise ConfigError(f"unknown task kind {self.kind!r} for task {self.name!r}")


@dataclass(frozen=True)
class MQTConfig:
    TN: int = 2
    S: int = 2
    N: int = 64
    C: int = 32
    D: int = 1  # 0 = no transformer (backbone + heads baseline)
    num_heads: int = 4
    share_encoder: bool = True
    share_decoder: bool = True
    enable_query_learning: bool = True
    enable_ctam: bool = True
    image_h: int = 64
    image_w: int = 64
    mlp_ratio: int = 4
    backbone_channels: int = 0  # 0 means "same as C"
    value_pe: bool = False  # also add e_k on the value path
    scale_dim: str = "head"  # attention temperature: "head" -> C/heads, "channels" -> C
    decode_scale: int = 1
    ln_eps: float = 1e-5

    def validate(self) -> None:
        for name in ("TN", "S", "N", "C", "num_heads", "image_h", "image_w", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.D < 0:
            raise ConfigError(f"D must be >= 0, got {self.D}")
        if self.C % self.num_heads:
            raise ConfigError(f"C={self.C} is not divisible by num_heads={self.num_heads}")
        if self.scale_dim not in ("head", "channels"):
            raise ConfigError(f"scale_dim must be 'head' or 'channels', got {self.scale_dim!r}")
        if not 1 <= self.decode_scale <= self.S:
            raise ConfigError(f"decode_scale {self.decode_scale} outside 1..{self.S}")
        multiple = 4 * 2 ** (self.S - 1)
        if self.image_h % multiple or self.image_w % multiple:
            raise ContractError(
                f"input {self.image_h}x{self.image_w} must be divisible by {multiple} for S={self.S}"
            )

    @property
    def width(self) -> int:
        return self.backbone_channels or self.C

    def scale_shape(self, s: int) -> tuple[int, int]:
        """Spatial size of scale ``s`` (1-based)."""
        f = 4 * 2 ** (s - 1)
        return self.image_h // f, self.image_w // f

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MQTConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderLayer:
    ln_q: LayerNormParams
    ln_x: LayerNormParams
    attn: MhsaParams
    ln_ql: LayerNormParams | None
    mlp_ql: MlpParams | None


@dataclass
class DecoderLayer:
    ln_x: LayerNormParams
    ln_p: LayerNormParams
    attn: MhsaParams
    ln_mlp: LayerNormParams
    mlp: MlpParams


@dataclass
class CtamParams:
    attn: MhsaParams
    ln: LayerNormParams
    mlp: MlpParams


@dataclass
class Backbone:
    stem: ConvParams
    stage2: ConvParams
    stage3: ConvParams
    proj2: ConvParams
    proj3: ConvParams


@dataclass
class FeatureMap:
    maps: list[Tensor]  # scale s-1 -> H_s x W_s x C

    def flat(self, s: int) -> Tensor:
        h, w, c = self.maps[s - 1].shape
        return reshape(self.maps[s - 1], (h * w, c))


@dataclass
class CtamTrace:
    """Intermediate pieces of the cross-task module, kept for inspection."""

    cross_task: list[list[Tensor]] = field(default_factory=list)  # [s][t]
    cross_scale: list[list[Tensor]] = field(default_factory=list)  # [t][s]


def _layer_named(obj, prefix: str) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, Tensor):
            out[prefix + f.name] = value
        elif dataclasses.is_dataclass(value):
            out.update(_layer_named(value, f"{prefix}{f.name}."))
    return out


class MQTransformer:
    """Parameters plus forward pass; parameters are plain leaf tensors."""

    def __init__(self, config: MQTConfig, tasks: Sequence[TaskSpec], seed: int = 0, dtype=None):
        config.validate()
        tasks = tuple(tasks)
        if len(tasks) != config.TN:
            raise ConfigError(f"TN={config.TN} but {len(tasks)} tasks given")
        if len({t.name for t in tasks}) != len(tasks):
            raise ConfigError("task names must be unique")
        for t in tasks:
            t.out_channels  # raises on unknown kinds
        self.config = config
        self.tasks = tasks
        self.dtype = np.dtype(dtype or np.float32).type
        self._build(np.random.default_rng(seed))

    # --- construction -------------------------------------------------

    def _build(self, rng: np.random.Generator) -> None:
        cfg, dt = self.config, self.dtype
        c, w = cfg.C, cfg.width
        ln = lambda: nn.init_layer_norm(c, dtype=dt, eps=cfg.ln_eps)  # noqa: E731
        attn = lambda: nn.init_mhsa(rng, c, cfg.num_heads, dtype=dt, scale_dim=cfg.scale_dim)  # noqa: E731
        mlp = lambda: nn.init_mlp(rng, c, cfg.mlp_ratio, dtype=dt)  # noqa: E731

        self.backbone = Backbone(
            stem=nn.init_conv(rng, 3, 3, w, stride=2, dtype=dt),
            stage2=nn.init_conv(rng, 3, w, w, stride=2, dtype=dt),
            stage3=nn.init_conv(rng, 3, w, w, stride=2, dtype=dt),
            proj2=nn.init_conv(rng, 1, w, c, dtype=dt),
            proj3=nn.init_conv(rng, 1, w, c, dtype=dt),
        )
        S, TN = cfg.S, cfg.TN
        use_queries = cfg.D > 0
        self.queries = {
            (s, t): nn.init_positional(rng, cfg.N, c, dtype=dt)
            for s in range(1, S + 1)
            for t in range(1, TN + 1)
            if use_queries
        }
        self.pe_q = {key: nn.init_positional(rng, cfg.N, c, dtype=dt) for key in self.queries}
        self.pe_k = {}
        for s in range(1, S + 1 if use_queries else 1):
            h, ww = cfg.scale_shape(s)
            self.pe_k[s] = nn.init_positional(rng, h * ww, c, dtype=dt)

        enc_keys = ["shared"] if cfg.share_encoder else [f"s{s}t{t}" for (s, t) in self.queries]
        self.encoders = {
            key: [self._encoder_layer(ln, attn, mlp) for _ in range(cfg.D)] for key in enc_keys
        }
        self.ctam_params = CtamParams(attn(), ln(), mlp()) if cfg.enable_ctam and use_queries else None
        dec_keys = ["shared"] if cfg.share_decoder else [f"t{t}" for t in range(1, TN + 1)]
        self.decoders = {
            key: [DecoderLayer(ln(), ln(), attn(), ln(), mlp()) for _ in range(cfg.D)] for key in dec_keys
        }
        self.heads = {t.name: nn.init_conv(rng, 1, c, t.out_channels, dtype=dt) for t in self.tasks}

    def _encoder_layer(self, ln, attn, mlp) -> EncoderLayer:
        layer = EncoderLayer(ln(), ln(), attn(), None, None)
        if self.config.enable_query_learning:
            layer.ln_ql, layer.mlp_ql = ln(), mlp()
        return layer

    def encoder_layers(self, s: int, t: int) -> list[EncoderLayer]:
        return self.encoders["shared" if self.config.share_encoder else f"s{s}t{t}"]

    def decoder_layers(self, t: int) -> list[DecoderLayer]:
        return self.decoders["shared" if self.config.share_decoder else f"t{t}"]

    def named_parameters(self) -> dict[str, Tensor]:
        """Deterministically ordered name -> leaf tensor map."""
        out: dict[str, Tensor] = {}
        out.update(_layer_named(self.backbone, "backbone."))
        for (s, t), p in self.queries.items():
            out[f"queries.s{s}t{t}"] = p
        for (s, t), p in self.pe_q.items():
            out[f"pe_q.s{s}t{t}"] = p
        for s, p in self.pe_k.items():
            out[f"pe_k.s{s}"] = p
        for key, layers in self.encoders.items():
            for i, layer in enumerate(layers):
                out.update(_layer_named(layer, f"encoder.{key}.{i}."))
        if self.ctam_params is not None:
            out.update(_layer_named(self.ctam_params, "ctam."))
        for key, layers in self.decoders.items():
            for i, layer in enumerate(layers):
                out.update(_layer_named(layer, f"decoder.{key}.{i}."))
        for name, head in self.heads.items():
            out.update(_layer_named(head, f"heads.{name}."))
        return out

    def parameter_count(self, prefix: str = "") -> int:
        return sum(p.size for n, p in self.named_parameters().items() if n.startswith(prefix))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} vs model {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def zero_residual_branches(self) -> None:
        """Zero every attention output projection and every MLP second layer."""
        for name, p in self.named_parameters().items():
            if name.endswith((".wo", ".w2", ".b2")):
                p.data[...] = 0

    # --- forward pieces -----------------------------------------------

    def extract_features(self, image) -> FeatureMap:
        cfg = self.config
        image = image if isinstance(image, Tensor) else constant(image, dtype=self.dtype)
        if image.shape != (cfg.image_h, cfg.image_w, 3):
            h, w = image.shape[:2]
            multiple = 4 * 2 ** (cfg.S - 1)
            if image.data.ndim == 3 and (h % multiple or w % multiple):
                raise ContractError(f"input size {h}x{w} must be a multiple of {multiple}")
            raise DimensionError(f"expected image {cfg.image_h}x{cfg.image_w}x3, got {image.shape}")
        bb = self.backbone
        f1 = gelu(nn.conv2d(image, bb.stem))
        f2 = gelu(nn.conv2d(f1, bb.stage2))
        f3 = gelu(nn.conv2d(f2, bb.stage3))
        h1, w1 = cfg.scale_shape(1)
        fused = add(nn.conv2d(f2, bb.proj2), nn.bilinear_resample(nn.conv2d(f3, bb.proj3), h1, w1))
        maps = [fused]
        for s in range(2, cfg.S + 1):
            maps.append(nn.bilinear_resample(fused, *cfg.scale_shape(s)))
        return FeatureMap(maps)

    def encoder_step(self, p: Tensor, x_flat: Tensor, s: int, t: int, layer: EncoderLayer) -> Tensor:
        if x_flat.shape[1] != p.shape[1]:
            raise DimensionError(f"encoder: query {p.shape} vs feature {x_flat.shape}")
        q = nn.layer_norm(add(p, self.pe_q[(s, t)]), layer.ln_q)
        x_pe = add(x_flat, self.pe_k[s])
        k = nn.layer_norm(x_pe, layer.ln_x)
        v = k if self.config.value_pe else nn.layer_norm(x_flat, layer.ln_x)
        return add(p, nn.mhsa(q, k, v, layer.attn))

    def query_learning(self, p: Tensor, layer: EncoderLayer) -> Tensor:
        if not self.config.enable_query_learning:
            return p
        return add(p, nn.mlp_block(nn.layer_norm(p, layer.ln_ql), layer.mlp_ql))

    def encode_queries(self, feats: FeatureMap) -> dict[tuple[int, int], Tensor]:
        out = {}
        for (s, t), p in self.queries.items():
            x_flat = feats.flat(s)
            for layer in self.encoder_layers(s, t):
                p = self.query_learning(self.encoder_step(p, x_flat, s, t, layer), layer)
            out[(s, t)] = p
        return out

    def ctam_refine(self, group: Tensor) -> Tensor:
        cp = self.ctam_params
        q = add(group, nn.mhsa(group, group, group, cp.attn))
        return add(q, nn.mlp_block(nn.layer_norm(q, cp.ln), cp.mlp))

    def ctam(self, banks: dict[tuple[int, int], Tensor], trace: CtamTrace | None = None) -> list[Tensor]:
        """Fuse the S x TN refined banks into one N x C query per task."""
        S, TN = self.config.S, self.config.TN
        if set(banks) != {(s, t) for s in range(1, S + 1) for t in range(1, TN + 1)}:
            raise AssertionError("ctam: bank keys do not cover every (scale, task) pair")
        if not self.config.enable_ctam:
            return [add_sum([banks[(s, t)] for s in range(1, S + 1)]) for t in range(1, TN + 1)]
        n = self.config.N
        cross_task = []
        for s in range(1, S + 1):
            group = concat_rows([banks[(s, t)] for t in range(1, TN + 1)])
            cross_task.append(split_rows(self.ctam_refine(group), [n] * TN))
        cross_scale = []
        for t in range(1, TN + 1):
            group = concat_rows([banks[(s, t)] for s in range(1, S + 1)])
            cross_scale.append(split_rows(self.ctam_refine(group), [n] * S))
        if trace is not None:
            trace.cross_task, trace.cross_scale = cross_task, cross_scale
        fused = []
        for t in range(TN):
            terms = [cross_task[s][t] for s in range(S)] + [cross_scale[t][s] for s in range(S)]
            fused.append(add_sum(terms))
        return fused

    def decoder_step(self, x: Tensor, p_hat: Tensor, layer: DecoderLayer) -> Tensor:
        if x.shape[1] != p_hat.shape[1]:
            raise DimensionError(f"decoder: feature {x.shape} vs query {p_hat.shape}")
        kv = nn.layer_norm(p_hat, layer.ln_p)
        x = add(x, nn.mhsa(nn.layer_norm(x, layer.ln_x), kv, kv, layer.attn))
        return add(x, nn.mlp_block(nn.layer_norm(x, layer.ln_mlp), layer.mlp))

    def decode(self, feats: FeatureMap, fused: Sequence[Tensor]) -> list[Tensor]:
        x0 = feats.flat(self.config.decode_scale)
        out = []
        for t, p_hat in enumerate(fused, start=1):
            x = x0
            for layer in self.decoder_layers(t):
                x = self.decoder_step(x, p_hat, layer)
            out.append(x)
        return out

    def task_heads(self, decoded: Sequence[Tensor]) -> dict[str, Tensor]:
        cfg = self.config
        h, w = cfg.scale_shape(cfg.decode_scale)
        preds = {}
        for spec, x in zip(self.tasks, decoded):
            if x.data.ndim == 2:
                x = reshape(x, (h, w, cfg.C))
            y = nn.bilinear_resample(nn.conv2d(x, self.heads[spec.name]), cfg.image_h, cfg.image_w)
            if spec.kind == "normals":
                y = l2_normalize(y)
            preds[spec.name] = y
        return preds

    def forward(self, image) -> dict[str, Tensor]:
        feats = self.extract_features(image)
        if self.config.D == 0:
            return self.baseline_from_features(feats)
        fused = self.ctam(self.encode_queries(feats))
        return self.task_heads(self.decode(feats, fused))

    __call__ = forward

    def baseline_from_features(self, feats: FeatureMap) -> dict[str, Tensor]:
        x = feats.maps[self.config.decode_scale - 1]
        return self.task_heads([x] * self.config.TN)

    def baseline_forward(self, image) -> dict[str, Tensor]:
        """Backbone plus heads with no query path."""
        return self.baseline_from_features(self.extract_features(image))
