"""Toy vision-language network.

Vision: patch embedding -> first transformer block -> add ``Conv(E)`` where
``E`` is the per-pixel target-embedding map of a box -> remaining blocks.
Text: one transformer stack used both causally (generation) and
bidirectionally (masked LM, ITM), with cross-attention to the vision tokens
in every layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .tensor import ConfigurationError, DimensionError, Parameters, Tensor
from .vocab import BoundingBox

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"
_NEG = -1e9


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    patch_size: int = 8
    hidden: int = 64
    vision_layers: int = 2
    text_layers: int = 2
    heads: int = 4
    vocab_size: int = 256
    max_len: int = 64
    mlp_ratio: int = 4
    init_std: float = 0.02

    def validate(self) -> "ModelConfig":
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigurationError("image size must be divisible by the patch size")
        if self.hidden % self.heads:
            raise ConfigurationError("hidden size must be divisible by the number of heads")
        if self.vision_layers < 1:
            raise ConfigurationError("the target embedding needs at least one vision layer")
        return self

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class VisionFeatureMap:
    """Vision tokens, (B, N, C) with N = (H/p)*(W/p) in row-major patch order."""

    tokens: Tensor
    grid: tuple[int, int]
    stage: str = "final"

    def as_grid(self) -> np.ndarray:
        b, n, c = self.tokens.shape
        return self.tokens.data.reshape(b, *self.grid, c).transpose(0, 3, 1, 2)


def preprocess_pixels(pixels: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) or (B, H, W, 3) -> float32 channels-first in [-1, 1]."""
    arr = np.asarray(pixels)
    arr = arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return np.ascontiguousarray(np.moveaxis(arr, -1, -3))


def box_mask(boxes: Sequence[BoundingBox | None], height: int, width: int) -> np.ndarray:
    """(B, 1, H, W) indicator of the target region; an absent box gives all zeros."""
    m = np.zeros((len(boxes), 1, height, width), dtype=np.float32)
    for k, box in enumerate(boxes):
        if box is None:
            continue
        box.validate(width, height)
        m[k, 0, box.y1:box.y2 + 1, box.x1:box.x2 + 1] = 1.0
    return m


class VisionLanguageModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        self.params = Parameters()
        self._init(np.random.default_rng(seed))

    # -- construction ----------------------------------------------------
    def _init(self, rng: np.random.Generator) -> None:
        cfg, P = self.cfg, self.params
        C, p, std = cfg.hidden, cfg.patch_size, cfg.init_std
        f32 = np.float32

        def normal(*shape, scale=std):
            return (rng.standard_normal(shape) * scale).astype(f32)

        def zeros(*shape):
            return np.zeros(shape, dtype=f32)

        def ones(*shape):
            return np.ones(shape, dtype=f32)

        def block(prefix: str, cross: bool) -> None:
            P.add(f"{prefix}.ln1.g", ones(C))
            P.add(f"{prefix}.ln1.b", zeros(C))
            for name in ("q", "k", "v", "o"):
                P.add(f"{prefix}.attn.w{name}", normal(C, C))
                P.add(f"{prefix}.attn.b{name}", zeros(C))
            if cross:
                P.add(f"{prefix}.lnx.g", ones(C))
                P.add(f"{prefix}.lnx.b", zeros(C))
                for name in ("q", "k", "v", "o"):
                    P.add(f"{prefix}.xattn.w{name}", normal(C, C))
                    P.add(f"{prefix}.xattn.b{name}", zeros(C))
            P.add(f"{prefix}.ln2.g", ones(C))
            P.add(f"{prefix}.ln2.b", zeros(C))
            P.add(f"{prefix}.mlp.w1", normal(C, cfg.mlp_ratio * C))
            P.add(f"{prefix}.mlp.b1", zeros(cfg.mlp_ratio * C))
            P.add(f"{prefix}.mlp.w2", normal(cfg.mlp_ratio * C, C))
            P.add(f"{prefix}.mlp.b2", zeros(C))

        P.add("vision.patch.w", normal(C, 3, p, p, scale=1.0 / np.sqrt(3 * p * p)))
        P.add("vision.patch.b", zeros(C))
        P.add("vision.pos", normal(cfg.num_patches, C))
        for i in range(cfg.vision_layers):
            block(f"vision.layers.{i}", cross=False)
        P.add("vision.ln_f.g", ones(C))
        P.add("vision.ln_f.b", zeros(C))

        P.add("target.e_t", normal(3))
        P.add("target.e_tbar", normal(3))
        P.add("target.conv.w", normal(C, 3, p, p, scale=1.0 / np.sqrt(3 * p * p)))
        P.add("target.conv.b", zeros(C))

        P.add("text.tok", normal(cfg.vocab_size, C))
        P.add("text.pos", normal(cfg.max_len, C))
        for i in range(cfg.text_layers):
            block(f"text.layers.{i}", cross=True)
        P.add("text.ln_f.g", ones(C))
        P.add("text.ln_f.b", zeros(C))
        P.add("text.head.w", normal(C, cfg.vocab_size))
        P.add("text.head.b", zeros(cfg.vocab_size))

        P.add("itc.text_proj", normal(C, C, scale=1.0 / np.sqrt(C)))
        P.add("itc.image_proj", normal(C, C, scale=1.0 / np.sqrt(C)))
        P.add("itc.logit_scale", np.array(np.log(1.0 / 0.07), dtype=f32))
        P.add("itm.w", normal(C, 2))
        P.add("itm.b", zeros(2))

    # -- building blocks ---------------------------------------------------
    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _attention(self, x: Tensor, kv: Tensor, prefix: str, bias: np.ndarray | None) -> Tensor:
        P, h = self.params, self.cfg.heads
        b, lq, c = x.shape
        lk = kv.shape[1]
        d = c // h
        q = x @ P[prefix + ".wq"] + P[prefix + ".bq"]
        k = kv @ P[prefix + ".wk"] + P[prefix + ".bk"]
        v = kv @ P[prefix + ".wv"] + P[prefix + ".bv"]
        q = q.reshape(b, lq, h, d).transpose(0, 2, 1, 3)
        k = k.reshape(b, lk, h, d).transpose(0, 2, 3, 1)
        v = v.reshape(b, lk, h, d).transpose(0, 2, 1, 3)
        scores = (q @ k) * x.dtype.type(1.0 / np.sqrt(d))
        if bias is not None:
            scores = scores + T.Tensor(bias.astype(x.dtype, copy=False))
        att = T.softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, lq, c)
        return out @ P[prefix + ".wo"] + P[prefix + ".bo"]

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        P = self.params
        hdn = T.gelu(x @ P[prefix + ".w1"] + P[prefix + ".b1"])
        return hdn @ P[prefix + ".w2"] + P[prefix + ".b2"]

    def _block(self, x: Tensor, prefix: str, self_bias, vision: Tensor | None = None) -> Tensor:
        hdn = self._ln(x, prefix + ".ln1")
        x = x + self._attention(hdn, hdn, prefix + ".attn", self_bias)
        if vision is not None:
            hdn = self._ln(x, prefix + ".lnx")
            x = x + self._attention(hdn, vision, prefix + ".xattn", None)
        return x + self._mlp(self._ln(x, prefix + ".ln2"), prefix + ".mlp")

    # -- vision ------------------------------------------------------------
    def _images(self, images) -> Tensor:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        cfg = self.cfg
        if arr.shape[1:] != (3, cfg.image_height, cfg.image_width):
            raise DimensionError(
                f"expected images of shape (3, {cfg.image_height}, {cfg.image_width}), got {arr.shape[1:]}")
        if isinstance(images, Tensor) and images.ndim == 4:
            return images
        return Tensor(arr.astype(self.params["vision.pos"].dtype, copy=False))

    def target_embedding_map(self, boxes: Sequence[BoundingBox | None]) -> Tensor:
        """E for each box: e_t inside the (inclusive) box, e_tbar elsewhere; (B, 3, H, W)."""
        cfg, P = self.cfg, self.params
        m = box_mask(boxes, cfg.image_height, cfg.image_width).astype(P["target.e_t"].dtype)
        e_t = P["target.e_t"].reshape(1, 3, 1, 1)
        e_tbar = P["target.e_tbar"].reshape(1, 3, 1, 1)
        return T.Tensor(m) * e_t + T.Tensor(1.0 - m) * e_tbar

    def _to_tokens(self, grid: Tensor) -> Tensor:
        b, c, gh, gw = grid.shape
        return grid.reshape(b, c, gh * gw).transpose(0, 2, 1)

    def vision_stem(self, images) -> Tensor:
        """Patch embedding plus the first vision layer: f_vision, (B, N, C)."""
        P = self.params
        x = T.conv2d(self._images(images), P["vision.patch.w"], P["vision.patch.b"], self.cfg.patch_size)
        x = self._to_tokens(x) + P["vision.pos"]
        return self._block(x, "vision.layers.0", None)

    def inject_target(self, stem: Tensor, boxes: Sequence[BoundingBox | None]) -> Tensor:
        """F_vision = f_vision + Conv(E)."""
        P = self.params
        E = self.target_embedding_map(boxes)
        conv = T.conv2d(E, P["target.conv.w"], P["target.conv.b"], self.cfg.patch_size)
        return stem + self._to_tokens(conv)

    def vision_tail(self, x: Tensor) -> VisionFeatureMap:
        for i in range(1, self.cfg.vision_layers):
            x = self._block(x, f"vision.layers.{i}", None)
        return VisionFeatureMap(self._ln(x, "vision.ln_f"), self.cfg.grid)

    def encode_images(self, images, boxes: Sequence[BoundingBox | None] | None = None,
                      stem: Tensor | None = None) -> VisionFeatureMap:
        """Box-conditioned vision features for a batch; ``None`` boxes mean no target."""
        if stem is None:
            stem = self.vision_stem(images)
        if boxes is None:
            boxes = [None] * stem.shape[0]
        if len(boxes) != stem.shape[0]:
            raise DimensionError("one box (or None) per image is required")
        return self.vision_tail(self.inject_target(stem, boxes))

    def encode_image(self, image, box: BoundingBox | None = None) -> VisionFeatureMap:
        return self.encode_images(image, [box])

    # -- text --------------------------------------------------------------
    def _self_bias(self, ids: np.ndarray, mode: str, pad_id: int) -> np.ndarray:
        b, length = ids.shape
        bias = np.zeros((b, 1, length, length), dtype=np.float32)
        if mode == CAUSAL:
            bias += np.triu(np.full((length, length), _NEG, dtype=np.float32), k=1)
        elif mode != BIDIRECTIONAL:
            raise ValueError(f"unknown attention mode {mode!r}")
        bias += np.where(ids == pad_id, _NEG, 0.0).astype(np.float32)[:, None, None, :]
        return bias

    def text_hidden(self, ids, vision: VisionFeatureMap | Tensor | None, mode: str = CAUSAL,
                    pad_id: int = 0) -> Tensor:
        """Final-layer hidden states (B, L, C); ``vision=None`` skips cross-attention."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, length = ids.shape
        if length > self.cfg.max_len:
            raise LengthError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        P = self.params
        vt = vision.tokens if isinstance(vision, VisionFeatureMap) else vision
        if vt is not None and vt.shape[0] != b:
            raise DimensionError("text and vision batch sizes differ")
        x = T.embedding(P["text.tok"], ids) + P["text.pos"][:length]
        bias = self._self_bias(ids, mode, pad_id)
        for i in range(self.cfg.text_layers):
            x = self._block(x, f"text.layers.{i}", bias, vt)
        return self._ln(x, "text.ln_f")

    def head(self, hidden: Tensor) -> Tensor:
        return hidden @ self.params["text.head.w"] + self.params["text.head.b"]

    def decode_logits(self, ids, vision, mode: str = CAUSAL, pad_id: int = 0) -> Tensor:
        """Per-position vocabulary logits, (B, L, V)."""
        return self.head(self.text_hidden(ids, vision, mode, pad_id))

    def logits_at(self, hidden: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """Logits at selected positions only, (n, V)."""
        sel = hidden[np.asarray(rows), np.asarray(cols)]
        return self.head(sel)

    # -- global embeddings ---------------------------------------------------
    def text_global_embedding(self, ids, pad_id: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        hidden = self.text_hidden(ids, None, BIDIRECTIONAL, pad_id)
        keep = (ids != pad_id).astype(hidden.dtype)[:, :, None]
        pooled = (hidden * T.Tensor(keep)).sum(axis=1) / T.Tensor(keep.sum(axis=1))
        return T.l2_normalize(pooled @ self.params["itc.text_proj"], axis=-1)

    def image_global_embedding(self, vision: VisionFeatureMap) -> Tensor:
        pooled = vision.tokens.mean(axis=1)
        return T.l2_normalize(pooled @ self.params["itc.image_proj"], axis=-1)

    def itm_logits(self, ids, vision: VisionFeatureMap, pad_id: int = 0) -> Tensor:
        hidden = self.text_hidden(ids, vision, BIDIRECTIONAL, pad_id)
        cls = hidden[:, 0, :]
        return cls @ self.params["itm.w"] + self.params["itm.b"]

    # -- persistence ---------------------------------------------------------
    def to_checkpoint(self, optimizer=None, step: int = 0, extra: dict | None = None) -> Checkpoint:
        tensors = {f"param/{n}": t.data for n, t in self.params.items()}
        extra = dict(extra or {})
        if optimizer is not None:
            st = optimizer.state()
            tensors.update({f"adam_m/{n}": a for n, a in st["m"].items()})
            tensors.update({f"adam_v/{n}": a for n, a in st["v"].items()})
            extra["optimizer_step"] = st["step"]
        return Checkpoint(self.cfg.to_dict(), tensors, step, extra)

    def save(self, path, optimizer=None, step: int = 0, extra: dict | None = None) -> None:
        save_checkpoint(path, self.to_checkpoint(optimizer, step, extra))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, expected: ModelConfig | None = None) -> "VisionLanguageModel":
        cfg = ModelConfig.from_dict(ckpt.model_config)
        if expected is not None and expected.to_dict() != cfg.to_dict():
            raise ConfigurationError("checkpoint model config does not match the requested config")
        model = cls.__new__(cls)
        model.cfg = cfg.validate()
        model.params = Parameters()
        for name, arr in ckpt.group("param").items():
            model.params.add(name, arr)
        reference = cls(cfg, seed=0).params
        if set(reference.names()) != set(model.params.names()):
            raise ConfigurationError("checkpoint parameters do not match the architecture")
        # keep the canonical parameter order
        ordered = Parameters()
        for name in reference.names():
            ordered.add(name, model.params[name].data)
        model.params = ordered
        return model

    @classmethod
    def load(cls, path, expected: ModelConfig | None = None) -> "VisionLanguageModel":
        return cls.from_checkpoint(load_checkpoint(path), expected)

    def clone(self) -> "VisionLanguageModel":
        other = VisionLanguageModel.__new__(VisionLanguageModel)
        other.cfg = ModelConfig.from_dict(self.cfg.to_dict())
        other.params = Parameters()
        for n, t in self.params.items():
            other.params.add(n, t.data)
        return other
