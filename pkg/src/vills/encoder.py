"""Shared patch-token transformer encoder for images, frames and clips.

One parameter set serves every modality.  Inputs are tokenized by extent
family: inputs at the configured image extent go through the image patch
embedding, inputs at the frame extent (video frames, sampled frames, local
crops) through the frame patch embedding.  Videos are encoded per frame with
spatial-only attention plus a learned per-frame temporal embedding; an image
is literally a one-frame video, so a one-frame clip and the equal frame
produce identical tokens.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError
from .lse import resize_nearest
from .tensor import Tensor

_INIT_SCALE = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    image_patch: int = 8
    image_extent: tuple = (32, 16)
    frame_patch: int = 4
    frame_extent: tuple = (16, 8)
    frames: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.depth < 0 or self.frames < 1 or self.mlp_ratio < 1:
            raise ConfigError("depth must be >= 0, frames >= 1, mlp_ratio >= 1")
        for name, (h, w), patch in (
            ("image", self.image_extent, self.image_patch),
            ("frame", self.frame_extent, self.frame_patch),
        ):
            if patch < 1 or h % patch or w % patch:
                raise ConfigError(f"{name} extent {h}x{w} not divisible by patch {patch}")

    @classmethod
    def from_config(cls, cfg):
        return cls(
            dim=cfg["encoder.dim"],
            depth=cfg["encoder.depth"],
            heads=cfg["encoder.heads"],
            image_patch=cfg["encoder.image_patch"],
            image_extent=cfg.image_extent,
            frame_patch=cfg["encoder.frame_patch"],
            frame_extent=cfg.frame_extent,
            frames=cfg["encoder.frames"],
            mlp_ratio=cfg["encoder.mlp_ratio"],
        )

    @property
    def head_dim(self):
        return self.dim // self.heads

    def grid(self, family):
        (h, w), patch = self._family(family)
        return (h // patch, w // patch)

    def tokens_per_frame(self, family):
        gh, gw = self.grid(family)
        return gh * gw

    def _family(self, family):
        if family == "image":
            return self.image_extent, self.image_patch
        if family == "frame":
            return self.frame_extent, self.frame_patch
        raise ConfigError(f"unknown extent family {family!r}")

    def family_of(self, extent):
        if tuple(extent) == tuple(self.image_extent):
            return "image"
        if tuple(extent) == tuple(self.frame_extent):
            return "frame"
        raise ConfigError(
            f"input extent {tuple(extent)} matches neither image {self.image_extent} "
            f"nor frame {self.frame_extent}"
        )


@dataclass
class TokenBatch:
    tokens: Tensor  # [B, N, d]
    modality: str  # image | video | frame | lse_view
    frames: int  # frames per item (1 for images)
    source_ids: Optional[np.ndarray] = None  # originating sample index


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
    """Fresh encoder parameter dict; temporal embedding starts at zero."""
    d = cfg.dim
    params = {}
    for family, patch in (("image", cfg.image_patch), ("frame", cfg.frame_patch)):
        in_dim = patch * patch * 3
        params[f"encoder.patch.{family}.weight"] = T.randn_param(rng, (in_dim, d), _INIT_SCALE, dtype)
        params[f"encoder.patch.{family}.bias"] = T.zeros_param((d,), dtype)
        params[f"encoder.patch.{family}.pos"] = T.randn_param(
            rng, (cfg.tokens_per_frame(family), d), _INIT_SCALE, dtype
        )
    params["encoder.temporal"] = T.zeros_param((cfg.frames, d), dtype)
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        p = f"encoder.block{i}"
        params[f"{p}.norm1.gain"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        params[f"{p}.norm1.bias"] = T.zeros_param((d,), dtype)
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{proj}"] = T.randn_param(rng, (d, d), _INIT_SCALE, dtype)
        for bias in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attn.{bias}"] = T.zeros_param((d,), dtype)
        params[f"{p}.norm2.gain"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        params[f"{p}.norm2.bias"] = T.zeros_param((d,), dtype)
        params[f"{p}.mlp.w1"] = T.randn_param(rng, (d, hidden), _INIT_SCALE, dtype)
        params[f"{p}.mlp.b1"] = T.zeros_param((hidden,), dtype)
        params[f"{p}.mlp.w2"] = T.randn_param(rng, (hidden, d), _INIT_SCALE, dtype)
        params[f"{p}.mlp.b2"] = T.zeros_param((d,), dtype)
    return params


def _extract_patches(frames_arr, patch):
    """[M, H, W, 3] -> [M, L, patch*patch*3] in row-major grid order."""
    m, h, w, c = frames_arr.shape
    gh, gw = h // patch, w // patch
    x = frames_arr.reshape(m, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(m, gh * gw, patch * patch * c)


def _as_clip_batch(x, modality):
    """Normalize input pixels to [B, T, H, W, 3]."""
    x = np.asarray(x)
    if modality == "video":
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5:
            raise ConfigError(f"video input must be [T,H,W,3] or [B,T,H,W,3], got {x.shape}")
    else:
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise ConfigError(f"image input must be [H,W,3] or [B,H,W,3], got {x.shape}")
        x = x[:, None]
    if x.shape[-1] != 3:
        raise ConfigError(f"inputs must have 3 channels, got shape {x.shape}")
    return x


def embed_tokens(x, params, cfg: EncoderConfig, modality):
    """Patch embedding + positional + temporal embeddings -> [B, T*L, d]."""
    clips = _as_clip_batch(x, modality)
    b, t, h, w, _ = clips.shape
    family = cfg.family_of((h, w))
    if t > cfg.frames:
        raise ConfigError(f"clip has {t} frames but the temporal table holds {cfg.frames}")
    _, patch = cfg._family(family)
    dtype = params[f"encoder.patch.{family}.weight"].dtype
    patches = _extract_patches(clips.reshape(b * t, h, w, 3).astype(dtype), patch)

    tokens = T.matmul(Tensor(patches), params[f"encoder.patch.{family}.weight"])
    tokens = T.add(tokens, params[f"encoder.patch.{family}.bias"])
    tokens = T.add(tokens, params[f"encoder.patch.{family}.pos"])  # [B*T, L, d]
    l = tokens.shape[1]
    tokens = T.reshape(tokens, (b, t, l, cfg.dim))
    select = np.eye(t, cfg.frames, dtype=dtype)
    temporal = T.matmul(Tensor(select), params["encoder.temporal"])  # [T, d]
    tokens = T.add(tokens, T.reshape(temporal, (t, 1, cfg.dim)))
    return T.reshape(tokens, (b, t * l, cfg.dim))


def _block(x, params, prefix, cfg: EncoderConfig, attention_sink=None):
    """Pre-norm attention + MLP on [M, L, d]."""
    m, l, d = x.shape
    heads, hd = cfg.heads, cfg.head_dim

    h = T.layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])

    def split_heads(z):
        return T.transpose(T.reshape(z, (m, l, heads, hd)), (0, 2, 1, 3))

    q = split_heads(T.add(T.matmul(h, params[f"{prefix}.attn.wq"]), params[f"{prefix}.attn.bq"]))
    k = split_heads(T.add(T.matmul(h, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"]))
    v = split_heads(T.add(T.matmul(h, params[f"{prefix}.attn.wv"]), params[f"{prefix}.attn.bv"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = T.softmax(scores)  # [M, heads, L, L]
    if attention_sink is not None:
        attention_sink.append(attn.data.copy())
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (m, l, d))
    ctx = T.add(T.matmul(ctx, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])
    x = T.add(x, ctx)

    h2 = T.layer_norm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
    h2 = T.gelu(T.add(T.matmul(h2, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"]))
    h2 = T.add(T.matmul(h2, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return T.add(x, h2)


def run_blocks(tokens, params, cfg: EncoderConfig, frames=1, attention_sink=None):
    """Apply the transformer stack per frame (no cross-frame attention)."""
    b, n, d = tokens.shape
    if n % frames:
        raise ConfigError(f"{n} tokens do not split into {frames} frames")
    l = n // frames
    x = T.reshape(tokens, (b * frames, l, d))
    for i in range(cfg.depth):
        x = _block(x, params, f"encoder.block{i}", cfg, attention_sink)
    return T.reshape(x, (b, n, d))


def encode(x, params, cfg: EncoderConfig, modality, role="student", source_ids=None):
    """Full forward pass to a TokenBatch; teacher calls never record gradients."""
    if role not in ("student", "teacher"):
        raise ParameterError(f"role must be student|teacher, got {role!r}")
    clips = _as_clip_batch(x, modality)
    frames = clips.shape[1]

    def forward():
        tokens = embed_tokens(clips, params, cfg, "video")
        return run_blocks(tokens, params, cfg, frames=frames)

    if role == "teacher":
        with T.no_grad():
            tokens = forward()
    else:
        tokens = forward()
    ids = np.asarray(source_ids) if source_ids is not None else None
    return TokenBatch(tokens, modality, frames, ids)


def sample_frame(video, rule="random", seed=0):
    """Pick one frame of [T, H, W, 3]: seeded uniform or the middle frame."""
    video = np.asarray(video)
    if video.ndim != 4:
        raise ParameterError(f"sample_frame expects [T,H,W,3], got {video.shape}")
    t = video.shape[0]
    if rule == "middle":
        return video[t // 2]
    if rule == "random":
        return video[np.random.default_rng(seed).integers(t)]
    raise ParameterError(f"unknown frame sampling rule {rule!r}")


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def _write_pgm(path, gray):
    """P5 binary PGM, maxval 255."""
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.astype(np.uint8).tobytes())


def export_attention(image, params, cfg: EncoderConfig, layer, out_dir, stem="attention"):
    """Write per-head attention of one image at one layer.

    Per head: a CSV of token-to-token attention (one row per query token) and
    a PGM heat map of the attention each token receives, upsampled to the
    input extent.  Returns the written paths.
    """
    if not 0 <= layer < cfg.depth:
        raise ParameterError(f"layer {layer} out of range for depth {cfg.depth}")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ParameterError(f"export_attention expects one [H,W,3] image, got {image.shape}")
    h, w, _ = image.shape
    family = cfg.family_of((h, w))
    gh, gw = cfg.grid(family)

    sink = []
    with T.no_grad():
        tokens = embed_tokens(image, params, cfg, "image")
        run_blocks(tokens, params, cfg, frames=1, attention_sink=sink)
    attn = sink[layer][0]  # [heads, L, L]

    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for head in range(cfg.heads):
        base = os.path.join(out_dir, f"{stem}_layer{layer}_head{head}")
        rows = attn[head]
        with open(base + ".csv", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")
        received = rows.mean(axis=0).reshape(gh, gw)
        heat = resize_nearest(received, h, w)
        peak = heat.max()
        gray = np.round(heat * (255.0 / peak)) if peak > 0 else np.zeros_like(heat)
        _write_pgm(base + ".pgm", gray)
        paths.extend([base + ".csv", base + ".pgm"])
    return paths
