"""Joint two-modality denoising network.

One shared first downsampling block (the stem) is applied to each
modality latent independently; the two feature maps are averaged and fed
through a shared backbone conditioned on timestep and caption embeddings
via feature-wise affine modulation.  The backbone output is routed to two
modality-specific upsampling heads, each of which also receives the
averaged stem features as a skip connection, so both heads sit on an
equal informational footing.

Caption conditioning uses a deterministic token-hash bag-of-words
embedding with a learned projection; the caption vocabulary is a small
closed set, so a full text encoder would be wasted here.  The empty
prompt maps to a learned unconditional embedding, which is what
classifier-free guidance extrapolates away from at sampling time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .gridio import read_arrays, write_arrays
from .layers import (
    Conv2d,
    GroupNorm,
    Linear,
    Param,
    avg_pool2,
    avg_pool2_backward,
    silu,
    silu_backward,
    upsample2,
    upsample2_backward,
)
from .seeds import stable_hash64, substream

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str) -> list[str]:
    return _TOKEN_RE.findall(prompt.lower())


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 4
    stem_channels: int = 32
    backbone_channels: tuple[int, int] = (64, 128)
    embed_dim: int = 128  # caption embedding width L
    time_dim: int = 64
    cond_dim: int = 128
    # 512 buckets leave the shipped descriptor vocabulary collision-free
    vocab_buckets: int = 512
    groups: int = 4
    dtype: str = "float64"

    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        for c in (self.stem_channels, *self.backbone_channels):
            if c % self.groups:
                raise ShapeError(f"channel width {c} not divisible by groups {self.groups}")
        if self.time_dim % 2:
            raise ShapeError("time_dim must be even")


def time_features(t, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of integer timesteps; shape [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=dtype))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=dtype) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class _StemBlock:
    """Conv -> GroupNorm -> SiLU -> 2x average pool."""

    def __init__(self, name, c_in, c_out, groups, rng, dtype):
        self.conv = Conv2d(f"{name}.conv", c_in, c_out, 3, rng, dtype)
        self.norm = GroupNorm(f"{name}.norm", c_out, groups, dtype)

    def parameters(self):
        return self.conv.parameters() + self.norm.parameters()

    def forward(self, x):
        h, c_conv = self.conv.forward(x)
        h, c_norm = self.norm.forward(h)
        h, c_act = silu(h)
        return avg_pool2(h), (c_conv, c_norm, c_act)

    def backward(self, cache, dy):
        c_conv, c_norm, c_act = cache
        dh = avg_pool2_backward(dy)
        dh = silu_backward(c_act, dh)
        dh = self.norm.backward(c_norm, dh)
        return self.conv.backward(c_conv, dh)


class _ResBlock:
    """Pre-norm residual block with affine (scale, shift) conditioning."""

    def __init__(self, name, c_in, c_out, cond_dim, groups, rng, dtype):
        self.norm1 = GroupNorm(f"{name}.norm1", c_in, groups, dtype)
        self.conv1 = Conv2d(f"{name}.conv1", c_in, c_out, 3, rng, dtype)
        self.norm2 = GroupNorm(f"{name}.norm2", c_out, groups, dtype)
        # zero init: the block starts as an unconditioned residual unit
        self.film = Linear(f"{name}.film", cond_dim, 2 * c_out, rng, dtype, zero_init=True)
        self.conv2 = Conv2d(f"{name}.conv2", c_out, c_out, 3, rng, dtype)
        self.skip = Conv2d(f"{name}.skip", c_in, c_out, 1, rng, dtype) if c_in != c_out else None
        self.c_out = c_out

    def parameters(self):
        ps = (
            self.norm1.parameters()
            + self.conv1.parameters()
            + self.norm2.parameters()
            + self.film.parameters()
            + self.conv2.parameters()
        )
        if self.skip is not None:
            ps += self.skip.parameters()
        return ps

    def forward(self, x, cond):
        h, c_n1 = self.norm1.forward(x)
        h, c_s1 = silu(h)
        h, c_c1 = self.conv1.forward(h)
        h3, c_n2 = self.norm2.forward(h)
        sb, c_f = self.film.forward(cond)
        scale = sb[:, : self.c_out][:, :, None, None]
        shift = sb[:, self.c_out :][:, :, None, None]
        h4 = h3 * (1.0 + scale) + shift
        h, c_s2 = silu(h4)
        h, c_c2 = self.conv2.forward(h)
        if self.skip is not None:
            xs, c_sk = self.skip.forward(x)
        else:
            xs, c_sk = x, None
        return h + xs, (c_n1, c_s1, c_c1, c_n2, c_f, c_s2, c_c2, c_sk, h3, scale)

    def backward(self, cache, dy):
        c_n1, c_s1, c_c1, c_n2, c_f, c_s2, c_c2, c_sk, h3, scale = cache
        dh = self.conv2.backward(c_c2, dy)
        dh4 = silu_backward(c_s2, dh)
        dh3 = dh4 * (1.0 + scale)
        dscale = (dh4 * h3).sum(axis=(2, 3))
        dshift = dh4.sum(axis=(2, 3))
        dcond = self.film.backward(c_f, np.concatenate([dscale, dshift], axis=1))
        dh = self.norm2.backward(c_n2, dh3)
        dh = self.conv1.backward(c_c1, dh)
        dh = silu_backward(c_s1, dh)
        dx = self.norm1.backward(c_n1, dh)
        if self.skip is not None:
            dx = dx + self.skip.backward(c_sk, dy)
        else:
            dx = dx + dy
        return dx, dcond


class _HeadBlock:
    """Per-modality output head: conv on (backbone + skip), upsample, project."""

    def __init__(self, name, c_in, c_mid, c_out, groups, rng, dtype):
        self.conv_a = Conv2d(f"{name}.conv_a", c_in, c_mid, 3, rng, dtype)
        self.norm = GroupNorm(f"{name}.norm", c_mid, groups, dtype)
        self.conv_out = Conv2d(f"{name}.conv_out", c_mid, c_out, 3, rng, dtype)

    def parameters(self):
        return self.conv_a.parameters() + self.norm.parameters() + self.conv_out.parameters()

    def forward(self, x):
        h, c_a = self.conv_a.forward(x)
        h, c_n = self.norm.forward(h)
        h, c_s = silu(h)
        h = upsample2(h)
        y, c_o = self.conv_out.forward(h)
        return y, (c_a, c_n, c_s, c_o)

    def backward(self, cache, dy):
        c_a, c_n, c_s, c_o = cache
        dh = self.conv_out.backward(c_o, dy)
        dh = upsample2_backward(dh)
        dh = silu_backward(c_s, dh)
        dh = self.norm.backward(c_n, dh)
        return self.conv_a.backward(c_a, dh)


class DenoiserModel:
    """Shared-stem, averaged-feature, dual-head v-predictor."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        config.validate()
        self.config = config
        dtype = config.np_dtype()
        rng = substream(seed, "denoiser-init")
        c = config.in_channels
        f0 = config.stem_channels
        f1, f2 = config.backbone_channels
        g = config.groups
        cd = config.cond_dim
        L = config.embed_dim

        self.stem = _StemBlock("stem", c, f0, g, rng, dtype)
        self.down = _ResBlock("backbone.down", f0, f1, cd, g, rng, dtype)
        self.mid = _ResBlock("backbone.mid", f1, f2, cd, g, rng, dtype)
        self.up = _ResBlock("backbone.up", f2, f1, cd, g, rng, dtype)
        self.head_img = _HeadBlock("head_img", f1 + f0, f0, c, g, rng, dtype)
        self.head_dem = _HeadBlock("head_dem", f1 + f0, f0, c, g, rng, dtype)

        self.time_fc1 = Linear("time.fc1", config.time_dim, cd, rng, dtype)
        self.time_fc2 = Linear("time.fc2", cd, cd, rng, dtype)
        self.cond_fc = Linear("cond.fc", cd + L, cd, rng, dtype)

        self.caption_table = Param(
            "caption.table",
            (rng.standard_normal((config.vocab_buckets, L)) / np.sqrt(L)).astype(dtype),
        )
        self.caption_proj = Linear("caption.proj", L, L, rng, dtype)
        self.null_embedding = Param(
            "caption.null", (rng.standard_normal(L) / np.sqrt(L)).astype(dtype)
        )

        self._params = (
            self.stem.parameters()
            + self.down.parameters()
            + self.mid.parameters()
            + self.up.parameters()
            + self.head_img.parameters()
            + self.head_dem.parameters()
            + self.time_fc1.parameters()
            + self.time_fc2.parameters()
            + self.cond_fc.parameters()
            + [self.caption_table]
            + self.caption_proj.parameters()
            + [self.null_embedding]
        )

    # ---- parameters ----------------------------------------------------

    def parameters(self) -> list[Param]:
        return self._params

    def param_dict(self) -> dict[str, Param]:
        return {p.name: p for p in self._params}

    def n_params(self) -> int:
        return sum(p.value.size for p in self._params)

    def zero_grads(self) -> None:
        for p in self._params:
            p.zero_grad()

    # ---- caption embedding ----------------------------------------------

    def _buckets(self, prompt: str) -> list[int]:
        v = self.config.vocab_buckets
        return [stable_hash64(tok) % v for tok in tokenize(prompt)]

    def embed_caption(self, prompt: str) -> np.ndarray:
        """Deterministic caption embedding; '' yields the learned null vector."""
        e, _ = self.embed_captions_train([prompt])
        return e[0]

    def embed_captions(self, prompts: list[str]) -> np.ndarray:
        e, _ = self.embed_captions_train(prompts)
        return e

    def embed_captions_train(self, prompts: list[str]):
        dtype = self.config.np_dtype()
        L = self.config.embed_dim
        b = len(prompts)
        bags = np.zeros((b, L), dtype=dtype)
        bucket_lists: list[list[int] | None] = []
        for i, prompt in enumerate(prompts):
            buckets = self._buckets(prompt)
            if buckets:
                bags[i] = self.caption_table.value[buckets].mean(axis=0)
                bucket_lists.append(buckets)
            else:
                bucket_lists.append(None)
        emb, c_proj = self.caption_proj.forward(bags)
        empty = [i for i, bl in enumerate(bucket_lists) if bl is None]
        for i in empty:
            emb[i] = self.null_embedding.value
        return emb, (bucket_lists, c_proj, empty)

    def embed_captions_backward(self, cache, demb) -> None:
        bucket_lists, c_proj, empty = cache
        demb = demb.copy()
        for i in empty:
            self.null_embedding.grad += demb[i]
            demb[i] = 0.0
        dbags = self.caption_proj.backward(c_proj, demb)
        for i, buckets in enumerate(bucket_lists):
            if buckets:
                np.add.at(self.caption_table.grad, buckets, dbags[i] / len(buckets))

    # ---- conditioning pathway -------------------------------------------

    def _cond_vector(self, t, caption_emb):
        dtype = self.config.np_dtype()
        t = np.broadcast_to(np.atleast_1d(t), (caption_emb.shape[0],))
        tf = time_features(t, self.config.time_dim, dtype)
        h, c_t1 = self.time_fc1.forward(tf)
        h, c_ts = silu(h)
        et, c_t2 = self.time_fc2.forward(h)
        joint = np.concatenate([et, caption_emb], axis=1)
        h, c_cf = self.cond_fc.forward(joint)
        cv, c_cs = silu(h)
        return cv, (c_t1, c_ts, c_t2, c_cf, c_cs)

    def _cond_backward(self, cache, dcv):
        c_t1, c_ts, c_t2, c_cf, c_cs = cache
        dh = silu_backward(c_cs, dcv)
        djoint = self.cond_fc.backward(c_cf, dh)
        cd = self.config.cond_dim
        det, demb = djoint[:, :cd], djoint[:, cd:]
        dh = self.time_fc2.backward(c_t2, det)
        dh = silu_backward(c_ts, dh)
        self.time_fc1.backward(c_t1, dh)
        return demb

    # ---- forward / backward ----------------------------------------------

    def _check_latents(self, x_img, x_dem):
        if x_img.shape != x_dem.shape:
            raise ShapeError(f"modality latents differ: {x_img.shape} vs {x_dem.shape}")
        if x_img.ndim != 4 or x_img.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [B, {self.config.in_channels}, H, W], got {x_img.shape}")
        _, _, h, w = x_img.shape
        if h % 4 or w % 4:
            raise ShapeError(f"latent spatial dims must be divisible by 4, got {h}x{w}")

    def forward_train(self, x_img, x_dem, t, caption_emb):
        """Full forward pass returning (v_img, v_dem, cache) for backprop."""
        self._check_latents(x_img, x_dem)
        cv, c_cond = self._cond_vector(t, caption_emb)

        s_img, c_si = self.stem.forward(x_img)
        s_dem, c_sd = self.stem.forward(x_dem)
        sbar = 0.5 * (s_img + s_dem)

        d1, c_d1 = self.down.forward(sbar, cv)
        m_in = avg_pool2(d1)
        m1, c_m1 = self.mid.forward(m_in, cv)
        u_in = upsample2(m1)
        u1, c_u1 = self.up.forward(u_in, cv)

        head_in = np.concatenate([u1, sbar], axis=1)
        v_img, c_hi = self.head_img.forward(head_in)
        v_dem, c_hd = self.head_dem.forward(head_in)
        cache = (c_cond, c_si, c_sd, c_d1, c_m1, c_u1, c_hi, c_hd)
        return v_img, v_dem, cache

    def denoise(self, x_img, x_dem, t, caption_emb):
        """Inference pass (caches discarded)."""
        v_img, v_dem, _ = self.forward_train(x_img, x_dem, t, caption_emb)
        return v_img, v_dem

    def backward(self, cache, dv_img, dv_dem):
        """Accumulate parameter gradients; returns (dx_img, dx_dem, dcaption_emb)."""
        c_cond, c_si, c_sd, c_d1, c_m1, c_u1, c_hi, c_hd = cache
        f1 = self.config.backbone_channels[0]

        dhead_in = self.head_img.backward(c_hi, dv_img)
        dhead_in = dhead_in + self.head_dem.backward(c_hd, dv_dem)
        du1, dsbar = dhead_in[:, :f1], dhead_in[:, f1:]

        du_in, dcv3 = self.up.backward(c_u1, du1)
        dm1 = upsample2_backward(du_in)
        dm_in, dcv2 = self.mid.backward(c_m1, dm1)
        dd1 = avg_pool2_backward(dm_in)
        dsbar_bb, dcv1 = self.down.backward(c_d1, dd1)
        dsbar = dsbar + dsbar_bb

        ds = 0.5 * dsbar
        dx_img = self.stem.backward(c_si, ds)
        dx_dem = self.stem.backward(c_sd, ds)

        demb = self._cond_backward(c_cond, dcv1 + dcv2 + dcv3)
        return dx_img, dx_dem, demb

    # ---- checkpointing ----------------------------------------------------

    def save(self, path) -> None:
        manifest = {
            "kind": "denoiser",
            "in_channels": str(self.config.in_channels),
            "stem_channels": str(self.config.stem_channels),
            "backbone_channels": ",".join(str(c) for c in self.config.backbone_channels),
            "embed_dim": str(self.config.embed_dim),
            "time_dim": str(self.config.time_dim),
            "cond_dim": str(self.config.cond_dim),
            "vocab_buckets": str(self.config.vocab_buckets),
            "groups": str(self.config.groups),
            "dtype": self.config.dtype,
        }
        write_arrays(path, {p.name: p.value for p in self._params}, manifest)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        arrays, manifest = read_arrays(path)
        if manifest.get("kind") != "denoiser":
            raise ParameterError(f"{path}: not a denoiser checkpoint (kind={manifest.get('kind')!r})")
        config = DenoiserConfig(
            in_channels=int(manifest["in_channels"]),
            stem_channels=int(manifest["stem_channels"]),
            backbone_channels=tuple(int(c) for c in manifest["backbone_channels"].split(",")),
            embed_dim=int(manifest["embed_dim"]),
            time_dim=int(manifest["time_dim"]),
            cond_dim=int(manifest["cond_dim"]),
            vocab_buckets=int(manifest["vocab_buckets"]),
            groups=int(manifest["groups"]),
            dtype=manifest["dtype"],
        )
        model = cls(config)
        dtype = config.np_dtype()
        for p in model.parameters():
            if p.name not in arrays:
                raise ShapeError(f"checkpoint missing parameter {p.name}")
            stored = arrays[p.name].astype(dtype)
            if stored.shape != p.value.shape:
                raise ShapeError(
                    f"checkpoint shape {stored.shape} != model shape {p.value.shape} for {p.name}"
                )
            p.value[...] = stored
        return model
