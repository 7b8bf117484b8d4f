"""Latent codec: rasters in and out of the diffusion latent space.

Two codecs share one contract.  The identity codec passes pixels
through (latents = rasters) for pixel-space experiments.  The small
convolutional autoencoder downsamples by a fixed factor and is trained
once on the corpus, then frozen, mirroring a frozen-VAE regime at desk
scale.

Both modalities go through the same weights: a DEM enters as its single
channel replicated to 3 channels (encode_dem is literally
encode_rgb(replicate3(d))), and decodes back by averaging the 3 decoded
channels.  Validity masks downsample by conservative AND-pooling: a
latent cell stays valid only when every pixel in its footprint is
valid, so no contaminated cell ever receives loss.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError
from .gridio import read_arrays, write_arrays
from .layers import Conv2d, GroupNorm, avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward
from .optim import AdamW
from .seeds import substream


def replicate3(d: np.ndarray) -> np.ndarray:
    """[1, H, W] -> [3, H, W] by channel replication."""
    d = np.asarray(d)
    if d.ndim != 3 or d.shape[0] != 1:
        raise ShapeError(f"expected [1, H, W], got {d.shape}")
    return np.concatenate([d, d, d], axis=0)


def resize_mask(m: np.ndarray, factor: int) -> np.ndarray:
    """AND-pool a {0,1} mask by ``factor``: 1 iff the whole footprint is 1."""
    m = np.asarray(m)
    if factor < 1:
        raise ParameterError("factor must be >= 1")
    if factor == 1:
        return m.copy()
    h, w = m.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask {m.shape} not divisible by factor {factor}")
    blocks = m.reshape(h // factor, factor, w // factor, factor)
    return blocks.all(axis=(1, 3)).astype(m.dtype)


def normalize_elevation(dem_m: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Metres -> [-1, 1] by the dataset's affine elevation map."""
    if hi <= lo:
        raise ParameterError(f"need hi > lo, got [{lo}, {hi}]")
    return 2.0 * (np.asarray(dem_m, dtype=np.float64) - lo) / (hi - lo) - 1.0


def denormalize_elevation(dem_unit: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """[-1, 1] -> metres; inverse of normalize_elevation."""
    if hi <= lo:
        raise ParameterError(f"need hi > lo, got [{lo}, {hi}]")
    return (np.asarray(dem_unit, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo


class IdentityCodec:
    """Pixels are the latents; 3 latent channels, factor 1."""

    kind = "identity"
    downsample_factor = 1
    latent_channels = 3

    def encode_rgb(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ShapeError(f"expected [3, H, W], got {x.shape}")
        return x.copy()

    def encode_dem(self, d: np.ndarray) -> np.ndarray:
        return self.encode_rgb(replicate3(d))

    def decode_rgb(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        if z.ndim != 3 or z.shape[0] != 3:
            raise ShapeError(f"expected [3, H, W], got {z.shape}")
        return np.clip(z, -1.0, 1.0)

    def decode_dem(self, z: np.ndarray) -> np.ndarray:
        return self.decode_rgb(z).mean(axis=0, keepdims=True)

    def save(self, path) -> None:
        write_arrays(path, {}, {"kind": self.kind})


class ConvCodec:
    """Small convolutional autoencoder, factor-4, trained then frozen.

    Encoder: two conv+pool stages and a projection to ``latent_channels``.
    Decoder mirrors with nearest upsampling; decoded rasters clamp to
    [-1, 1].  ``recon_rmse`` holds the held-out reconstruction RMSE
    measured after training (persisted in the checkpoint manifest) so
    downstream checks can assert round-trip quality against the trained
    codec rather than a made-up constant.
    """

    kind = "conv"
    downsample_factor = 4

    def __init__(self, latent_channels: int = 4, width: int = 16, seed: int = 0, groups: int = 4):
        rng = substream(seed, "codec-init")
        dtype = np.float64
        self.latent_channels = latent_channels
        self.width = width
        self.groups = groups
        w = width
        self.enc1 = Conv2d("enc1", 3, w, 3, rng, dtype)
        self.enc1n = GroupNorm("enc1n", w, groups, dtype)
        self.enc2 = Conv2d("enc2", w, 2 * w, 3, rng, dtype)
        self.enc2n = GroupNorm("enc2n", 2 * w, groups, dtype)
        self.enc3 = Conv2d("enc3", 2 * w, latent_channels, 3, rng, dtype)
        self.dec1 = Conv2d("dec1", latent_channels, 2 * w, 3, rng, dtype)
        self.dec1n = GroupNorm("dec1n", 2 * w, groups, dtype)
        self.dec2 = Conv2d("dec2", 2 * w, w, 3, rng, dtype)
        self.dec2n = GroupNorm("dec2n", w, groups, dtype)
        self.dec3 = Conv2d("dec3", w, 3, 3, rng, dtype)
        self.recon_rmse: float | None = None
        self._layers = [
            self.enc1, self.enc1n, self.enc2, self.enc2n, self.enc3,
            self.dec1, self.dec1n, self.dec2, self.dec2n, self.dec3,
        ]

    def parameters(self):
        return [p for layer in self._layers for p in layer.parameters()]

    # ---- forward pieces (batched [B, C, H, W]) ----

    def _encode(self, x):
        h, c1 = self.enc1.forward(x)
        h, c1n = self.enc1n.forward(h)
        h, s1 = silu(h)
        h = avg_pool2(h)
        h, c2 = self.enc2.forward(h)
        h, c2n = self.enc2n.forward(h)
        h, s2 = silu(h)
        h = avg_pool2(h)
        z, c3 = self.enc3.forward(h)
        return z, (c1, c1n, s1, c2, c2n, s2, c3)

    def _decode(self, z):
        h, d1 = self.dec1.forward(z)
        h, d1n = self.dec1n.forward(h)
        h, t1 = silu(h)
        h = upsample2(h)
        h, d2 = self.dec2.forward(h)
        h, d2n = self.dec2n.forward(h)
        h, t2 = silu(h)
        h = upsample2(h)
        y, d3 = self.dec3.forward(h)
        return y, (d1, d1n, t1, d2, d2n, t2, d3)

    def _decode_backward(self, cache, dy):
        d1, d1n, t1, d2, d2n, t2, d3 = cache
        dh = self.dec3.backward(d3, dy)
        dh = upsample2_backward(dh)
        dh = silu_backward(t2, dh)
        dh = self.dec2n.backward(d2n, dh)
        dh = self.dec2.backward(d2, dh)
        dh = upsample2_backward(dh)
        dh = silu_backward(t1, dh)
        dh = self.dec1n.backward(d1n, dh)
        return self.dec1.backward(d1, dh)

    def _encode_backward(self, cache, dz):
        c1, c1n, s1, c2, c2n, s2, c3 = cache
        dh = self.enc3.backward(c3, dz)
        dh = avg_pool2_backward(dh)
        dh = silu_backward(s2, dh)
        dh = self.enc2n.backward(c2n, dh)
        dh = self.enc2.backward(c2, dh)
        dh = avg_pool2_backward(dh)
        dh = silu_backward(s1, dh)
        dh = self.enc1n.backward(c1n, dh)
        return self.enc1.backward(c1, dh)

    # ---- public contract (single rasters) ----

    def _check_dims(self, x):
        if x.ndim != 3 or x.shape[0] != 3:
            raise ShapeError(f"expected [3, H, W], got {x.shape}")
        if x.shape[1] % self.downsample_factor or x.shape[2] % self.downsample_factor:
            raise ShapeError(
                f"spatial dims {x.shape[1:]} not divisible by factor {self.downsample_factor}"
            )

    def encode_rgb(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_dims(x)
        z, _ = self._encode(x[None])
        return z[0]

    def encode_dem(self, d: np.ndarray) -> np.ndarray:
        return self.encode_rgb(replicate3(d))

    def decode_rgb(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise ShapeError(f"expected [{self.latent_channels}, H', W'], got {z.shape}")
        y, _ = self._decode(z[None])
        return np.clip(y[0], -1.0, 1.0)

    def decode_dem(self, z: np.ndarray) -> np.ndarray:
        return self.decode_rgb(z).mean(axis=0, keepdims=True)

    # ---- training ----

    def train_reconstruction(
        self,
        images: np.ndarray,
        steps: int = 400,
        batch_size: int = 16,
        lr: float = 2e-3,
        seed: int = 0,
        holdout_fraction: float = 0.1,
    ) -> float:
        """Fit the autoencoder by MSE on [N, 3, H, W] images in [-1, 1].

        Returns (and stores) the held-out reconstruction RMSE measured
        after the final step; the codec should be treated as frozen
        afterwards.
        """
        images = np.asarray(images, dtype=np.float64)
        n = images.shape[0]
        n_hold = max(1, int(n * holdout_fraction))
        rng = substream(seed, "codec-train")
        perm = rng.permutation(n)
        hold, fit = perm[:n_hold], perm[n_hold:]
        if len(fit) == 0:
            raise ParameterError("not enough images to train the codec")
        opt = AdamW(self.parameters(), lr=lr)
        for _ in range(steps):
            idx = fit[rng.integers(0, len(fit), size=min(batch_size, len(fit)))]
            x = images[idx]
            opt.zero_grad()
            z, enc_cache = self._encode(x)
            y, dec_cache = self._decode(z)
            diff = y - x
            dy = 2.0 * diff / diff.size
            dz = self._decode_backward(dec_cache, dy)
            self._encode_backward(enc_cache, dz)
            opt.step()
        errs = []
        for i in hold:
            z, _ = self._encode(images[i][None])
            y, _ = self._decode(z)
            errs.append(((np.clip(y[0], -1, 1) - images[i]) ** 2).mean())
        self.recon_rmse = float(np.sqrt(np.mean(errs)))
        return self.recon_rmse

    # ---- checkpointing ----

    def save(self, path) -> None:
        manifest = {
            "kind": self.kind,
            "latent_channels": str(self.latent_channels),
            "width": str(self.width),
            "groups": str(self.groups),
        }
        if self.recon_rmse is not None:
            manifest["recon_rmse"] = repr(self.recon_rmse)
        write_arrays(path, {p.name: p.value for p in self.parameters()}, manifest)


def load_codec(path):
    arrays, manifest = read_arrays(path)
    kind = manifest.get("kind")
    if kind == "identity":
        return IdentityCodec()
    if kind != "conv":
        raise ParameterError(f"{path}: unknown codec kind {kind!r}")
    codec = ConvCodec(
        latent_channels=int(manifest["latent_channels"]),
        width=int(manifest["width"]),
        groups=int(manifest.get("groups", 4)),
    )
    for p in codec.parameters():
        if p.name not in arrays:
            raise ShapeError(f"checkpoint missing parameter {p.name}")
        p.value[...] = arrays[p.name].astype(np.float64)
    if "recon_rmse" in manifest:
        codec.recon_rmse = float(manifest["recon_rmse"])
    return codec
