"""Masked joint v-prediction training.

The objective noises both modality latents with one shared timestep per
sample but independent Gaussian noises, asks the denoiser for both
velocity predictions, and penalizes squared error only at valid latent
positions.  Invalid positions are annihilated end to end: the latents
are gated by the mask before both the noising input and the velocity
target are formed, so perturbing a masked position changes neither the
loss nor any parameter gradient, exactly.

Loss normalization divides by (valid positions x channels x modalities),
keeping the loss scale independent of cloud fraction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from .captioner import CaptionDescriptors, render_prompt
from .denoiser import DenoiserModel
from .errors import ParameterError, ShapeError, TrainingDiverged
from .layers import Param
from .optim import AdamW
from .schedules import NoiseSchedule, noise, to_v
from .seeds import substream


@dataclass
class TrainConfig:
    batch_size: int = 128
    iterations: int = 80_000
    learning_rate: float = 1e-5
    T: int = 1000
    p_uncond: float = 0.1
    p_partial: float = 0.5
    seed: int = 0
    w_img: float = 1.0
    w_dem: float = 1.0
    weight_decay: float = 0.01
    log_every: int = 50
    ckpt_every: int = 0  # 0 = no intermediate checkpoints

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if not (0.0 <= self.p_uncond <= 1.0):
            raise ParameterError("p_uncond must lie in [0, 1]")
        if not (0.0 <= self.p_partial <= 1.0) or self.p_uncond + self.p_partial > 1.0:
            raise ParameterError("need p_uncond + p_partial <= 1")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")


@dataclass
class Batch:
    """Latent training batch; masks are {0,1} at latent resolution."""

    z_img: np.ndarray  # [B, C, H, W]
    z_dem: np.ndarray  # [B, C, H, W]
    z_mask: np.ndarray  # [B, H, W]
    captions: list[str]

    def validate(self) -> None:
        if self.z_img.shape != self.z_dem.shape:
            raise ShapeError(f"z_img {self.z_img.shape} != z_dem {self.z_dem.shape}")
        b, _, h, w = self.z_img.shape
        if self.z_mask.shape != (b, h, w):
            raise ShapeError(f"z_mask {self.z_mask.shape} != {(b, h, w)}")
        if len(self.captions) != b:
            raise ShapeError(f"{len(self.captions)} captions for batch of {b}")


@dataclass
class LossParts:
    total: float
    img: float
    dem: float
    valid_fraction: float


@dataclass
class LatentDataset:
    """Pre-encoded corpus: everything the train loop samples from."""

    z_img: np.ndarray  # [N, C, H, W]
    z_dem: np.ndarray
    z_mask: np.ndarray  # [N, H, W]
    descriptors: list[CaptionDescriptors]

    def __len__(self) -> int:
        return self.z_img.shape[0]


def build_latent_dataset(samples, codec, elev_lo: float, elev_hi: float) -> LatentDataset:
    """Encode corpus samples once; DEMs are normalized to [-1, 1] first."""
    z_img, z_dem, z_mask, descs = [], [], [], []
    factor = codec.downsample_factor
    for s in samples:
        dem_norm = codec_mod.normalize_elevation(s.dem, elev_lo, elev_hi)
        z_img.append(codec.encode_rgb(s.rgb))
        z_dem.append(codec.encode_dem(dem_norm))
        z_mask.append(codec_mod.resize_mask(s.valid, factor).astype(np.float64))
        descs.append(s.descriptors)
    return LatentDataset(
        z_img=np.stack(z_img),
        z_dem=np.stack(z_dem),
        z_mask=np.stack(z_mask),
        descriptors=descs,
    )


# ---- loss ----------------------------------------------------------------


def _loss_forward(model, batch, t, eps_img, eps_dem, sched, w_img, w_dem, want_grads):
    batch.validate()
    if eps_img.shape != batch.z_img.shape or eps_dem.shape != batch.z_dem.shape:
        raise ShapeError("noise tensors must match latent shapes")
    zm = batch.z_mask[:, None, :, :]
    n_valid = float(batch.z_mask.sum())
    if n_valid == 0.0:
        return None, None
    c = batch.z_img.shape[1]

    # gate invalid latent content out of both the model input and the target
    zi = batch.z_img * zm
    zd = batch.z_dem * zm

    # one shared t per sample across both modalities
    v_img = to_v(zi, eps_img, t, sched)
    v_dem = to_v(zd, eps_dem, t, sched)
    xt_img = noise(zi, eps_img, t, sched)
    xt_dem = noise(zd, eps_dem, t, sched)

    cond, c_emb = model.embed_captions_train(batch.captions)
    vh_img, vh_dem, cache = model.forward_train(xt_img, xt_dem, t, cond)

    diff_img = (vh_img - v_img) * zm
    diff_dem = (vh_dem - v_dem) * zm
    loss_img = float((diff_img**2).sum()) / (n_valid * c)
    loss_dem = float((diff_dem**2).sum()) / (n_valid * c)
    total = 0.5 * (w_img * loss_img + w_dem * loss_dem)
    parts = LossParts(
        total=total,
        img=loss_img,
        dem=loss_dem,
        valid_fraction=n_valid / batch.z_mask.size,
    )
    if not want_grads:
        return parts, None
    scale = 1.0 / (n_valid * c)
    dvh_img = w_img * scale * diff_img
    dvh_dem = w_dem * scale * diff_dem
    _, _, demb = model.backward(cache, dvh_img, dvh_dem)
    model.embed_captions_backward(c_emb, demb)
    return parts, None


def masked_vpred_loss(
    model: DenoiserModel,
    batch: Batch,
    t,
    eps_img: np.ndarray,
    eps_dem: np.ndarray,
    sched: NoiseSchedule,
    w_img: float = 1.0,
    w_dem: float = 1.0,
) -> LossParts | None:
    """Masked joint v-prediction loss; None signals an all-invalid batch."""
    parts, _ = _loss_forward(model, batch, t, eps_img, eps_dem, sched, w_img, w_dem, False)
    return parts


def loss_gradients(
    model: DenoiserModel,
    batch: Batch,
    t,
    eps_img: np.ndarray,
    eps_dem: np.ndarray,
    sched: NoiseSchedule,
    w_img: float = 1.0,
    w_dem: float = 1.0,
) -> LossParts | None:
    """Like masked_vpred_loss but accumulates parameter gradients in place."""
    parts, _ = _loss_forward(model, batch, t, eps_img, eps_dem, sched, w_img, w_dem, True)
    return parts


# ---- caption dropout -------------------------------------------------------


def caption_dropout(
    descriptors: CaptionDescriptors,
    rng: np.random.Generator,
    p_uncond: float = 0.1,
    p_partial: float = 0.5,
) -> str:
    """Randomized prompt construction for one training sample.

    With probability ``p_uncond`` the prompt is empty (unconditional
    training for guidance); with ``p_partial`` it drops k in {1,2,3}
    descriptors uniformly without replacement; otherwise all four stay.
    Independently, the ecoregion name anonymizes to its biome type with
    probability 0.5 and the geological descriptor picks local vs
    regional with probability 0.5.

    Draw order (fixed for reproducibility): branch uniform, anonymize
    flag, regional flag, then k and the drop choice on the partial
    branch only.
    """
    u = rng.random()
    anonymize = rng.random() < 0.5
    regional = rng.random() < 0.5
    if u < p_uncond:
        return ""
    present = set(DESCRIPTOR_ORDER)
    if u < p_uncond + p_partial:
        k = int(rng.integers(1, 4))
        for i in rng.choice(4, size=k, replace=False):
            present.discard(DESCRIPTOR_ORDER[i])
    return render_prompt(
        descriptors,
        present,
        geological="regional" if regional else "local",
        biome_form="type" if anonymize else "ecoregion",
    )


DESCRIPTOR_ORDER = ("biome", "geological", "country", "month")


# ---- train loop -------------------------------------------------------------


def train(
    model: DenoiserModel,
    dataset: LatentDataset,
    config: TrainConfig,
    sched: NoiseSchedule,
    trace_path=None,
    ckpt_dir=None,
):
    """Run AdamW over the masked v-prediction loss.

    Deterministic given config.seed when run single-threaded: all draws
    come from one named substream in a fixed per-step order (indices, t,
    eps_img, eps_dem, captions).  Returns (model, trace) where trace
    rows are (step, loss, loss_img, loss_dem, valid_fraction).
    """
    config.validate()
    if config.T != sched.T:
        raise ParameterError(f"config.T={config.T} != schedule T={sched.T}")
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")

    rng = substream(config.seed, "train")
    opt = AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    trace: list[tuple] = []
    skipped = 0
    writer = None
    fh = None
    if trace_path is not None:
        Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(trace_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["step", "loss", "loss_img", "loss_dem", "valid_fraction"])

    shape = dataset.z_img.shape[1:]
    try:
        for step in range(config.iterations):
            idx = rng.integers(0, len(dataset), size=config.batch_size)
            t = rng.integers(1, config.T + 1, size=config.batch_size)
            eps_img = rng.standard_normal((config.batch_size, *shape))
            eps_dem = rng.standard_normal((config.batch_size, *shape))
            captions = [
                caption_dropout(dataset.descriptors[i], rng, config.p_uncond, config.p_partial)
                for i in idx
            ]
            batch = Batch(
                z_img=dataset.z_img[idx],
                z_dem=dataset.z_dem[idx],
                z_mask=dataset.z_mask[idx],
                captions=captions,
            )
            opt.zero_grad()
            parts = loss_gradients(
                model, batch, t, eps_img, eps_dem, sched, config.w_img, config.w_dem
            )
            if parts is None:
                skipped += 1
                continue
            if not np.isfinite(parts.total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: t={t.tolist()}, batch ids={idx.tolist()}"
                )
            opt.step()

            if step % config.log_every == 0 or step == config.iterations - 1:
                row = (step, parts.total, parts.img, parts.dem, parts.valid_fraction)
                trace.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
            if ckpt_dir is not None and config.ckpt_every and (step + 1) % config.ckpt_every == 0:
                model.save(Path(ckpt_dir) / f"model_{step + 1:07d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    if skipped:
        trace.append(("skipped_batches", skipped, "", "", ""))
    return model, trace


# ---- gradient checking -------------------------------------------------------


def finite_difference_check(
    loss_fn,
    params: list[Param],
    analytic: list[np.ndarray],
    n_coords: int = 200,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error of ``analytic`` vs central differences of ``loss_fn``.

    Samples ``n_coords`` coordinates uniformly across the concatenated
    parameter vector.  Relative error uses |fd - an| / max(|fd| + |an|,
    1e-6), which tolerates near-zero gradients without hiding sign bugs.
    """
    if rng is None:
        rng = substream(0, "fdcheck")
    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat_idx = rng.choice(total, size=min(n_coords, total), replace=False)
    worst = 0.0
    for fi in flat_idx:
        pi = int(np.searchsorted(offsets, fi, side="right") - 1)
        local = int(fi - offsets[pi])
        p = params[pi]
        flat = p.value.reshape(-1)
        orig = flat[local]
        flat[local] = orig + h
        lp = loss_fn()
        flat[local] = orig - h
        lm = loss_fn()
        flat[local] = orig
        fd = (lp - lm) / (2.0 * h)
        an = analytic[pi].reshape(-1)[local]
        rel = abs(fd - an) / max(abs(fd) + abs(an), 1e-6)
        worst = max(worst, rel)
    return worst


def gradient_check(
    model: DenoiserModel,
    batch: Batch,
    sched: NoiseSchedule,
    t=None,
    eps_img=None,
    eps_dem=None,
    n_coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Analytic vs finite-difference gradients of the masked loss.

    Intended for small float64 models; returns the max relative error
    over a random coordinate subsample.
    """
    rng = substream(seed, "gradcheck")
    b = batch.z_img.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=b)
    if eps_img is None:
        eps_img = rng.standard_normal(batch.z_img.shape)
    if eps_dem is None:
        eps_dem = rng.standard_normal(batch.z_dem.shape)

    model.zero_grads()
    parts = loss_gradients(model, batch, t, eps_img, eps_dem, sched)
    if parts is None:
        raise ParameterError("gradient_check needs a batch with at least one valid cell")
    params = model.parameters()
    analytic = [p.grad.copy() for p in params]

    def loss_fn():
        out = masked_vpred_loss(model, batch, t, eps_img, eps_dem, sched)
        return out.total

    return finite_difference_check(loss_fn, params, analytic, n_coords=n_coords, h=h, rng=rng)
