"""Joint DDIM sampling under classifier-free guidance.

Guidance is applied in v-space, v_bar = v_uncond + w * (v_cond -
v_uncond), then converted through from_v; because from_v is linear this
is identical (to rounding) to guiding in epsilon- or x-space.  w == 1
short-circuits to the conditional prediction alone, bitwise, and skips
the unconditional pass.

With eta = 0 the whole trajectory is a pure function of (weights, seed,
config): the fresh-noise generator is only consumed when eta > 0.
Initial noises for the two modalities come from distinct named
substreams of the configured seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import denormalize_elevation
from .errors import ParameterError
from .schedules import NoiseSchedule, ddpm_sigma, from_v
from .seeds import substream


@dataclass
class SampleConfig:
    steps: int = 50
    guidance_scale: float = 7.0
    eta: float = 0.0
    seed: int = 0
    prompt: str = ""

    def validate(self) -> None:
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ParameterError("guidance_scale must be >= 0")
        if not (0.0 <= self.eta <= 1.0):
            raise ParameterError("eta must lie in [0, 1]")


def timestep_grid(T: int, steps: int) -> np.ndarray:
    """Uniform stride over [T, 0] inclusive; steps+1 strictly decreasing ints."""
    if not (1 <= steps <= T):
        raise ParameterError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    if np.any(np.diff(ts) >= 0):
        raise ParameterError(f"timestep grid not strictly decreasing for steps={steps}, T={T}")
    return ts


def ddim_step(
    model,
    z_img: np.ndarray,
    z_dem: np.ndarray,
    t_from: int,
    t_to: int,
    cond: np.ndarray,
    uncond: np.ndarray,
    w: float,
    eta: float,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
):
    """One guided DDIM update of both modality latents from t_from to t_to."""
    if t_from <= t_to:
        raise ParameterError(f"need t_from > t_to, got {t_from} -> {t_to}")
    if eta > 0.0 and rng is None:
        raise ParameterError("eta > 0 requires an rng for the fresh noise")

    v_img_c, v_dem_c = model.denoise(z_img, z_dem, t_from, cond)
    if w == 1.0:
        v_img, v_dem = v_img_c, v_dem_c
    else:
        v_img_u, v_dem_u = model.denoise(z_img, z_dem, t_from, uncond)
        v_img = v_img_u + w * (v_img_c - v_img_u)
        v_dem = v_dem_u + w * (v_dem_c - v_dem_u)

    a_to = float(sched.alpha[t_to])
    s_to = float(sched.sigma[t_to])
    out = []
    for z, v in ((z_img, v_img), (z_dem, v_dem)):
        x_hat, eps_hat = from_v(z, v, t_from, sched)
        if eta == 0.0:
            out.append(a_to * x_hat + s_to * eps_hat)
        else:
            tau = eta * ddpm_sigma(sched, t_from, t_to)
            spread = np.sqrt(max(s_to**2 - tau**2, 0.0))
            out.append(a_to * x_hat + spread * eps_hat + tau * rng.standard_normal(z.shape))
    return out[0], out[1]


def sample_latents(
    model,
    sched: NoiseSchedule,
    config: SampleConfig,
    latent_shape: tuple[int, ...],
    n: int = 1,
):
    """Run the step schedule from fresh noise; returns final (z_img, z_dem).

    ``latent_shape`` is per-sample [C, H, W]; outputs are [n, C, H, W].
    """
    config.validate()
    rng_img = substream(config.seed, "sample/img")
    rng_dem = substream(config.seed, "sample/dem")
    z_img = rng_img.standard_normal((n, *latent_shape))
    z_dem = rng_dem.standard_normal((n, *latent_shape))
    rng_eta = substream(config.seed, "sample/eta") if config.eta > 0 else None

    cond = np.repeat(model.embed_caption(config.prompt)[None, :], n, axis=0)
    uncond = np.repeat(model.embed_caption("")[None, :], n, axis=0)

    ts = timestep_grid(sched.T, config.steps)
    for t_from, t_to in zip(ts[:-1], ts[1:]):
        z_img, z_dem = ddim_step(
            model,
            z_img,
            z_dem,
            int(t_from),
            int(t_to),
            cond,
            uncond,
            config.guidance_scale,
            config.eta,
            sched,
            rng_eta,
        )
    return z_img, z_dem


def generate(
    model,
    codec,
    sched: NoiseSchedule,
    config: SampleConfig,
    latent_hw: tuple[int, int],
    elev_bounds: tuple[float, float] | None = None,
):
    """Sample one 2.5D terrain and decode it.

    Returns (rgb [3, H, W] in [-1, 1], dem [1, H, W]); the DEM comes
    back in metres when ``elev_bounds`` (the dataset's normalization
    bounds) is given, else in normalized [-1, 1] units.
    """
    latent_shape = (codec.latent_channels, *latent_hw)
    z_img, z_dem = sample_latents(model, sched, config, latent_shape, n=1)
    rgb = codec.decode_rgb(z_img[0])
    dem = codec.decode_dem(z_dem[0])
    if elev_bounds is not None:
        dem = denormalize_elevation(dem, *elev_bounds)
    return rgb, dem
