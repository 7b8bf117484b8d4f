"""Procedural labeled terrain corpus: heightmap + RGB + cloud mask + captions.

Heightmaps are fractional-Brownian-motion value noise with per-landform
amplitude and octave counts (mountains additionally ridged); the field
is min-max normalized so a sample's realized elevation range equals its
class amplitude.  RGB renders a biome palette ramped over within-sample
elevation, modulated by Lambertian hillshade and a seasonal term (winter
brightens tundra and lowers the snowline).  Cloud masks threshold
low-frequency noise at the coverage quantile, so empirical coverage
tracks the target closely.

The class statistics are deliberately far apart (range ratios of 5-6x
between landforms, a clear green-channel gap between forest and desert):
conditional-generation checks are only meaningful when a trivial
classifier can already separate the ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .captioner import MONTHS, CaptionDescriptors
from .errors import ParameterError
from .geoprep import union_masks
from .gridio import (
    parse_manifest,
    read_arrays,
    save_gray16_png,
    save_rgb_png,
    write_arrays,
)
from .seeds import substream

LANDFORMS = ("plains", "hills", "mountains")

LANDFORM_PARAMS = {
    # amplitude (m), octaves, ridged, base elevation (m)
    "plains": (50.0, 2, False, 80.0),
    "hills": (300.0, 4, False, 200.0),
    "mountains": (1500.0, 6, True, 500.0),
}

REGIONAL_NAMES = {
    "plains": "the lowland basin",
    "hills": "the rolling uplands",
    "mountains": "the granite range",
}

BIOMES = ("forest", "desert", "tundra", "steppe")

ECOREGIONS = {
    "forest": ("broadleaf forest", "conifer forest"),
    "desert": ("sand desert", "rock desert"),
    "tundra": ("alpine tundra", "arctic tundra"),
    "steppe": ("grass steppe", "shrub steppe"),
}

# (low-elevation rgb, high-elevation rgb), channels in [0, 1]; hues kept far
# apart so mean color is a near-perfect biome discriminant
PALETTES = {
    "forest": ((0.04, 0.36, 0.08), (0.12, 0.58, 0.16)),
    "desert": ((0.55, 0.26, 0.10), (0.72, 0.38, 0.18)),
    "tundra": ((0.36, 0.38, 0.44), (0.82, 0.85, 0.92)),
    "steppe": ((0.40, 0.44, 0.16), (0.55, 0.56, 0.26)),
}

COUNTRIES = ("Arvenia", "Boralia", "Cendria", "Dorvala")

SUN_AZIMUTH_DEG = 315.0
SUN_ALTITUDE_DEG = 45.0


@dataclass
class TerrainSample:
    rgb: np.ndarray  # [3, H, W] in [-1, 1]
    dem: np.ndarray  # [1, H, W] metres
    valid: np.ndarray  # [H, W] {0,1}
    descriptors: CaptionDescriptors
    seed: int


@dataclass
class Corpus:
    samples: list[TerrainSample]
    elev_lo: float
    elev_hi: float
    size: int
    seed: int


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """One octave of smooth value noise on a (cells+1)^2 lattice."""
    lattice = rng.standard_normal((cells + 1, cells + 1))
    coords = np.linspace(0.0, cells, size, endpoint=False)
    i0 = np.floor(coords).astype(int)
    f = coords - i0
    w = f * f * (3.0 - 2.0 * f)  # smoothstep
    li = lattice[np.ix_(i0, i0)]
    ri = lattice[np.ix_(i0, i0 + 1)]
    lo = lattice[np.ix_(i0 + 1, i0)]
    ro = lattice[np.ix_(i0 + 1, i0 + 1)]
    wy = w[:, None]
    wx = w[None, :]
    top = li * (1.0 - wx) + ri * wx
    bot = lo * (1.0 - wx) + ro * wx
    return top * (1.0 - wy) + bot * wy


def fbm(rng: np.random.Generator, size: int, octaves: int, ridged: bool = False,
        base_cells: int = 2, persistence: float = 0.55) -> np.ndarray:
    acc = np.zeros((size, size))
    for o in range(octaves):
        layer = _value_noise(rng, size, base_cells * 2**o)
        if ridged:
            layer = -np.abs(layer)
        acc += persistence**o * layer
    return acc


def gen_heightmap(landform: str, seed: int, size: int, amplitude: float | None = None) -> np.ndarray:
    """Deterministic [1, size, size] heightmap in metres for a landform class."""
    if landform not in LANDFORM_PARAMS:
        raise ParameterError(f"unknown landform {landform!r}")
    amp, octaves, ridged, base = LANDFORM_PARAMS[landform]
    if amplitude is not None:
        amp = float(amplitude)
    rng = substream(seed, "corpus/heightmap")
    field = fbm(rng, size, octaves, ridged=ridged)
    span = field.max() - field.min()
    if span > 0 and amp > 0:
        unit = (field - field.min()) / span
    else:
        unit = np.zeros_like(field)
    return (base + amp * unit)[None]


def hillshade(dem: np.ndarray, cell_size_m: float = 30.0,
              azimuth_deg: float = SUN_AZIMUTH_DEG, altitude_deg: float = SUN_ALTITUDE_DEG) -> np.ndarray:
    """Lambertian shade in [0, 1] from finite-difference surface normals."""
    z = np.asarray(dem, dtype=np.float64)
    if z.ndim == 3:
        z = z[0]
    gy, gx = np.gradient(z, cell_size_m)
    az = np.deg2rad(azimuth_deg)
    alt = np.deg2rad(altitude_deg)
    # light direction; azimuth measured clockwise from north (+x east, +y south)
    lx = np.sin(az) * np.cos(alt)
    ly = -np.cos(az) * np.cos(alt)
    lz = np.sin(alt)
    norm = np.sqrt(gx**2 + gy**2 + 1.0)
    shade = (-gx * lx - gy * ly + lz) / norm
    return np.clip(shade, 0.0, 1.0)


def winterness(month: str) -> float:
    """1 at midwinter (January), -1 at midsummer (July)."""
    m = MONTHS.index(month)
    return float(np.cos(2.0 * np.pi * m / 12.0))


def gen_rgb(dem: np.ndarray, biome: str, month: str, seed: int,
            cell_size_m: float = 30.0, texture_noise: float = 0.0) -> np.ndarray:
    """Deterministic [3, H, W] optical render in [-1, 1]."""
    if biome not in PALETTES:
        raise ParameterError(f"unknown biome {biome!r}")
    if month not in MONTHS:
        raise ParameterError(f"invalid month {month!r}")
    z = np.asarray(dem, dtype=np.float64)
    if z.ndim == 3:
        z = z[0]
    if not np.isfinite(z).all():
        raise ParameterError("dem must be finite")
    span = z.max() - z.min()
    h_unit = (z - z.min()) / span if span > 0 else np.full_like(z, 0.5)

    lo, hi = (np.array(p, dtype=np.float64) for p in PALETTES[biome])
    color = lo[:, None, None] + (hi - lo)[:, None, None] * h_unit[None]

    shade = hillshade(z, cell_size_m)
    color = color * (0.55 + 0.45 * shade)[None]

    w = max(winterness(month), 0.0)
    if biome == "tundra":
        color = color + 0.15 * w
    # winter lowers the snowline; only the upper reaches of mountains hit it
    snowline = 1500.0 - 350.0 * w
    snow = np.clip((z - snowline) / 250.0, 0.0, 1.0) * (0.25 + 0.5 * w)
    color = color * (1.0 - snow[None]) + 0.92 * snow[None]

    if texture_noise > 0.0:
        rng = substream(seed, "corpus/rgb-texture")
        color = color + rng.normal(0.0, texture_noise, color.shape)
    return np.clip(color * 2.0 - 1.0, -1.0, 1.0)


def gen_cloudmask(coverage: float, seed: int, size: int) -> np.ndarray:
    """[H, W] {0,1} cloud mask (1 = cloud) with near-exact coverage."""
    if not (0.0 <= coverage <= 1.0):
        raise ParameterError(f"coverage must lie in [0, 1], got {coverage}")
    if coverage == 0.0:
        return np.zeros((size, size), dtype=np.uint8)
    if coverage == 1.0:
        return np.ones((size, size), dtype=np.uint8)
    rng = substream(seed, "corpus/cloud")
    field = fbm(rng, size, octaves=2, base_cells=2)
    threshold = np.quantile(field, 1.0 - coverage)
    return (field >= threshold).astype(np.uint8)


def make_sample(root_seed: int, index: int, size: int, cloud_max: float = 0.4) -> TerrainSample:
    """One labeled sample; all draws flow from (root_seed, index)."""
    rng = substream(root_seed, f"corpus/labels/{index}")
    seed = int(rng.integers(0, 2**62))
    biome = BIOMES[rng.integers(0, len(BIOMES))]
    ecoregion = ECOREGIONS[biome][rng.integers(0, len(ECOREGIONS[biome]))]
    landform = LANDFORMS[rng.integers(0, len(LANDFORMS))]
    country = COUNTRIES[rng.integers(0, len(COUNTRIES))]
    month = MONTHS[rng.integers(0, 12)]
    coverage = float(rng.uniform(0.0, cloud_max))

    dem = gen_heightmap(landform, seed, size)
    rgb = gen_rgb(dem, biome, month, seed, texture_noise=0.02)
    cloud = gen_cloudmask(coverage, seed, size)
    nodata = np.zeros((size, size), dtype=np.uint8)
    if rng.random() < 0.15:
        width = int(rng.integers(1, max(2, size // 8)))
        side = int(rng.integers(0, 4))
        if side == 0:
            nodata[:width, :] = 1
        elif side == 1:
            nodata[-width:, :] = 1
        elif side == 2:
            nodata[:, :width] = 1
        else:
            nodata[:, -width:] = 1
    valid = union_masks(nodata, cloud)

    descriptors = CaptionDescriptors(
        ecoregion=ecoregion,
        biome_type=biome,
        geological_local=landform,
        geological_regional=REGIONAL_NAMES[landform],
        country=country,
        month=month,
    )
    return TerrainSample(rgb=rgb, dem=dem, valid=valid, descriptors=descriptors, seed=seed)


def gen_corpus(n: int, size: int, seed: int, cloud_max: float = 0.4) -> Corpus:
    if n < 1:
        raise ParameterError("corpus needs n >= 1")
    samples = [make_sample(seed, i, size, cloud_max) for i in range(n)]
    lo = min(float(s.dem.min()) for s in samples)
    hi = max(float(s.dem.max()) for s in samples)
    # widen to round decametres so the manifest bounds stay stable-looking
    lo = float(np.floor(lo / 10.0) * 10.0)
    hi = float(np.ceil(hi / 10.0) * 10.0)
    return Corpus(samples=samples, elev_lo=lo, elev_hi=hi, size=size, seed=seed)


# ---- corpus statistics ------------------------------------------------------


def elevation_range(dem: np.ndarray) -> float:
    return float(dem.max() - dem.min())


def mean_green(rgb: np.ndarray) -> float:
    return float(rgb[1].mean())


def class_stats(samples: list[TerrainSample]):
    """Per-landform mean elevation range and per-biome mean green channel."""
    ranges: dict[str, list[float]] = {lf: [] for lf in LANDFORMS}
    greens: dict[str, list[float]] = {b: [] for b in BIOMES}
    for s in samples:
        ranges[s.descriptors.geological_local].append(elevation_range(s.dem))
        greens[s.descriptors.biome_type].append(mean_green(s.rgb))
    range_means = {k: float(np.mean(v)) for k, v in ranges.items() if v}
    green_means = {k: float(np.mean(v)) for k, v in greens.items() if v}
    return range_means, green_means


def label_separability(samples: list[TerrainSample]) -> float:
    """Accuracy of a nearest-class-centroid classifier on ground truth.

    Landform from log elevation range, biome from mean RGB.  Both label
    families must be near-perfectly recoverable for conditional
    generation checks downstream to mean anything.
    """
    ranges: dict[str, list[float]] = {lf: [] for lf in LANDFORMS}
    colors: dict[str, list[np.ndarray]] = {b: [] for b in BIOMES}
    for s in samples:
        ranges[s.descriptors.geological_local].append(np.log(max(elevation_range(s.dem), 1e-9)))
        colors[s.descriptors.biome_type].append(s.rgb.mean(axis=(1, 2)))
    range_cent = {k: float(np.mean(v)) for k, v in ranges.items() if v}
    color_cent = {k: np.mean(v, axis=0) for k, v in colors.items() if v}
    correct = 0
    total = 0
    for s in samples:
        r = np.log(max(elevation_range(s.dem), 1e-9))
        c = s.rgb.mean(axis=(1, 2))
        pred_lf = min(range_cent, key=lambda k: abs(r - range_cent[k]))
        pred_bio = min(color_cent, key=lambda k: float(np.sum((c - color_cent[k]) ** 2)))
        correct += pred_lf == s.descriptors.geological_local
        correct += pred_bio == s.descriptors.biome_type
        total += 2
    return correct / total


# ---- persistence -------------------------------------------------------------

_CSV_FIELDS = (
    "id",
    "seed",
    "biome_type",
    "ecoregion",
    "landform",
    "landform_regional",
    "country",
    "month",
    "min_elev",
    "max_elev",
    "cloud_cover",
)


def save_corpus(corpus: Corpus, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    meta = {
        "n": str(len(corpus.samples)),
        "size": str(corpus.size),
        "seed": str(corpus.seed),
        "elev_lo": repr(corpus.elev_lo),
        "elev_hi": repr(corpus.elev_hi),
    }
    with open(out_dir / "meta.txt", "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")
    span = corpus.elev_hi - corpus.elev_lo
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for i, s in enumerate(corpus.samples):
            d = s.descriptors
            writer.writerow(
                {
                    "id": i,
                    "seed": s.seed,
                    "biome_type": d.biome_type,
                    "ecoregion": d.ecoregion,
                    "landform": d.geological_local,
                    "landform_regional": d.geological_regional,
                    "country": d.country,
                    "month": d.month,
                    "min_elev": f"{s.dem.min():.2f}",
                    "max_elev": f"{s.dem.max():.2f}",
                    "cloud_cover": f"{1.0 - s.valid.mean():.4f}",
                }
            )
            stem = out_dir / "samples" / f"{i:05d}"
            write_arrays(
                stem.with_suffix(".bin"),
                {"rgb": s.rgb, "dem": s.dem[0], "valid": s.valid.astype(np.float32)},
                {"id": str(i), "seed": str(s.seed), "units": "metres"},
            )
            save_rgb_png(stem.parent / f"{i:05d}_rgb.png", s.rgb)
            save_gray16_png(stem.parent / f"{i:05d}_dem.png", (s.dem[0] - corpus.elev_lo) / span)


def load_corpus(in_dir) -> Corpus:
    in_dir = Path(in_dir)
    meta_path = in_dir / "meta.txt"
    if not meta_path.exists():
        raise ParameterError(f"no corpus at {in_dir} (missing meta.txt)")
    with open(meta_path) as fh:
        meta = parse_manifest(fh.read())
    samples = []
    with open(in_dir / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            arrays, _ = read_arrays(in_dir / "samples" / f"{int(row['id']):05d}.bin")
            descriptors = CaptionDescriptors(
                ecoregion=row["ecoregion"],
                biome_type=row["biome_type"],
                geological_local=row["landform"],
                geological_regional=row["landform_regional"],
                country=row["country"],
                month=row["month"],
            )
            samples.append(
                TerrainSample(
                    rgb=arrays["rgb"].astype(np.float64),
                    dem=arrays["dem"].astype(np.float64)[None],
                    valid=arrays["valid"].astype(np.uint8),
                    descriptors=descriptors,
                    seed=int(row["seed"]),
                )
            )
    return Corpus(
        samples=samples,
        elev_lo=float(meta["elev_lo"]),
        elev_hi=float(meta["elev_hi"]),
        size=int(meta["size"]),
        seed=int(meta["seed"]),
    )
