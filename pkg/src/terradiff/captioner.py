"""Coordinate-based caption descriptors and prompt templating.

Prompts follow the fixed template

    "A Sentinel-2 image of {Biome} and {Geological} in {Country} in {Month}"

with dropped descriptors eliding their connector: the first present
terrain descriptor takes "of", a second one chains with "and", country
and month each take "in".  A prompt with no descriptors is the empty
string (the unconditional token).

Geographic lookup maps a lon/lat point through layered polygon atlases
(country, ecoregion with its biome type, local and regional landform)
using the even-odd ray-casting rule.  Atlas files are a line-based
plain-text format parsed strictly with line/column error reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AtlasFormatError, ParameterError

MONTHS = (
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
)

DESCRIPTOR_KEYS = ("biome", "geological", "country", "month")


@dataclass(frozen=True)
class CaptionDescriptors:
    """Structured descriptors for one grid cell, before templating.

    ``ecoregion`` carries the specific biome-region name, ``biome_type``
    the coarser class it anonymizes to.  Landform comes in a local and a
    regional flavour; prompt construction picks one.  Missing lookups
    are None.
    """

    ecoregion: str | None = None
    biome_type: str | None = None
    geological_local: str | None = None
    geological_regional: str | None = None
    country: str | None = None
    month: str | None = None

    def biome_text(self, anonymize: bool = False) -> str | None:
        if anonymize:
            return self.biome_type or self.ecoregion
        return self.ecoregion or self.biome_type

    def geological_text(self, regional: bool = False) -> str | None:
        if regional:
            return self.geological_regional or self.geological_local
        return self.geological_local or self.geological_regional


def render_prompt(
    d: CaptionDescriptors,
    present=DESCRIPTOR_KEYS,
    *,
    geological: str = "local",
    biome_form: str = "ecoregion",
) -> str:
    """Render the caption template over the ``present`` descriptor subset.

    ``geological`` selects "local" or "regional" landform text;
    ``biome_form`` selects "ecoregion" or the anonymized "type" name.
    Descriptors that are requested but missing from ``d`` are skipped.
    Returns "" when nothing renders.
    """
    present = set(present)
    unknown = present - set(DESCRIPTOR_KEYS)
    if unknown:
        raise ParameterError(f"unknown descriptor keys: {sorted(unknown)}")

    terrain = []
    if "biome" in present:
        text = d.biome_text(anonymize=biome_form == "type")
        if text:
            terrain.append(text)
    if "geological" in present:
        text = d.geological_text(regional=geological == "regional")
        if text:
            terrain.append(text)

    parts = []
    if terrain:
        parts.append("of " + " and ".join(terrain))
    if "country" in present and d.country:
        parts.append(f"in {d.country}")
    if "month" in present and d.month:
        if d.month not in MONTHS:
            raise ParameterError(f"invalid month {d.month!r}")
        parts.append(f"in {d.month}")
    if not parts:
        return ""
    return "A Sentinel-2 image " + " ".join(parts)


def parse_prompt(text: str, geological_vocab=()) -> dict[str, str]:
    """Invert ``render_prompt``; returns the present descriptors.

    A lone terrain descriptor ("... image of mountains") is ambiguous
    between biome and geological; it is classified as geological when it
    appears in ``geological_vocab``, else as biome.
    """
    out: dict[str, str] = {}
    if text == "":
        return out
    prefix = "A Sentinel-2 image"
    if not text.startswith(prefix):
        raise ParameterError(f"prompt does not match template: {text!r}")
    rest = text[len(prefix) :]

    terrain = None
    if rest.startswith(" of "):
        rest = rest[4:]
        cut = rest.find(" in ")
        if cut == -1:
            terrain, rest = rest, ""
        else:
            terrain, rest = rest[:cut], rest[cut:]
    if terrain is not None:
        parts = terrain.rsplit(" and ", 1)
        if len(parts) == 2:
            out["biome"], out["geological"] = parts
        elif parts[0] in geological_vocab:
            out["geological"] = parts[0]
        else:
            out["biome"] = parts[0]

    while rest:
        if not rest.startswith(" in "):
            raise ParameterError(f"prompt does not match template near {rest!r}")
        rest = rest[4:]
        cut = rest.find(" in ")
        if cut == -1:
            seg, rest = rest, ""
        else:
            seg, rest = rest[:cut], rest[cut:]
        if seg in MONTHS:
            out["month"] = seg
        elif "country" in out:
            raise ParameterError(f"two country segments in prompt: {seg!r}")
        else:
            out["country"] = seg
    return out


# ---- region atlas ---------------------------------------------------------

LAYER_NAMES = ("country", "ecoregion", "landform_local", "landform_regional")


@dataclass(frozen=True)
class AtlasRecord:
    labels: tuple[str, ...]
    vertices: np.ndarray  # [N, 2] lon/lat


@dataclass(frozen=True)
class RegionAtlas:
    """Named polygon layers in plate-carree lon/lat degrees."""

    layers: dict[str, list[AtlasRecord]]


def point_in_polygon(lon: float, lat: float, vertices: np.ndarray) -> bool:
    """Even-odd ray-casting containment test (boundary behaviour unspecified)."""
    inside = False
    n = len(vertices)
    j = n - 1
    for i in range(n):
        xi, yi = vertices[i]
        xj, yj = vertices[j]
        if (yi > lat) != (yj > lat):
            x_cross = (xj - xi) * (lat - yi) / (yj - yi) + xi
            if lon < x_cross:
                inside = not inside
        j = i
    return inside


def _segments_intersect(p1, p2, p3, p4) -> bool:
    # proper or improper intersection of non-adjacent closed segments
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(
            a[1], b[1]
        )

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, p3):
        return True
    if o2 == 0 and on_seg(p1, p2, p4):
        return True
    if o3 == 0 and on_seg(p3, p4, p1):
        return True
    if o4 == 0 and on_seg(p3, p4, p2):
        return True
    return False


def _check_simple(vertices: np.ndarray) -> bool:
    n = len(vertices)
    for i in range(n):
        a1, a2 = vertices[i], vertices[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex
            b1, b2 = vertices[j], vertices[(j + 1) % n]
            if _segments_intersect(a1, a2, b1, b2):
                return False
    return True


def parse_atlas(text: str) -> RegionAtlas:
    """Parse the plain-text atlas grammar.

    One record per line, fields separated by ';':

        country; <label>; <lon,lat> <lon,lat> ...
        ecoregion; <ecoregion name>; <biome type>; <lon,lat> ...
        landform_local; <label>; <lon,lat> ...
        landform_regional; <label>; <lon,lat> ...

    '#' starts a comment; blank lines are skipped.  Errors raise
    AtlasFormatError with 1-based line and column.
    """
    layers: dict[str, list[AtlasRecord]] = {name: [] for name in LAYER_NAMES}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(";")]
        layer = fields[0]
        if layer not in LAYER_NAMES:
            raise AtlasFormatError(lineno, raw.find(fields[0]) + 1, f"unknown layer {layer!r}")
        n_labels = 2 if layer == "ecoregion" else 1
        if len(fields) != 2 + n_labels:
            raise AtlasFormatError(
                lineno, 1, f"layer {layer!r} needs {1 + n_labels} ';'-separated fields before vertices"
            )
        labels = tuple(fields[1 : 1 + n_labels])
        if any(not lb for lb in labels):
            raise AtlasFormatError(lineno, 1, "empty label")
        vert_field = fields[1 + n_labels]
        pairs = vert_field.split()
        if len(pairs) < 3:
            raise AtlasFormatError(lineno, raw.rfind(";") + 2, "polygon needs at least 3 vertices")
        verts = []
        for pair in pairs:
            col = raw.find(pair) + 1
            bits = pair.split(",")
            if len(bits) != 2:
                raise AtlasFormatError(lineno, col, f"expected lon,lat pair, got {pair!r}")
            try:
                verts.append((float(bits[0]), float(bits[1])))
            except ValueError:
                raise AtlasFormatError(lineno, col, f"bad coordinate in {pair!r}") from None
        arr = np.asarray(verts, dtype=np.float64)
        if not _check_simple(arr):
            raise AtlasFormatError(lineno, 1, "self-intersecting polygon")
        layers[layer].append(AtlasRecord(labels=labels, vertices=arr))
    return RegionAtlas(layers=layers)


def load_atlas(path) -> RegionAtlas:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_atlas(fh.read())


def _first_hit(records: list[AtlasRecord], lon: float, lat: float) -> AtlasRecord | None:
    # ties between overlapping polygons break toward the lowest index
    for rec in records:
        if point_in_polygon(lon, lat, rec.vertices):
            return rec
    return None


def lookup(atlas: RegionAtlas, lon: float, lat: float, month: str) -> CaptionDescriptors:
    """Descriptors for a point; layers without a hit stay None."""
    if not (-180.0 <= lon < 180.0):
        raise ParameterError(f"lon {lon} outside [-180, 180)")
    if not (-90.0 <= lat <= 90.0):
        raise ParameterError(f"lat {lat} outside [-90, 90]")
    if month not in MONTHS:
        raise ParameterError(f"invalid month {month!r}")

    country = _first_hit(atlas.layers["country"], lon, lat)
    eco = _first_hit(atlas.layers["ecoregion"], lon, lat)
    local = _first_hit(atlas.layers["landform_local"], lon, lat)
    regional = _first_hit(atlas.layers["landform_regional"], lon, lat)
    return CaptionDescriptors(
        ecoregion=eco.labels[0] if eco else None,
        biome_type=eco.labels[1] if eco else None,
        geological_local=local.labels[0] if local else None,
        geological_regional=regional.labels[0] if regional else None,
        country=country.labels[0] if country else None,
        month=month,
    )
