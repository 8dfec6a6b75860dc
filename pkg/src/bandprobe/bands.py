"""Sentinel-2 band identifiers and the named band groups used for joint permutation."""

from __future__ import annotations

from dataclasses import dataclass

# Channel order of the 12-band input. Sentinel-2 codes alongside for reference:
# B1 B2 B3 B4 B5 B6 B7 B8A B8 B9 B11 B12.
CANONICAL_BANDS = (
    "CoastalAerosol",
    "Blue",
    "Green",
    "Red",
    "RE1",
    "RE2",
    "RE3",
    "RE4",
    "NIR",
    "WaterVapour",
    "SWIR1",
    "SWIR2",
)

BAND_INDEX = {name: i for i, name in enumerate(CANONICAL_BANDS)}


class UnknownBandError(KeyError):
    def __str__(self):
        return f"unknown band {self.args[0]!r}; valid names: {', '.join(CANONICAL_BANDS)}"


def band_index(name):
    try:
        return BAND_INDEX[name]
    except KeyError:
        raise UnknownBandError(name) from None


@dataclass(frozen=True)
class BandSet:
    label: str
    members: tuple[str, ...]

    def __post_init__(self):
        if not self.members:
            raise ValueError(f"band set {self.label!r} is empty")
        for m in self.members:
            band_index(m)
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"band set {self.label!r} repeats a band")
        # keep members in channel order so reports are stable
        object.__setattr__(self, "members", tuple(sorted(self.members, key=BAND_INDEX.get)))

    @property
    def indices(self):
        return tuple(BAND_INDEX[m] for m in self.members)

    @classmethod
    def single(cls, name):
        return cls(name, (name,))


INDEX_GROUPS = (
    BandSet("NDWI", ("NIR", "Green")),
    BandSet("AWEIsh", ("Blue", "Green", "NIR", "SWIR1", "SWIR2")),
    BandSet("WI2015", ("Green", "Red", "NIR", "SWIR1", "SWIR2")),
    BandSet("WI2", ("Blue", "SWIR2")),
    BandSet("SWI", ("RE1", "SWIR2")),
)

VISIBLE_LIGHT = BandSet("VisibleLight", ("Blue", "Green", "Red"))
NOT_IMPORTANT = BandSet(
    "NotImportant",
    ("CoastalAerosol", "Green", "Red", "RE1", "RE2", "RE3", "RE4", "SWIR2"),
)

DEFAULT_GROUPS = INDEX_GROUPS + (VISIBLE_LIGHT, NOT_IMPORTANT)
SINGLE_BANDS = tuple(BandSet.single(b) for b in CANONICAL_BANDS)
ALL_BANDS = BandSet("AllBands", CANONICAL_BANDS)


def group_by_label(label):
    for g in DEFAULT_GROUPS + (ALL_BANDS,):
        if g.label == label:
            return g
    raise KeyError(
        f"unknown band group {label!r}; valid: {', '.join(g.label for g in DEFAULT_GROUPS)}"
    )


def parse_band_sets(spec):
    """Parse a CLI-style list: ``all``, a comma list of bands, or ``Label=BandA+BandB``."""
    if spec is None or spec == "":
        return []
    if spec == "all":
        return list(SINGLE_BANDS)
    out = []
    for item in spec.split(","):
        item = item.strip()
        if "=" in item:
            label, members = item.split("=", 1)
            out.append(BandSet(label.strip(), tuple(m.strip() for m in members.split("+"))))
        else:
            out.append(BandSet.single(CANONICAL_BANDS[band_index(item)]))
    return out
