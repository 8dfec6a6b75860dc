"""Sample files, manifests with exclusion lists, and the synthetic oracle dataset."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bands import BAND_INDEX, CANONICAL_BANDS, band_index

log = logging.getLogger(__name__)

BPR_MAGIC = b"BPR1"
SPLITS = ("train", "val", "test")
REFLECTANCE_SCALE = 10000.0
_STRIP_SUFFIXES = (".tif", ".tiff", ".bpr")


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ManifestError(ValueError):
    pass


@dataclass
class RasterSample:
    id: str
    bands: np.ndarray
    mask: np.ndarray
    band_order: tuple = CANONICAL_BANDS

    def __post_init__(self):
        self.bands = np.ascontiguousarray(self.bands, dtype=np.float32)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        self.band_order = tuple(self.band_order)
        validate_band_order(self.band_order)
        if self.bands.ndim != 3 or self.bands.shape[0] != len(self.band_order):
            raise ValueError(
                f"sample {self.id!r}: bands shape {self.bands.shape} does not match "
                f"{len(self.band_order)} listed bands"
            )
        if self.mask.shape != self.bands.shape[1:]:
            raise ValueError(
                f"sample {self.id!r}: mask shape {self.mask.shape} != spatial shape "
                f"{self.bands.shape[1:]}"
            )
        if self.mask.size and self.mask.max() > 1:
            raise ValueError(f"sample {self.id!r}: mask must be binary")

    @property
    def shape(self):
        return self.bands.shape[1:]

    def channel(self, band_name):
        band_index(band_name)
        return self.band_order.index(band_name)

    def canonical_bands(self):
        """Band array in canonical channel order."""
        if self.band_order == CANONICAL_BANDS:
            return self.bands
        return self.bands[[self.band_order.index(b) for b in CANONICAL_BANDS]]

    def replace_bands(self, bands):
        return RasterSample(self.id, bands, self.mask, self.band_order)


def validate_band_order(order):
    if sorted(order) != sorted(CANONICAL_BANDS):
        missing = [b for b in CANONICAL_BANDS if b not in order]
        extra = [b for b in order if b not in BAND_INDEX]
        dupes = sorted({b for b in order if order.count(b) > 1})
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"unknown {extra}")
        if dupes:
            parts.append(f"duplicated {dupes}")
        raise ValueError("band_order must list all 12 canonical bands once: " + "; ".join(parts))


# -- .bpr container --------------------------------------------------------
#
# "BPR1" | u16 band count | u32 H | u32 W | per band: u8 length + ascii name |
# u16 length + utf-8 sample id | H*W mask bytes | bands as <f4, band-major.


def dumps_sample(sample):
    h, w = sample.shape
    parts = [BPR_MAGIC, struct.pack("<HII", len(sample.band_order), h, w)]
    for name in sample.band_order:
        raw = name.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
    sid = sample.id.encode()
    parts.append(struct.pack("<H", len(sid)) + sid)
    parts.append(sample.mask.tobytes())
    parts.append(sample.bands.astype("<f4").tobytes())
    return b"".join(parts)


def write_sample(sample, path):
    Path(path).write_bytes(dumps_sample(sample))


def loads_sample(blob):
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(
                f"truncated {what}: need {n} bytes, {len(view) - pos} remain", pos
            )
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != BPR_MAGIC:
        raise FormatError("bad magic, not a .bpr sample", 0)
    nbands, h, w = struct.unpack("<HII", take(10, "header"))
    order = []
    for _ in range(nbands):
        (n,) = struct.unpack("<B", take(1, "band name length"))
        order.append(bytes(take(n, "band name")).decode("ascii"))
    try:
        validate_band_order(order)
    except ValueError as exc:
        raise FormatError(str(exc), 16) from None
    (n,) = struct.unpack("<H", take(2, "id length"))
    sid = bytes(take(n, "id")).decode()
    mask = np.frombuffer(take(h * w, "mask"), dtype=np.uint8).reshape(h, w).copy()
    # copied so the array is aligned and writable
    bands = np.frombuffer(take(4 * nbands * h * w, "band payload"), dtype="<f4").astype(np.float32)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} unexpected trailing bytes", pos)
    try:
        return RasterSample(sid, bands.reshape(nbands, h, w), mask, tuple(order))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def read_sample(path):
    try:
        return loads_sample(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# -- manifests -------------------------------------------------------------


def _stem(name):
    name = os.path.basename(name)
    for suffix in _STRIP_SUFFIXES:
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return name


def default_exclusions():
    """The three mislabelled SWED test images, as packaged filenames."""
    text = resources.files("bandprobe").joinpath("data/swed_exclusions.txt").read_text()
    return read_exclusions_text(text)


def read_exclusions_text(text):
    return [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]


@dataclass
class ManifestEntry:
    id: str
    path: Path
    split: str


@dataclass
class Manifest:
    entries: list
    exclusions: list = field(default_factory=list)
    source: Path | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate sample id {e.id!r}")
            seen.add(e.id)
            if e.split not in SPLITS:
                raise ManifestError(f"sample {e.id!r}: unknown split tag {e.split!r}; use {SPLITS}")
        excluded = {_stem(x) for x in self.exclusions}
        self._excluded_ids = {e.id for e in self.entries if _stem(e.id) in excluded}
        matched = {_stem(e.id) for e in self.entries} & excluded
        for x in self.exclusions:
            if _stem(x) not in matched:
                log.warning("exclusion %r matches no manifest entry", x)

    @property
    def excluded_ids(self):
        return set(self._excluded_ids)

    def split(self, tag):
        if tag not in SPLITS:
            raise ManifestError(f"unknown split tag {tag!r}; use {SPLITS}")
        return [e for e in self.entries if e.split == tag and e.id not in self._excluded_ids]

    def load_split(self, tag):
        return [read_sample(e.path) for e in self.split(tag)]

    def to_json(self, relative_to=None):
        def rel(p):
            return os.path.relpath(p, relative_to) if relative_to else str(p)

        return {
            "version": 1,
            "entries": [{"id": e.id, "path": rel(e.path), "split": e.split} for e in self.entries],
            "exclusions": list(self.exclusions),
        }


def load_manifest(path):
    """Parse a manifest JSON file.

    ``exclusions`` may be a list of ids/filenames or the string ``"default"``
    (the packaged SWED list); ``exclusions_file`` names a plain-text list.
    Entry paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    base = path.parent
    entries = []
    for i, raw in enumerate(doc.get("entries", [])):
        try:
            sid, rel, split = raw["id"], raw["path"], raw["split"]
        except KeyError as exc:
            raise ManifestError(f"{path}: entry {i} lacks field {exc.args[0]!r}") from None
        full = (base / rel).resolve()
        if not full.is_file():
            raise ManifestError(f"{path}: entry {sid!r} points to missing file {rel}")
        entries.append(ManifestEntry(sid, full, split))
    exclusions = doc.get("exclusions", [])
    if exclusions == "default":
        exclusions = default_exclusions()
    exclusions = list(exclusions)
    if "exclusions_file" in doc:
        exclusions += read_exclusions_text((base / doc["exclusions_file"]).read_text())
    return Manifest(entries, exclusions, source=path)


def write_manifest(manifest, path):
    path = Path(path)
    path.write_text(json.dumps(manifest.to_json(relative_to=path.parent), indent=2) + "\n")


# -- synthetic oracle -----------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a dataset where exactly one band determines the mask.

    ``threshold`` is on the scaled [0, 1] reflectance axis; the generative
    band is centred there so the mask splits roughly in half.
    """

    num_samples: int = 64
    height: int = 64
    width: int = 64
    generative_band: str = "NIR"
    threshold: float = 0.5
    noise_scale: float = 0.15
    signal_scale: float = 0.15
    smoothness: float = 4.0
    seed: int = 0

    def __post_init__(self):
        band_index(self.generative_band)
        if self.height % 16 or self.width % 16 or self.height <= 0 or self.width <= 0:
            raise ValueError("synthetic H and W must be positive multiples of 16")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie inside the (0, 1) value range")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")


def _synth_one(spec, index):
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(index,)))
    shape = (spec.height, spec.width)
    gen = band_index(spec.generative_band)
    bands = np.empty((len(CANONICAL_BANDS),) + shape, dtype=np.float32)
    while True:
        field_ = ndimage.gaussian_filter(rng.standard_normal(shape), spec.smoothness, mode="wrap")
        field_ = (field_ - field_.mean()) / (field_.std() or 1.0)
        signal = np.clip(0.5 + spec.signal_scale * field_, 0.0, 1.0)
        raw = np.round(signal * REFLECTANCE_SCALE)
        mask = raw > spec.threshold * REFLECTANCE_SCALE
        if 0 < mask.sum() < mask.size:
            break
    for b in range(len(CANONICAL_BANDS)):
        if b == gen:
            bands[b] = raw
            continue
        level = rng.uniform(0.1, 0.6)
        noise = np.clip(level + spec.noise_scale * rng.standard_normal(shape), 0.0, 1.0)
        bands[b] = np.round(noise * REFLECTANCE_SCALE)
    return RasterSample(f"synth_s{spec.seed}_{index:05d}", bands, mask.astype(np.uint8))


def generate_synthetic(spec, start=0):
    """Samples ``start .. start+num_samples-1``; each depends only on (seed, index)."""
    return [_synth_one(spec, i) for i in range(start, start + spec.num_samples)]


def write_dataset(samples, splits, out_dir, exclusions=()):
    """Write samples as .bpr files plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    sample_dir = out_dir / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample, split in zip(samples, splits, strict=True):
        p = sample_dir / f"{sample.id}.bpr"
        write_sample(sample, p)
        entries.append(ManifestEntry(sample.id, p, split))
    manifest = Manifest(entries, list(exclusions))
    path = out_dir / "manifest.json"
    write_manifest(manifest, path)
    return path


def assign_splits(n, val_fraction=0.1, test_fraction=0.2):
    """Deterministic split tags: the first samples train, then val, then test."""
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    n_train = n - n_test - n_val
    if n_train < 0:
        raise ValueError("val and test fractions exceed the dataset")
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def stack(samples):
    """(N, 12, H, W) raw bands in canonical order and (N, H, W) masks."""
    if not samples:
        raise ValueError("no samples to stack")
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples differ in spatial shape: {sorted(shapes)}")
    bands = np.stack([s.canonical_bands() for s in samples])
    masks = np.stack([s.mask for s in samples])
    return bands, masks
