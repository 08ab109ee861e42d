"""Procedural defect dataset, folder ingestion and class-balancing sampling.

Backgrounds are multi-octave value noise with a directional grain, one texture
family per product. Scratches are anti-aliased polylines, spots are soft blobs.
Every defect is alpha-composited, and the binary mask is exactly the support of
the alpha map, so pixels outside the mask are the untouched background.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .core import (
    ConfigError, DefectDomain, LabeledSample, ProductLabel, UnknownDomainError,
    domain_schema, parse_config_text, parse_domain, product_name,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ProductTexture:
    base: float = 0.45
    texture_amp: float = 0.12
    octaves: int = 3
    grain_angle: float = 0.0  # degrees
    grain_strength: float = 0.05
    grain_freq: float = 0.25  # cycles per pixel
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    defect_seed: Optional[int] = None  # defaults to the product index


DEFAULT_PRODUCTS = (
    ProductTexture(0.45, 0.12, 3, 0.0, 0.05, 0.25, (1.0, 0.9, 0.75)),
    ProductTexture(0.55, 0.08, 2, 60.0, 0.03, 0.15, (0.75, 0.9, 1.0)),
    ProductTexture(0.35, 0.14, 4, 120.0, 0.07, 0.35, (0.85, 1.0, 0.8)),
)


@dataclass(frozen=True)
class ProceduralSpec:
    image_size: int = 32
    n_products: int = 3
    counts: tuple[int, int, int] = (400, 60, 20)  # per product: Normal, Scratches, Spots
    scratch_lines: tuple[int, int] = (1, 3)
    scratch_length: tuple[float, float] = (5.0, 10.0)
    scratch_width: tuple[float, float] = (0.5, 1.0)
    scratch_intensity: tuple[float, float] = (0.72, 1.0)
    scratch_coverage: tuple[float, float] = (0.003, 0.06)
    spot_blobs: tuple[int, int] = (2, 6)
    spot_radius: tuple[float, float] = (0.8, 1.8)
    spot_intensity: tuple[float, float] = (0.62, 0.92)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    products: tuple[ProductTexture, ...] = DEFAULT_PRODUCTS
    seed: int = 0

    @classmethod
    def for_size(cls, image_size: int, **kw) -> "ProceduralSpec":
        """Defaults with pixel geometry rescaled from the 32 px reference."""
        k = image_size / 32.0
        geo = dict(
            scratch_length=(max(3.0, 5.0 * k), max(4.0, 10.0 * k)),
            spot_radius=(max(0.6, 0.8 * k), max(1.0, 1.8 * k)),
        )
        geo.update(kw)
        return cls(image_size=image_size, **geo)

    def texture(self, product: int) -> ProductTexture:
        if product < len(self.products):
            t = self.products[product]
        else:
            rng = np.random.default_rng([self.seed, 99, product])
            t = ProductTexture(
                base=float(rng.uniform(0.3, 0.6)), octaves=int(rng.integers(2, 5)),
                grain_angle=float(rng.uniform(0, 180)), grain_strength=float(rng.uniform(0.02, 0.08)),
                grain_freq=float(rng.uniform(0.1, 0.4)), tint=tuple(rng.uniform(0.7, 1.0, 3).tolist()),
            )
        if t.defect_seed is None:
            t = replace(t, defect_seed=product)
        return t


def validate_spec(spec: ProceduralSpec) -> ProceduralSpec:
    def ordered(name, lo_min=None, hi_max=None):
        lo, hi = getattr(spec, name)
        if lo > hi:
            raise ConfigError(f"{name}: min {lo} > max {hi}")
        if lo_min is not None and lo < lo_min:
            raise ConfigError(f"{name}: min {lo} < {lo_min}")
        if hi_max is not None and hi > hi_max:
            raise ConfigError(f"{name}: max {hi} > {hi_max}")

    if spec.image_size < 8:
        raise ConfigError("image_size must be >= 8")
    if spec.n_products < 1:
        raise ConfigError("n_products must be >= 1")
    if len(spec.counts) != 3 or any(c < 0 for c in spec.counts):
        raise ConfigError("counts must be three nonnegative integers")
    ordered("scratch_lines", 1)
    ordered("scratch_length", 1.0, spec.image_size - 2)
    ordered("scratch_width", 0.45, spec.image_size / 4)
    ordered("scratch_intensity", 0.0, 1.0)
    ordered("scratch_coverage", 0.0, 1.0)
    ordered("spot_blobs", 1)
    ordered("spot_radius", 0.3, spec.image_size / 4)
    ordered("spot_intensity", 0.0, 1.0)
    fr = spec.split_fractions
    if len(fr) != 3 or any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
        raise ConfigError("split_fractions must be three nonnegative numbers summing to 1")
    return spec


def load_spec(path: str | Path) -> ProceduralSpec:
    """Read a flat ``key = value`` procedural spec; tuples are comma separated."""
    flat = parse_config_text(Path(path).read_text(encoding="utf-8"))
    size = int(flat.pop("image_size", 32))
    defaults = ProceduralSpec.for_size(size)
    kw = {}
    for key, raw in flat.items():
        if key == "products" or not hasattr(defaults, key):
            raise ConfigError(f"unknown spec key {key!r}")
        default = getattr(defaults, key)
        try:
            if isinstance(default, tuple):
                cast = type(default[0])
                kw[key] = tuple(cast(v) for v in raw.replace(",", " ").split())
            else:
                kw[key] = type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return validate_spec(replace(defaults, **kw))


# rendering ------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 * 2 ** o
        grid = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0, cells, size)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        out += amp * ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")
        total += amp
        amp *= 0.5
    return out / total


def render_background(tex: ProductTexture, size: int, rng: np.random.Generator) -> np.ndarray:
    """Grayscale background in [0, 1]."""
    noise = _value_noise(rng, size, tex.octaves)
    theta = math.radians(tex.grain_angle)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    across = -xx * math.sin(theta) + yy * math.cos(theta)
    phase = rng.uniform(0, 2 * math.pi)
    jitter = ndimage.gaussian_filter1d(rng.normal(size=size * 2), 2.0)
    wobble = np.interp(across, np.arange(-size, size), jitter)
    grain = np.sin(2 * math.pi * tex.grain_freq * across + phase + wobble)
    gray = tex.base + tex.texture_amp * (noise - 0.5) * 2 + tex.grain_strength * grain
    return np.clip(gray, 0.0, 1.0)


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _polyline(rng, size, length):
    n_seg = int(rng.integers(1, 4))
    for _ in range(100):
        pts = [rng.uniform(1.5, size - 2.5, 2)]
        heading = rng.uniform(0, 2 * math.pi)
        ok = True
        for _ in range(n_seg):
            heading += rng.normal(0, 0.5)
            nxt = pts[-1] + (length / n_seg) * np.array([math.cos(heading), math.sin(heading)])
            if not (1.0 <= nxt[0] <= size - 2 and 1.0 <= nxt[1] <= size - 2):
                ok = False
                break
            pts.append(nxt)
        if ok:
            return pts
    raise ConfigError("scratch length does not fit inside the image")


def render_scratches(spec: ProceduralSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Alpha map and per-pixel intensity for 1..3 anti-aliased polylines."""
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    lo, hi = spec.scratch_coverage
    for _ in range(200):
        alpha = np.zeros((size, size))
        value = np.zeros((size, size))
        for _ in range(int(rng.integers(spec.scratch_lines[0], spec.scratch_lines[1] + 1))):
            pts = _polyline(rng, size, rng.uniform(*spec.scratch_length))
            radius = rng.uniform(*spec.scratch_width) / 2 + 0.5  # >= 0.72 keeps the support 8-connected
            dist = np.min([_segment_distance(xx, yy, pts[i], pts[i + 1]) for i in range(len(pts) - 1)], 0)
            a = np.clip(radius - dist, 0.0, 1.0)
            intensity = rng.uniform(*spec.scratch_intensity)
            value = np.where(a > alpha, intensity, value)
            alpha = np.maximum(alpha, a)
        coverage = (alpha > 0).mean()
        if lo <= coverage <= hi:
            return alpha, value
    raise ConfigError("could not render scratches inside the coverage band; check geometry")


def render_spots(spec: ProceduralSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    alpha = np.zeros((size, size))
    value = np.zeros((size, size))
    for _ in range(int(rng.integers(spec.spot_blobs[0], spec.spot_blobs[1] + 1))):
        r = rng.uniform(*spec.spot_radius)
        cx, cy = rng.uniform(r, size - 1 - r, 2)
        d = np.hypot(xx - cx, yy - cy)
        a = np.clip((r + 0.5 - d) / (0.5 + 0.5 * r), 0.0, 1.0)
        intensity = rng.uniform(*spec.spot_intensity)
        value = np.where(a > alpha, intensity, value)
        alpha = np.maximum(alpha, a)
    return alpha, value


def _to_rgb(gray: np.ndarray, tint) -> np.ndarray:
    rgb = gray[None] * np.asarray(tint, dtype=float)[:, None, None]
    return (rgb * 2.0 - 1.0).astype(np.float32)


def render_sample(spec: ProceduralSpec, product: int, domain: int, index: int):
    """Returns ``(image, mask, background_image)``; the last is the defect-free rendering."""
    tex = spec.texture(product)
    bg_rng = np.random.default_rng([spec.seed, 1, product, domain, index])
    gray = render_background(tex, spec.image_size, bg_rng)
    background = _to_rgb(gray, tex.tint)
    if domain == 0:
        return background, np.zeros(gray.shape, dtype=bool), background
    fg_rng = np.random.default_rng([spec.seed, 2, tex.defect_seed, domain, index])
    alpha, value = (render_scratches if domain == 1 else render_spots)(spec, fg_rng)
    mask = alpha > 0
    composite = np.where(mask, gray * (1 - alpha) + value * alpha, gray)
    image = np.where(mask[None], _to_rgb(composite, tex.tint), background)
    return image, mask, background


def split_of(spec: ProceduralSpec, product: int, domain: int, count: int) -> list[str]:
    rng = np.random.default_rng([spec.seed, 3, product, domain])
    order = rng.permutation(count)
    n_train = int(round(spec.split_fractions[0] * count))
    n_val = int(round(spec.split_fractions[1] * count))
    labels = ["test"] * count
    for rank, i in enumerate(order):
        labels[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return labels


def generate_procedural(spec: ProceduralSpec) -> list[LabeledSample]:
    validate_spec(spec)
    domains = domain_schema(3)
    samples = []
    for p in range(spec.n_products):
        plabel = ProductLabel(p, product_name(p))
        for d, count in enumerate(spec.counts):
            splits = split_of(spec, p, d, count)
            for i in range(count):
                image, mask, _ = render_sample(spec, p, d, i)
                sid = f"{plabel.name}_{domains[d].name}_{i:04d}"
                samples.append(LabeledSample(image, domains[d], plabel, mask, sid,
                                             {"split": splits[i], "index": i}))
    return samples


# image io -------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255], rounding half away from zero, HWC layout."""
    v = (np.clip(np.asarray(image, dtype=np.float64), -1, 1) + 1.0) * 127.5
    v = np.floor(v + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_png(image, path: str | Path) -> None:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except Exception as exc:  # PIL raises several unrelated types
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def image_hash(image) -> str:
    """Content hash of the 8-bit encoding, so in-memory and on-disk copies agree."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return hashlib.sha256(to_uint8(image).tobytes()).hexdigest()


# folder datasets --------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: str
    image_size: int
    products: list[str]
    entries: list[dict] = field(default_factory=list)  # path, product, domain, split, sha256
    warnings: list[str] = field(default_factory=list)

    def files(self, product: str, domain: str, split: str) -> list[str]:
        return [e["path"] for e in self.entries
                if e["product"] == product and e["domain"] == domain and e["split"] == split]

    def cells(self) -> dict[tuple[str, str, str], list[str]]:
        out: dict = {}
        for e in self.entries:
            out.setdefault((e["product"], e["domain"], e["split"]), []).append(e["path"])
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def write_dataset(samples: Sequence[LabeledSample], root: str | Path, spec: Optional[ProceduralSpec] = None,
                  n_products: Optional[int] = None) -> DatasetManifest:
    root = Path(root)
    n_products = n_products or (spec.n_products if spec else 1 + max(s.product.id for s in samples))
    for p in range(n_products):
        for d in domain_schema(3):
            for split in SPLITS:
                (root / product_name(p) / d.name / split).mkdir(parents=True, exist_ok=True)
    for s in samples:
        split = s.provenance.get("split", "train")
        base = root / s.product.name / s.domain.name / split / s.sample_id
        save_png(s.image, base.with_suffix(".png"))
        mask = s.defect_mask if s.defect_mask is not None else np.zeros(s.image.shape[1:], bool)
        save_mask(mask, base.with_name(base.name + ".mask.png"))
    manifest = ingest_folder(root)
    # on disk the root is relative to the manifest itself, so the tree can move
    (root / "manifest.json").write_text(replace(manifest, root=".").to_json(), encoding="utf-8")
    return manifest


def ingest_folder(root: str | Path, image_size: Optional[int] = None) -> DatasetManifest:
    """Index ``root/<product>/<domain>/<split>/*.png`` (mask files excluded)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    products = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not products:
        raise ValueError(f"no product folders under {root}")
    entries, warnings = [], []
    seen_hash: dict[str, tuple[str, str]] = {}
    size = image_size
    for prod in products:
        for dom_dir in sorted(x for x in (root / prod).iterdir() if x.is_dir()):
            try:
                dom = parse_domain(dom_dir.name)
            except UnknownDomainError:
                raise UnknownDomainError(f"unknown domain folder {dom_dir.name!r} in {dom_dir}") from None
            names_by_split: dict[str, set] = {}
            for split in SPLITS:
                sdir = dom_dir / split
                files = sorted(f for f in sdir.glob("*.png") if not f.name.endswith(".mask.png")) \
                    if sdir.is_dir() else []
                if not files:
                    warnings.append(f"empty class folder {prod}/{dom.name}/{split}")
                names_by_split[split] = {f.name for f in files}
                for f in files:
                    img = load_png(f)
                    if size is None:
                        size = img.shape[1]
                    if img.shape[1:] != (size, size):
                        raise ValueError(f"{f}: size {img.shape[1:]} != {size}x{size}")
                    digest = hashlib.sha256(to_uint8(img).tobytes()).hexdigest()
                    prev = seen_hash.get(digest)
                    if prev is not None and prev[1] != split:
                        raise ValueError(f"split overlap: {f} duplicates {prev[0]}")
                    seen_hash.setdefault(digest, (str(f), split))
                    entries.append({"path": str(f.relative_to(root)), "product": prod,
                                    "domain": dom.name, "split": split, "sha256": digest})
            for a in SPLITS:
                for b in SPLITS:
                    if a < b and names_by_split[a] & names_by_split[b]:
                        dup = sorted(names_by_split[a] & names_by_split[b])[0]
                        raise ValueError(f"split overlap: {prod}/{dom.name}/{dup} in {a} and {b}")
    for w in warnings:
        log.warning(w)
    return DatasetManifest(str(root), int(size or 0), products, entries, warnings)


def load_samples(manifest: DatasetManifest, split: str, with_masks: bool = False) -> list[LabeledSample]:
    root = Path(manifest.root)
    domains = domain_schema(3)
    out = []
    for e in manifest.entries:
        if e["split"] != split:
            continue
        path = root / e["path"]
        mask = None
        if with_masks:
            mpath = path.with_name(path.name[:-4] + ".mask.png")
            mask = load_mask(mpath) if mpath.exists() else None
        dom = parse_domain(e["domain"])
        prod = ProductLabel(manifest.products.index(e["product"]), e["product"])
        out.append(LabeledSample(load_png(path), domains[dom.id], prod, mask, Path(e["path"]).stem,
                                 {"split": split, "sha256": e["sha256"]}))
    return out


def few_shot_subset(samples: Sequence[LabeledSample], product: int = 0, cap: int = 20) -> list[LabeledSample]:
    """Keep at most ``cap`` defective samples per defect type for ``product``; a pure filter."""
    kept, seen = [], {}
    for s in samples:
        if s.product.id == product and not s.domain.is_anchor:
            n = seen.get(s.domain.id, 0)
            if n >= cap:
                continue
            seen[s.domain.id] = n + 1
        kept.append(s)
    return kept


# sampling -------------------------------------------------------------------

class BalancedSampler:
    """Index sampler over (product, domain) cells.

    ``oversample`` picks a cell uniformly, then a member uniformly (with replacement);
    ``natural`` picks uniformly over all items.
    """

    def __init__(self, products: Sequence[int], domains: Sequence[int], mode: str = "oversample"):
        if mode not in ("oversample", "natural"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        if len(products) == 0:
            raise ValueError("train split is empty")
        self.mode = mode
        self.n = len(products)
        cells: dict = {}
        for i, key in enumerate(zip(list(map(int, products)), list(map(int, domains)))):
            cells.setdefault(key, []).append(i)
        self.cell_keys = sorted(cells)
        self.cells = [np.asarray(cells[k]) for k in self.cell_keys]

    @classmethod
    def from_cells(cls, sizes: dict, mode: str = "oversample") -> "BalancedSampler":
        products, domains = [], []
        for (p, d), size in sizes.items():
            if size == 0 and mode == "oversample":
                raise ValueError(f"empty cell {(p, d)} under oversample mode")
            products += [p] * size
            domains += [d] * size
        return cls(products, domains, mode)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.mode == "natural":
            return rng.integers(0, self.n, n)
        which = rng.integers(0, len(self.cells), n)
        return np.array([self.cells[c][rng.integers(0, len(self.cells[c]))] for c in which], dtype=np.int64)

    def stream(self, rng: np.random.Generator) -> Iterator[int]:
        while True:
            yield int(self.draw(1, rng)[0])


def balanced_sampler(manifest_or_samples, mode: str, rng: np.random.Generator) -> Iterator[int]:
    """Infinite stream of indices into the train split (entry order for manifests)."""
    if isinstance(manifest_or_samples, DatasetManifest):
        rows = [e for e in manifest_or_samples.entries if e["split"] == "train"]
        products = [manifest_or_samples.products.index(e["product"]) for e in rows]
        domains = [parse_domain(e["domain"]).id for e in rows]
    else:
        products = [s.product.id for s in manifest_or_samples]
        domains = [s.domain.id for s in manifest_or_samples]
    return BalancedSampler(products, domains, mode).stream(rng)


def traditional_augment(x: torch.Tensor, rng: torch.Generator, flip_p: float = 0.5,
                        jitter: float = 0.1) -> torch.Tensor:
    """Random horizontal flip plus brightness/contrast jitter, clamped to [-1, 1].

    Accepts ``(3, H, W)`` or a batch ``(B, 3, H, W)``; each image draws its own parameters.
    """
    single = x.ndim == 3
    xb = x.unsqueeze(0) if single else x
    b = xb.shape[0]
    flip = torch.rand(b, generator=rng) < flip_p
    contrast = 1.0 + jitter * (2 * torch.rand(b, generator=rng) - 1)
    bright = jitter * (2 * torch.rand(b, generator=rng) - 1)
    out = torch.where(flip.view(-1, 1, 1, 1), xb.flip(-1), xb)
    if jitter > 0:
        mean = out.mean(dim=(1, 2, 3), keepdim=True)
        c = contrast.view(-1, 1, 1, 1).to(out.dtype)
        out = out * c + (mean * (1 - c) + bright.view(-1, 1, 1, 1).to(out.dtype))
    out = out.clamp(-1.0, 1.0)
    return out[0] if single else out
