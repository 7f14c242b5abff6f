"""Raster loading, label colour maps, tiling and the synthetic training set."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image, UnidentifiedImageError

from .nn.tensor import Tensor

DEFAULT_IGNORE_INDEX = 255


class RasterFormatError(ValueError):
    pass


class LabelColorError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    name: str
    color: tuple[int, int, int]


ISPRS_CLASSES = (
    ClassSpec("impervious surfaces", (255, 255, 255)),
    ClassSpec("building", (0, 0, 255)),
    ClassSpec("low vegetation", (0, 255, 255)),
    ClassSpec("tree", (0, 255, 0)),
    ClassSpec("car", (255, 255, 0)),
    ClassSpec("clutter", (255, 0, 0)),
)

GID_CLASSES = (
    ClassSpec("built-up", (255, 0, 0)),
    ClassSpec("farmland", (0, 255, 0)),
    ClassSpec("forest", (0, 255, 255)),
    ClassSpec("meadow", (255, 255, 0)),
    ClassSpec("water", (0, 0, 255)),
)

# Default colours for synthetic classes; more classes fall back to a generated ramp.
SYNTH_COLORS = ((230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
                (145, 30, 180), (70, 240, 240), (240, 50, 230))


@dataclass
class DatasetManifest:
    name: str
    classes: list[ClassSpec]
    pairs: list[tuple[str, str]]
    channel_order: tuple[int, ...] = (0, 1, 2)
    tile_size: int = 512
    tile_stride: int | None = None
    ignore_index: int = DEFAULT_IGNORE_INDEX
    splits: dict[str, list[int]] = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        colors = [tuple(c.color) for c in self.classes]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colours must be distinct")
        if not 0 < len(self.classes) <= 255:
            raise ValueError("manifest needs between 1 and 255 classes")
        if self.tile_size < 1 or not 0 < self.stride <= self.tile_size:
            raise ValueError("tile size must be positive and the stride in [1, tile size]")
        if 0 <= self.ignore_index < len(self.classes):
            raise ValueError("ignore_index collides with a class index")
        for split, indices in self.splits.items():
            if any(not 0 <= i < len(self.pairs) for i in indices):
                raise ValueError(f"split {split!r} refers to a missing pair")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def stride(self) -> int:
        return self.tile_stride or self.tile_size

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def palette(self) -> np.ndarray:
        return np.array([c.color for c in self.classes], dtype=np.uint8)

    def pair_paths(self, split: str | None = None) -> list[tuple[Path, Path]]:
        if split is None:
            indices = range(len(self.pairs))
        elif split in self.splits:
            indices = self.splits[split]
        else:
            raise KeyError(f"manifest has no split {split!r}; known: {sorted(self.splits)}")
        return [(self.root / self.pairs[i][0], self.root / self.pairs[i][1]) for i in indices]

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "classes": [{"name": c.name, "color": list(c.color)} for c in self.classes],
            "pairs": [{"image": img, "label": lab} for img, lab in self.pairs],
            "channel_order": list(self.channel_order),
            "tile_size": self.tile_size,
            "tile_stride": self.stride,
            "ignore_index": self.ignore_index,
        }
        if self.splits:
            out["splits"] = {k: list(v) for k, v in self.splits.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict, root: Path | str = ".") -> "DatasetManifest":
        try:
            classes = [ClassSpec(c["name"], tuple(int(v) for v in c["color"])) for c in data["classes"]]
            pairs = [(p["image"], p["label"]) for p in data["pairs"]]
            return cls(
                name=data["name"],
                classes=classes,
                pairs=pairs,
                channel_order=tuple(data.get("channel_order", (0, 1, 2))),
                tile_size=int(data.get("tile_size", 512)),
                tile_stride=data.get("tile_stride"),
                ignore_index=int(data.get("ignore_index", DEFAULT_IGNORE_INDEX)),
                splits={k: list(v) for k, v in data.get("splits", {}).items()},
                root=Path(root),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from exc

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class RasterInfo:
    path: str
    bit_depth: int
    channels: int


def _normalize(arr: np.ndarray, path) -> tuple[np.ndarray, int]:
    if arr.dtype == np.uint8:
        return arr / 255.0, 8
    if arr.dtype == np.uint16:
        return arr / 65535.0, 16
    if arr.dtype == np.bool_:
        return arr.astype(np.float64), 1
    raise RasterFormatError(f"{path}: unsupported sample type {arr.dtype}")


def _read_pixels(path: Path) -> np.ndarray:
    suffix = path.suffix.lower()
    try:
        if suffix in (".tif", ".tiff"):
            return np.asarray(tifffile.imread(path))
        if suffix == ".png":
            with Image.open(path) as im:
                if im.mode == "P":
                    im = im.convert("RGB")
                arr = np.asarray(im)
                if im.mode in ("I;16", "I;16B", "I;16L"):
                    arr = arr.astype(np.uint16)
                return arr
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise RasterFormatError(f"{path}: unreadable raster ({exc})") from exc
    raise RasterFormatError(f"{path}: unsupported format {suffix or '(none)'}; expected PNG or TIFF")


def load_raster(path) -> tuple[Tensor, RasterInfo]:
    """Channels-first float tensor in [0, 1] plus bit depth."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    arr = _read_pixels(path)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise RasterFormatError(f"{path}: expected a 2-D raster, got shape {arr.shape}")
    values, depth = _normalize(arr, path)
    return Tensor(np.ascontiguousarray(values.transpose(2, 0, 1))), RasterInfo(str(path), depth, arr.shape[2])


def save_png(path, image: np.ndarray) -> None:
    """Write a ``[C, H, W]`` array in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path)


def select_channels(image: Tensor, channel_order) -> Tensor:
    order = list(channel_order)
    if max(order) >= image.shape[0]:
        raise RasterFormatError(f"channel order {order} needs more than {image.shape[0]} bands")
    return Tensor(image.data[order])


def read_label_colors(path) -> np.ndarray:
    path = Path(path)
    arr = _read_pixels(path)
    if arr.ndim != 3 or arr.shape[2] < 3 or arr.dtype != np.uint8:
        raise RasterFormatError(f"{path}: label rasters must be 8-bit RGB")
    return arr[:, :, :3]


def decode_labels(colors: np.ndarray, manifest: DatasetManifest, strict: bool = True) -> np.ndarray:
    """Map an ``[H, W, 3]`` colour raster to class indices.

    Unknown colours raise in strict mode and become ``ignore_index`` otherwise.
    """
    colors = np.asarray(colors)
    if colors.ndim != 3 or colors.shape[2] != 3:
        raise LabelColorError(f"expected an [H, W, 3] colour raster, got {colors.shape}")
    key = (colors[..., 0].astype(np.int64) << 16) | (colors[..., 1].astype(np.int64) << 8) | colors[..., 2]
    palette = manifest.palette.astype(np.int64)
    codes = (palette[:, 0] << 16) | (palette[:, 1] << 8) | palette[:, 2]
    order = np.argsort(codes)
    pos = np.clip(np.searchsorted(codes[order], key), 0, len(codes) - 1)
    found = codes[order][pos] == key
    if strict and not found.all():
        y, x = np.argwhere(~found)[0]
        raise LabelColorError(f"colour {tuple(colors[y, x])} at ({y}, {x}) is not in the palette")
    return np.where(found, order[pos], manifest.ignore_index).astype(np.int64)


def encode_labels(labels: np.ndarray, manifest: DatasetManifest) -> np.ndarray:
    """Class indices to ``[H, W, 3]`` colours; ignored pixels become black."""
    labels = np.asarray(labels)
    valid = (labels >= 0) & (labels < manifest.n_classes)
    if not np.all(valid | (labels == manifest.ignore_index)):
        raise LabelColorError("label raster holds indices outside the class list")
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    out[valid] = manifest.palette[labels[valid]]
    return out


def save_indexed_png(path, labels: np.ndarray, palette: np.ndarray) -> None:
    """Class raster as a palette-mode PNG; the palette is written in full."""
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    flat = np.zeros((256, 3), dtype=np.uint8)
    flat[: len(palette)] = palette
    img.putpalette(flat.ravel().tolist())
    img.save(path, optimize=False)


# --- tiling ----------------------------------------------------------------------

def tile_origins(extent: int, tile: int, stride: int) -> list[int]:
    """Grid origins along one axis; a final edge-aligned origin covers any remainder."""
    if extent < tile:
        raise ValueError(f"source extent {extent} is smaller than the tile size {tile}")
    if not 0 < stride <= tile:
        raise ValueError(f"tile stride {stride} must be in [1, {tile}] so tiles cover the source")
    origins = list(range(0, extent - tile + 1, stride))
    if origins[-1] + tile < extent:
        origins.append(extent - tile)
    return origins


def tile_grid(height: int, width: int, tile: int, stride: int) -> list[tuple[int, int]]:
    return list(itertools.product(tile_origins(height, tile, stride), tile_origins(width, tile, stride)))


def _owned_span(origins: list[int], i: int, tile: int) -> tuple[int, int]:
    # a pixel belongs to the last tile whose origin does not exceed it
    start = origins[i]
    stop = origins[i + 1] if i + 1 < len(origins) else start + tile
    return 0, min(stop, start + tile) - start


def ownership_mask(height: int, width: int, tile: int, stride: int, origin: tuple[int, int]) -> np.ndarray:
    """Pixels of the tile at ``origin`` that no later tile claims; masks of a grid partition the source."""
    ys, xs = tile_origins(height, tile, stride), tile_origins(width, tile, stride)
    y0, y1 = _owned_span(ys, ys.index(origin[0]), tile)
    x0, x1 = _owned_span(xs, xs.index(origin[1]), tile)
    mask = np.zeros((tile, tile), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


@dataclass
class Sample:
    image: Tensor
    labels: np.ndarray
    source: str = "synthetic"
    origin: tuple[int, int] = (0, 0)
    owned: np.ndarray | None = None


def load_pair(manifest: DatasetManifest, image_path, label_path, strict: bool = True) -> tuple[Tensor, np.ndarray]:
    image, _ = load_raster(image_path)
    image = select_channels(image, manifest.channel_order)
    labels = decode_labels(read_label_colors(label_path), manifest, strict)
    if labels.shape != image.shape[1:]:
        raise RasterFormatError(f"{image_path} and {label_path} differ in extent")
    return image, labels


def tile_dataset(manifest: DatasetManifest, split: str | None = None, strict: bool = True) -> list[Sample]:
    """Tiles of every listed pair in manifest order, row-major within each image."""
    samples = []
    t, s = manifest.tile_size, manifest.stride
    for image_path, label_path in manifest.pair_paths(split):
        image, labels = load_pair(manifest, image_path, label_path, strict)
        h, w = labels.shape
        for y, x in tile_grid(h, w, t, s):
            samples.append(Sample(
                image=Tensor(image.data[:, y:y + t, x:x + t]),
                labels=labels[y:y + t, x:x + t].copy(),
                source=str(image_path),
                origin=(y, x),
                owned=ownership_mask(h, w, t, s, (y, x)),
            ))
    return samples


# --- synthetic data ----------------------------------------------------------------

SYNTH_NOISE = 0.03


def class_means(n_classes: int) -> np.ndarray:
    """Well separated per-class channel means in [0.15, 0.85]^3."""
    if n_classes < 1:
        raise ValueError("need at least one class")
    levels = 2
    while levels ** 3 < n_classes:
        levels += 1
    grid = np.linspace(0.15, 0.85, levels)
    points = np.array(list(itertools.product(grid, repeat=3)))
    # greedy farthest-point order so the first n are spread out
    chosen = [0]
    dist = np.abs(points - points[0]).max(axis=1)
    while len(chosen) < n_classes:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.abs(points - points[nxt]).max(axis=1))
    return points[chosen]


def synth_palette(n_classes: int) -> list[tuple[int, int, int]]:
    colors = list(SYNTH_COLORS[:n_classes])
    k = 0
    while len(colors) < n_classes:
        c = (40 + 37 * k % 200, 90 + 53 * k % 160, 17 + 71 * k % 230)
        if c not in colors:
            colors.append(c)
        k += 1
    return colors


def _draw_labels(rng: np.random.Generator, size: int, n_classes: int) -> np.ndarray:
    labels = np.full((size, size), rng.integers(n_classes), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 8))):
        cls = rng.integers(n_classes)
        kind = rng.integers(3)
        if kind == 0:
            y0, x0 = rng.integers(0, size - 4, 2)
            h, w = rng.integers(4, size // 2 + 1, 2)
            region = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == 1:
            cy, cx = rng.uniform(0, size, 2)
            ry, rx = rng.uniform(size / 10, size / 3, 2)
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            angle = rng.uniform(0, np.pi)
            period = rng.uniform(size / 6, size / 2)
            phase = rng.uniform(0, period)
            proj = yy * np.sin(angle) + xx * np.cos(angle) + phase
            region = (proj % period) < period * rng.uniform(0.25, 0.5)
        labels[region] = cls
    return labels


def synth_sample(rng: np.random.Generator, size: int, n_classes: int, noise: float = SYNTH_NOISE) -> Sample:
    labels = _draw_labels(rng, size, n_classes)
    means = class_means(n_classes)
    image = means[labels].transpose(2, 0, 1) + rng.normal(0.0, noise, (3, size, size))
    return Sample(Tensor(np.clip(image, 0.0, 1.0)), labels)


def synth_dataset(seed: int, n_samples: int, size: int = 64, n_classes: int = 5,
                  noise: float = SYNTH_NOISE) -> list[Sample]:
    """Piecewise-constant class maps (rectangles, ellipses, stripes) with class-specific colours plus noise."""
    if size < 16:
        raise ValueError("synthetic samples must be at least 16 pixels across")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, size, n_classes, noise) for _ in range(n_samples)]


def synth_manifest(n_classes: int, pairs=(), name: str = "synthetic", tile_size: int = 64) -> DatasetManifest:
    classes = [ClassSpec(f"class_{k}", c) for k, c in enumerate(synth_palette(n_classes))]
    return DatasetManifest(name, classes, list(pairs), tile_size=tile_size)


def write_synth_dataset(out_dir, seed: int, n_samples: int, size: int = 64, n_classes: int = 5) -> Path:
    """Materialise a synthetic set as PNG pairs plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = synth_manifest(n_classes, tile_size=size)
    pairs = []
    for i, sample in enumerate(synth_dataset(seed, n_samples, size, n_classes)):
        image_name, label_name = f"image_{i:03d}.png", f"label_{i:03d}.png"
        save_png(out_dir / image_name, sample.image.data)
        Image.fromarray(encode_labels(sample.labels, manifest)).save(out_dir / label_name)
        pairs.append((image_name, label_name))
    manifest.pairs = pairs
    manifest.root = out_dir
    path = out_dir / "manifest.json"
    manifest.save(path)
    return path
