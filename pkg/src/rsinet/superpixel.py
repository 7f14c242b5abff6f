"""SLIC superpixels and the pixel <-> superpixel graph translation.

Pixels are flattened row-major. ``Q`` is the binary (H*W, Z) association
matrix with one 1 per row; ``Q_norm`` divides each column by its region size,
so ``Q_norm.T @ X`` averages pixels into nodes and ``Q @ V`` paints node
features back onto pixels.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .nn.tensor import Tensor, make_result

# Inputs live in [0, 1]; scaling puts colour distances on a CIELAB-like range so
# that the usual compactness values (~10) balance colour against position.
COLOR_SCALE = 100.0


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # (H, W) int64 region index
    n_regions: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_regions)


@dataclass
class PixelGraph:
    Q: sparse.csr_matrix
    Q_norm: sparse.csr_matrix
    M: np.ndarray
    V: Tensor


# --- SLIC ----------------------------------------------------------------------

def _grid_shape(h: int, w: int, k: int) -> tuple[int, int]:
    gy = int(np.clip(round(np.sqrt(k * h / w)), 1, min(k, h)))
    gx = int(np.clip(round(k / gy), 1, w))
    return gy, gx


def _gradient_magnitude(color: np.ndarray) -> np.ndarray:
    padded = np.pad(color, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dy = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
    dx = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
    return (dy * dy + dx * dx).sum(axis=0)


def _initial_centers(color: np.ndarray, gy: int, gx: int) -> np.ndarray:
    c, h, w = color.shape
    grad = _gradient_magnitude(color)
    centers = np.empty((gy * gx, 2 + c))
    for i in range(gy):
        cy = int((i + 0.5) * h / gy)
        for j in range(gx):
            cx = int((j + 0.5) * w / gx)
            y0, y1 = max(cy - 1, 0), min(cy + 2, h)
            x0, x1 = max(cx - 1, 0), min(cx + 2, w)
            window = grad[y0:y1, x0:x1]
            # first minimum in row-major order keeps seeding deterministic
            dy, dx = np.unravel_index(np.argmin(window), window.shape)
            y, x = y0 + dy, x0 + dx
            centers[i * gx + j, :2] = (y, x)
            centers[i * gx + j, 2:] = color[:, y, x]
    return centers


def _assign(color, centers, cell_y, cell_x, gy, gx, spatial_weight):
    _, h, w = color.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    best = np.full((h, w), np.inf)
    best_idx = np.full((h, w), -1, dtype=np.int64)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ci = cell_y + di
            cj = cell_x + dj
            valid = (ci >= 0) & (ci < gy) & (cj >= 0) & (cj < gx)
            if not valid.any():
                continue
            idx = np.where(valid, ci * gx + cj, 0)
            ctr = centers[idx]
            dc = ((color.transpose(1, 2, 0) - ctr[..., 2:]) ** 2).sum(axis=-1)
            ds = (yy - ctr[..., 0]) ** 2 + (xx - ctr[..., 1]) ** 2
            d = np.where(valid, dc + spatial_weight * ds, np.inf)
            better = (d < best) | ((d == best) & (idx < best_idx))
            better &= valid
            best = np.where(better, d, best)
            best_idx = np.where(better, idx, best_idx)
    return best_idx


def _update_centers(color, labels, centers):
    c, h, w = color.shape
    k = centers.shape[0]
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    sums = [np.bincount(flat, weights=yy.ravel().astype(np.float64), minlength=k),
            np.bincount(flat, weights=xx.ravel().astype(np.float64), minlength=k)]
    sums += [np.bincount(flat, weights=color[ch].ravel(), minlength=k) for ch in range(c)]
    new = centers.copy()
    filled = counts > 0
    for col, s in enumerate(sums):
        new[filled, col] = s[filled] / counts[filled]
    return new


def _neighbor_pairs(labels: np.ndarray, diagonal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Label pairs of all 4- (or 8-) adjacent pixel pairs whose labels differ."""
    pairs = [(labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])]
    if diagonal:
        pairs += [(labels[:-1, :-1], labels[1:, 1:]), (labels[:-1, 1:], labels[1:, :-1])]
    a = np.concatenate([p.ravel() for p, _ in pairs])
    b = np.concatenate([q.ravel() for _, q in pairs])
    differ = a != b
    return a[differ], b[differ]


def _components(labels: np.ndarray) -> np.ndarray:
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for p, q, lp, lq in ((idx[:, :-1], idx[:, 1:], labels[:, :-1], labels[:, 1:]),
                         (idx[:-1, :], idx[1:, :], labels[:-1, :], labels[1:, :])):
        same = lp == lq
        rows.append(p[same])
        cols.append(q[same])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = sparse.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    return comp.reshape(h, w).astype(np.int64)


def _absorb_small(comp: np.ndarray, min_size: float) -> np.ndarray:
    """Merge components smaller than ``min_size`` into their longest-boundary neighbour."""
    n = int(comp.max()) + 1
    size = np.bincount(comp.ravel(), minlength=n).astype(np.int64)
    if not (size < min_size).any():
        return comp
    a, b = _neighbor_pairs(comp)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    keys, counts = np.unique(lo * n + hi, return_counts=True)
    border: list[dict[int, int]] = [dict() for _ in range(n)]
    for key, cnt in zip(keys.tolist(), counts.tolist()):
        i, j = divmod(key, n)
        border[i][j] = cnt
        border[j][i] = cnt

    parent = np.arange(n)
    alive = np.ones(n, dtype=bool)
    heap = [(int(size[r]), r) for r in range(n) if size[r] < min_size]
    heapq.heapify(heap)
    while heap:
        s, r = heapq.heappop(heap)
        if not alive[r] or s != size[r] or s >= min_size or not border[r]:
            continue
        # longest shared boundary wins, lowest index breaks ties
        target = min(border[r].items(), key=lambda kv: (-kv[1], kv[0]))[0]
        for k, cnt in border[r].items():
            del border[k][r]
            if k != target:
                border[target][k] = border[target].get(k, 0) + cnt
                border[k][target] = border[k].get(target, 0) + cnt
        border[r] = {}
        alive[r] = False
        parent[r] = target
        size[target] += size[r]
        if size[target] < min_size:
            heapq.heappush(heap, (int(size[target]), target))

    root = parent.copy()
    for r in range(n):
        x = r
        while parent[x] != x:
            x = parent[x]
        root[r] = x
    return root[comp]


def _compact(labels: np.ndarray) -> tuple[np.ndarray, int]:
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first)]
    remap = np.empty(int(flat.max()) + 1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return remap[labels], int(order.size)


def slic(
    image,
    target_region_size: float,
    compactness: float = 10.0,
    max_iters: int = 10,
) -> SuperpixelMap:
    """Partition a ``[C, H, W]`` image into roughly ``H*W/target_region_size`` regions.

    Distances use the image's own channels (scaled by ``COLOR_SCALE``) plus
    position weighted by ``compactness / S`` with ``S`` the grid step. After
    clustering, every region is made 4-connected and fragments smaller than
    ``target_region_size / 4`` are absorbed into the neighbour sharing the
    longest boundary. Labels are numbered in row-major order of first pixel.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3 or data.shape[1] < 1 or data.shape[2] < 1:
        raise ValueError(f"slic expects a [C, H, W] image, got shape {data.shape}")
    _, h, w = data.shape
    if not 1 <= target_region_size <= h * w:
        raise ValueError(f"target_region_size must lie in [1, {h * w}], got {target_region_size}")
    if compactness <= 0:
        raise ValueError("compactness must be positive")

    color = data * COLOR_SCALE
    k = max(1, int(round(h * w / target_region_size)))
    gy, gx = _grid_shape(h, w, k)
    step = np.sqrt(h * w / (gy * gx))
    spatial_weight = (compactness / step) ** 2

    cell_y = np.minimum((np.arange(h) * gy) // h, gy - 1)[:, None] * np.ones((1, w), dtype=np.int64)
    cell_x = np.minimum((np.arange(w) * gx) // w, gx - 1)[None, :] * np.ones((h, 1), dtype=np.int64)

    centers = _initial_centers(color, gy, gx)
    labels = None
    for _ in range(max(1, max_iters)):
        new_labels = _assign(color, centers, cell_y, cell_x, gy, gx, spatial_weight)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = _update_centers(color, labels, centers)

    comp = _components(labels)
    comp = _absorb_small(comp, target_region_size / 4.0)
    compact, z = _compact(comp)
    return SuperpixelMap(compact, z)


# --- graph construction ------------------------------------------------------------

def association_matrix(spmap: SuperpixelMap) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Binary pixel-to-region matrix ``Q`` and its column-normalised form."""
    flat = spmap.labels.ravel()
    n = flat.size
    rows = np.arange(n)
    q = sparse.csr_matrix((np.ones(n), (rows, flat)), shape=(n, spmap.n_regions))
    inv_size = 1.0 / spmap.sizes()
    q_norm = sparse.csr_matrix((inv_size[flat], (rows, flat)), shape=(n, spmap.n_regions))
    return q, q_norm


def adjacency_mask(spmap: SuperpixelMap, connectivity: int = 4) -> np.ndarray:
    """Z x Z 0/1 matrix marking regions that share a boundary."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    z = spmap.n_regions
    m = np.zeros((z, z))
    a, b = _neighbor_pairs(spmap.labels, diagonal=connectivity == 8)
    m[a, b] = 1.0
    m[b, a] = 1.0
    return m


def graph_encode(image: Tensor, q_norm: sparse.spmatrix) -> Tensor:
    """Node features ``V = Q_norm^T Flatten(image)``: per-region channel means, ``[Z, C]``."""
    if image.ndim != 3:
        raise ValueError("graph_encode expects a [C, H, W] image")
    c, h, w = image.shape
    if q_norm.shape[0] != h * w:
        raise ValueError(f"Q_norm has {q_norm.shape[0]} rows, image has {h * w} pixels")
    qt = q_norm.T.tocsr()
    out = np.asarray(qt @ image.data.reshape(c, h * w).T)

    def grad(g):
        return (np.ascontiguousarray(np.asarray(q_norm @ g).T).reshape(c, h, w),)

    return make_result(out, (image,), grad)


def graph_decode(v: Tensor, q: sparse.spmatrix, height: int, width: int) -> Tensor:
    """Paint node rows back onto their pixels: ``[Z, D] -> [D, H, W]``."""
    if v.ndim != 2 or q.shape[0] != height * width or q.shape[1] != v.shape[0]:
        raise ValueError(f"graph_decode shape mismatch: Q {q.shape}, V {v.shape}, {height}x{width}")
    d = v.shape[1]
    qt = q.T.tocsr()
    out = np.asarray(q @ v.data).T.reshape(d, height, width)

    def grad(g):
        return (np.asarray(qt @ g.reshape(d, height * width).T),)

    return make_result(out, (v,), grad)


def build_pixel_graph(image: Tensor, spmap: SuperpixelMap, connectivity: int = 4) -> PixelGraph:
    q, q_norm = association_matrix(spmap)
    return PixelGraph(q, q_norm, adjacency_mask(spmap, connectivity), graph_encode(image, q_norm))


def export_png(spmap: SuperpixelMap, path: str | Path, seed: int = 0) -> None:
    """Write labels as an indexed PNG (indices wrap at 256) for visual inspection."""
    from PIL import Image

    rng = np.random.default_rng(seed)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    img = Image.fromarray((spmap.labels % 256).astype(np.uint8), mode="P")
    img.putpalette(palette.ravel().tolist())
    img.save(path)
