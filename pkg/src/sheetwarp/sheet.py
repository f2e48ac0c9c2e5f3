"""Worldsheet scene mesh: a lattice grid warped onto the scene by per-vertex
depth, textured from the source image.

Vertex (i, j) of a grid_w x grid_h sheet is anchored at the normalized image
position ((i + du) / (grid_w - 1), (j + dv) / (grid_h - 1)); normalized
coordinates map to pixels as n * (size - 1), so the corner vertices sit on
the corner pixel centers. Each grid cell contributes two triangles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import PinholeIntrinsics, unproject_pinhole

OFFSET_BOUND = 0.5  # max |du|,|dv| in cell widths
STRETCH_RATIO = 1.35  # face depth max/min beyond which a face is flagged


@dataclass
class WorldSheet:
    """Lattice mesh over the image: per-vertex depth and lateral offsets.

    Arrays are indexed [j, i] (row, column) with shape (grid_h, grid_w).
    `faces` is an (F, 3) int array of flat vertex indices (j * grid_w + i),
    two triangles per cell; `stretch` flags faces spanning a depth
    discontinuity (vertex depth ratio max/min > STRETCH_RATIO).
    """

    grid_w: int
    grid_h: int
    z: np.ndarray  # (grid_h, grid_w) meters, > 0
    du: np.ndarray  # (grid_h, grid_w) in cell widths, |du| <= OFFSET_BOUND
    dv: np.ndarray
    image_w: int
    image_h: int
    faces: np.ndarray = field(init=False)
    stretch: np.ndarray = field(init=False)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.du = np.asarray(self.du, dtype=np.float64)
        self.dv = np.asarray(self.dv, dtype=np.float64)
        shape = (self.grid_h, self.grid_w)
        for name, arr in (("z", self.z), ("du", self.du), ("dv", self.dv)):
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
        if np.any(self.z <= 0):
            raise ValueError("all vertex depths must be positive")
        if np.abs(self.du).max(initial=0) > OFFSET_BOUND or \
           np.abs(self.dv).max(initial=0) > OFFSET_BOUND:
            raise ValueError(f"offsets exceed bound {OFFSET_BOUND}")
        self.faces = grid_faces(self.grid_w, self.grid_h)
        self.stretch = self._stretch_flags()

    def _stretch_flags(self) -> np.ndarray:
        zf = self.z.reshape(-1)[self.faces]
        return zf.max(axis=1) / zf.min(axis=1) > STRETCH_RATIO

    def anchors_px(self) -> np.ndarray:
        """(grid_h, grid_w, 2) pixel positions of the vertex anchors."""
        ii, jj = np.meshgrid(np.arange(self.grid_w), np.arange(self.grid_h))
        u = (ii + self.du) / (self.grid_w - 1)
        v = (jj + self.dv) / (self.grid_h - 1)
        return np.stack([u * (self.image_w - 1), v * (self.image_h - 1)], axis=-1)

    def uv(self) -> np.ndarray:
        """(grid_h, grid_w, 2) normalized texture coordinates in [0, 1]^2."""
        ii, jj = np.meshgrid(np.arange(self.grid_w), np.arange(self.grid_h))
        u = np.clip((ii + self.du) / (self.grid_w - 1), 0.0, 1.0)
        v = np.clip((jj + self.dv) / (self.grid_h - 1), 0.0, 1.0)
        return np.stack([u, v], axis=-1)

    def vertices_cam(self, intr: PinholeIntrinsics) -> np.ndarray:
        """(grid_h * grid_w, 3) camera-frame vertex positions."""
        anchors = self.anchors_px().reshape(-1, 2)
        return unproject_pinhole(anchors, self.z.reshape(-1), intr)


@dataclass
class TexturedSheet:
    sheet: WorldSheet
    texture: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=np.float64)
        if self.texture.ndim != 3 or self.texture.shape[2] != 3:
            raise ValueError("texture must be (H, W, 3)")
        if (self.texture.shape[0] != self.sheet.image_h
                or self.texture.shape[1] != self.sheet.image_w):
            raise ValueError("texture dimensions do not match the sheet's image size")


def grid_faces(grid_w: int, grid_h: int) -> np.ndarray:
    """Triangle index list for a grid: 2*(grid_w-1)*(grid_h-1) faces,
    identical for all sheets of the same dimensions."""
    ii, jj = np.meshgrid(np.arange(grid_w - 1), np.arange(grid_h - 1))
    v00 = (jj * grid_w + ii).ravel()
    v10 = v00 + 1
    v01 = v00 + grid_w
    v11 = v01 + 1
    tri_a = np.stack([v00, v10, v11], axis=1)
    tri_b = np.stack([v00, v11, v01], axis=1)
    return np.concatenate([tri_a[:, None, :], tri_b[:, None, :]], axis=1).reshape(-1, 3)


def build_sheet(depth: np.ndarray, intr: PinholeIntrinsics,
                grid_w: int = 65, grid_h: int = 65) -> WorldSheet:
    """Build the scene mesh from a depth map (0 = invalid sample).

    Each vertex takes the median of the valid depth samples in its
    surrounding cell (half a cell in each direction). Vertices whose 3x3
    cell neighborhood holds no valid sample are filled by propagating the
    nearest resolved vertex depth. Raises ValueError if the whole map is
    invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValueError("depth dimensions do not match intrinsics")
    if grid_w < 2 or grid_h < 2:
        raise ValueError("grid must be at least 2x2")
    if not np.any(depth > 0):
        raise ValueError("no depth: depth map has no valid samples")

    h, w = depth.shape
    cell_w = (w - 1) / (grid_w - 1)
    cell_h = (h - 1) / (grid_h - 1)
    z = np.zeros((grid_h, grid_w))

    def cell_median(i: int, j: int, radius: float) -> float:
        x0 = max(int(np.ceil(i * cell_w - radius * cell_w)), 0)
        x1 = min(int(np.floor(i * cell_w + radius * cell_w)), w - 1)
        y0 = max(int(np.ceil(j * cell_h - radius * cell_h)), 0)
        y1 = min(int(np.floor(j * cell_h + radius * cell_h)), h - 1)
        patch = depth[y0:y1 + 1, x0:x1 + 1]
        vals = patch[patch > 0]
        return float(np.median(vals)) if vals.size else 0.0

    for j in range(grid_h):
        for i in range(grid_w):
            d = cell_median(i, j, 0.5)
            if d == 0.0:
                d = cell_median(i, j, 1.5)
            z[j, i] = d

    if np.any(z == 0):
        z = _fill_nearest(z)

    zeros = np.zeros((grid_h, grid_w))
    return WorldSheet(grid_w=grid_w, grid_h=grid_h, z=z, du=zeros, dv=zeros.copy(),
                      image_w=w, image_h=h)


def _fill_nearest(z: np.ndarray) -> np.ndarray:
    """Fill zero entries with the value of the nearest (grid Chebyshev
    distance) nonzero vertex, via ring dilation."""
    z = z.copy()
    while np.any(z == 0):
        padded = np.pad(z, 1, mode="edge")
        stack = np.stack([padded[dy:dy + z.shape[0], dx:dx + z.shape[1]]
                          for dy in range(3) for dx in range(3)])
        counts = (stack > 0).sum(axis=0)
        sums = stack.sum(axis=0)
        fill = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        z = np.where(z == 0, fill, z)
    return z


def splat_texture(image: np.ndarray, sheet: WorldSheet) -> TexturedSheet:
    """Attach the source image as the sheet texture (uv = vertex anchors)."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != (sheet.image_h, sheet.image_w):
        raise ValueError("image dimensions do not match the sheet")
    return TexturedSheet(sheet=sheet, texture=img)


def sample_weights(sheet: WorldSheet, xs: np.ndarray, ys: np.ndarray):
    """Interpolation structure of the sheet's source-view depth at pixels.

    Returns (idx, wgt, valid): flat vertex indices (N, 4), bilinear weights
    (N, 4), and a validity mask (N,). The interpolated depth at pixel k is
    sum(wgt[k] * z.flat[idx[k]]) — linear in the vertex depths, with
    weights depending only on the anchor positions.

    With nonzero offsets each warped quad cell is treated as a bilinear
    patch and inverted per pixel; overlapping warped cells resolve to the
    one with the smallest interpolated depth.
    """
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    gw, gh = sheet.grid_w, sheet.grid_h
    cell_w = (sheet.image_w - 1) / (gw - 1)
    cell_h = (sheet.image_h - 1) / (gh - 1)

    if not np.any(sheet.du) and not np.any(sheet.dv):
        ci = np.clip(np.floor(xs / cell_w).astype(np.intp), 0, gw - 2)
        cj = np.clip(np.floor(ys / cell_h).astype(np.intp), 0, gh - 2)
        s = np.clip(xs / cell_w - ci, 0.0, 1.0)
        t = np.clip(ys / cell_h - cj, 0.0, 1.0)
        base = cj * gw + ci
        idx = np.stack([base, base + 1, base + gw, base + gw + 1], axis=1)
        wgt = np.stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t], axis=1)
        valid = (xs >= 0) & (xs <= sheet.image_w - 1) & \
                (ys >= 0) & (ys <= sheet.image_h - 1)
        return idx, wgt, valid

    return _sample_weights_warped(sheet, xs, ys, cell_w, cell_h)


def _sample_weights_warped(sheet, xs, ys, cell_w, cell_h):
    """General path: invert each candidate warped cell's bilinear patch."""
    gw, gh = sheet.grid_w, sheet.grid_h
    anchors = sheet.anchors_px()
    zflat = sheet.z.reshape(-1)
    n = xs.size

    idx = np.zeros((n, 4), dtype=np.intp)
    wgt = np.zeros((n, 4))
    best_z = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)

    ci0 = np.clip(np.floor(xs / cell_w).astype(np.intp), 0, gw - 2)
    cj0 = np.clip(np.floor(ys / cell_h).astype(np.intp), 0, gh - 2)

    # Offsets are bounded by half a cell, so the containing warped cell is
    # within one cell of the nominal lattice cell.
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            ci = np.clip(ci0 + di, 0, gw - 2)
            cj = np.clip(cj0 + dj, 0, gh - 2)
            p00 = anchors[cj, ci]
            p10 = anchors[cj, ci + 1]
            p01 = anchors[cj + 1, ci]
            p11 = anchors[cj + 1, ci + 1]
            s, t, ok = _invert_bilinear(p00, p10, p01, p11, xs, ys)
            base = cj * gw + ci
            cand_idx = np.stack([base, base + 1, base + gw, base + gw + 1], axis=1)
            cand_w = np.stack([(1 - s) * (1 - t), s * (1 - t),
                               (1 - s) * t, s * t], axis=1)
            cand_z = (cand_w * zflat[cand_idx]).sum(axis=1)
            take = ok & (cand_z < best_z)
            idx[take] = cand_idx[take]
            wgt[take] = cand_w[take]
            best_z[take] = cand_z[take]
            found |= take
    return idx, wgt, found


def _invert_bilinear(p00, p10, p01, p11, xs, ys):
    """Solve q = (1-s)(1-t) p00 + s(1-t) p10 + (1-s)t p01 + st p11 for
    (s, t); returns (s, t, inside)."""
    q = np.stack([xs, ys], axis=-1)
    e = p10 - p00
    f = p01 - p00
    g = p00 - p10 - p01 + p11
    hh = q - p00

    def cross(a, b):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    k2 = cross(g, f)
    k1 = cross(e, f) + cross(hh, g)
    k0 = cross(hh, e)
    k2b = np.broadcast_to(k2, k0.shape)
    k1b = np.broadcast_to(k1, k0.shape)

    t = np.zeros_like(k0)
    lin = np.abs(k2b) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lin = -k0 / k1b
        disc = k1b * k1b - 4.0 * k2b * k0
        root = np.sqrt(np.maximum(disc, 0.0))
        t_a = (-k1b + root) / (2.0 * k2b)
        t_b = (-k1b - root) / (2.0 * k2b)
    pick_a = (t_a >= -1e-9) & (t_a <= 1 + 1e-9)
    t_quad = np.where(pick_a, t_a, t_b)
    t = np.where(lin, t_lin, t_quad)
    t = np.nan_to_num(t, nan=-1.0)

    denom_x = e[..., 0] + g[..., 0] * t
    denom_y = e[..., 1] + g[..., 1] * t
    use_x = np.abs(denom_x) >= np.abs(denom_y)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_x = (hh[..., 0] - f[..., 0] * t) / denom_x
        s_y = (hh[..., 1] - f[..., 1] * t) / denom_y
    s = np.where(use_x, s_x, s_y)
    s = np.nan_to_num(s, nan=-1.0)

    eps = 1e-9
    inside = (disc >= -1e-12) & (s >= -eps) & (s <= 1 + eps) & \
             (t >= -eps) & (t <= 1 + eps)
    return np.clip(s, 0.0, 1.0), np.clip(t, 0.0, 1.0), inside


def sheet_depth(sheet: WorldSheet, intr: PinholeIntrinsics | None = None) -> np.ndarray:
    """Dense source-view depth of the sheet (H, W); 0 where the warped
    sheet does not cover a pixel (never happens for zero offsets).

    The value at each pixel is the bilinear-patch interpolation of the
    vertex depths, so it is linear in them and equals the vertex depth
    exactly at each anchor.
    """
    if intr is not None and (intr.width != sheet.image_w or intr.height != sheet.image_h):
        raise ValueError("intrinsics do not match the sheet's image size")
    xs, ys = np.meshgrid(np.arange(sheet.image_w, dtype=np.float64),
                         np.arange(sheet.image_h, dtype=np.float64))
    idx, wgt, valid = sample_weights(sheet, xs, ys)
    depth = (wgt * sheet.z.reshape(-1)[idx]).sum(axis=1)
    depth[~valid] = 0.0
    return depth.reshape(sheet.image_h, sheet.image_w)


def dump_sheet(sheet: WorldSheet, path) -> None:
    """Debug dump: JSON header line + little-endian float32 z, du, dv."""
    header = {
        "grid_w": sheet.grid_w, "grid_h": sheet.grid_h,
        "image_w": sheet.image_w, "image_h": sheet.image_h,
        "z_min": float(sheet.z.min()), "z_max": float(sheet.z.max()),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for arr in (sheet.z, sheet.du, sheet.dv):
            fh.write(arr.astype("<f4").tobytes())


def load_sheet(path) -> WorldSheet:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        gw, gh = header["grid_w"], header["grid_h"]
        count = gw * gh
        arrays = []
        for _ in range(3):
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError("truncated sheet dump")
            arrays.append(np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(gh, gw))
    z, du, dv = arrays
    return WorldSheet(grid_w=gw, grid_h=gh, z=z, du=du, dv=dv,
                      image_w=header["image_w"], image_h=header["image_h"])
