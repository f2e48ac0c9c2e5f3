"""Z-buffered software rasterizer for textured worldsheets, plus lidar
point splatting and depth-map masking.

Depth maps are (H, W) float arrays in meters with 0 meaning invalid / no
return; pixel masks are (H, W) bool arrays.

Rasterization details pinned for determinism:
  - perspective-correct (1/z-weighted) interpolation of depth and uv;
  - the depth test keeps the nearest fragment, ties broken by the lowest
    triangle index;
  - back-facing triangles and triangles touching the near plane are
    dropped; zero-area triangles are skipped silently and counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PinholeIntrinsics, RigPose
from .imageops import bilinear_sample
from .sheet import TexturedSheet

NEAR_PLANE = 0.01
DEFAULT_FAR_SENTINEL = 1000.0

# fragment batches are capped to bound peak memory
_MAX_BATCH_FRAGMENTS = 2_000_000


@dataclass
class RenderOutput:
    """A synthesized view: image + depth + coverage.

    coverage is true exactly where depth > 0, and the image is defined
    (>= 0) wherever coverage holds; uncovered pixels are zero.
    """

    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 where uncovered
    coverage: np.ndarray  # (H, W) bool
    stats: dict = field(default_factory=dict)


def render(ts: TexturedSheet, src_intr: PinholeIntrinsics,
           dst_intr: PinholeIntrinsics, rel: RigPose,
           drop_stretched: bool = False) -> RenderOutput:
    """Render a textured sheet into the target view.

    `rel` is the target-from-source transform (see geometry.relative_pose).
    With drop_stretched=True, faces flagged as spanning a depth
    discontinuity are not rasterized, leaving disocclusions uncovered
    rather than rubber-sheeted.
    """
    sheet = ts.sheet
    verts_src = sheet.vertices_cam(src_intr)
    verts = verts_src @ rel.rotation.T + rel.translation
    uv = sheet.uv().reshape(-1, 2)

    faces = sheet.faces
    keep = np.ones(len(faces), dtype=bool)
    if drop_stretched:
        keep &= ~sheet.stretch
    vz = verts[:, 2]
    keep &= np.all(vz[faces] > NEAR_PLANE, axis=1)
    n_near_dropped = int((~np.all(vz[faces] > NEAR_PLANE, axis=1)).sum())
    faces = faces[keep]

    h, w = dst_intr.height, dst_intr.width
    zbuf = np.full(h * w, np.inf)
    ubuf = np.zeros(h * w)
    vbuf = np.zeros(h * w)

    stats = {"near_dropped": n_near_dropped, "degenerate": 0, "backfacing": 0}
    if len(faces) > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            # vertices behind the near plane only occur in dropped faces
            sx = dst_intr.fx * verts[:, 0] / vz + dst_intr.cx
            sy = dst_intr.fy * verts[:, 1] / vz + dst_intr.cy
        screen = np.stack([sx, sy], axis=1)
        _rasterize(screen, vz, uv, faces, w, h, zbuf, ubuf, vbuf, stats)

    covered = np.isfinite(zbuf)
    depth = np.where(covered, zbuf, 0.0).reshape(h, w)
    coverage = covered.reshape(h, w)

    image = np.zeros((h, w, 3))
    if covered.any():
        tex = ts.texture
        tx = ubuf[covered] * (sheet.image_w - 1)
        ty = vbuf[covered] * (sheet.image_h - 1)
        image.reshape(-1, 3)[covered] = bilinear_sample(tex, tx, ty)
    return RenderOutput(image=image, depth=depth, coverage=coverage, stats=stats)


def _rasterize(screen, vz, uv, faces, w, h, zbuf, ubuf, vbuf, stats):
    """Two-pass vectorized rasterization into the flat buffers."""
    p0 = screen[faces[:, 0]]
    p1 = screen[faces[:, 1]]
    p2 = screen[faces[:, 2]]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - \
           (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    degenerate = np.abs(area) < 1e-12
    backfacing = (area <= 0) & ~degenerate
    stats["degenerate"] += int(degenerate.sum())
    stats["backfacing"] += int(backfacing.sum())
    front = ~(degenerate | backfacing)

    x0 = np.maximum(np.ceil(np.minimum.reduce([p0[:, 0], p1[:, 0], p2[:, 0]])), 0)
    x1 = np.minimum(np.floor(np.maximum.reduce([p0[:, 0], p1[:, 0], p2[:, 0]])), w - 1)
    y0 = np.maximum(np.ceil(np.minimum.reduce([p0[:, 1], p1[:, 1], p2[:, 1]])), 0)
    y1 = np.minimum(np.floor(np.maximum.reduce([p0[:, 1], p1[:, 1], p2[:, 1]])), h - 1)
    nonempty = front & (x1 >= x0) & (y1 >= y0)
    tri_ids = np.nonzero(nonempty)[0]
    if tri_ids.size == 0:
        return

    bw = (x1 - x0).astype(np.intp) + 1
    bh = (y1 - y0).astype(np.intp) + 1
    # group by bounding-box footprint so each batch pads to a similar size
    order = np.argsort(bw[tri_ids] * bh[tri_ids], kind="stable")
    tri_ids = tri_ids[order]

    frag_pix, frag_z, frag_u, frag_v, frag_tri = [], [], [], [], []

    start = 0
    while start < tri_ids.size:
        stop = start
        mw = mh = 0
        while stop < tri_ids.size:
            t = tri_ids[stop]
            nmw = max(mw, int(bw[t]))
            nmh = max(mh, int(bh[t]))
            if (stop - start + 1) * nmw * nmh > _MAX_BATCH_FRAGMENTS and stop > start:
                break
            mw, mh = nmw, nmh
            stop += 1
        ids = tri_ids[start:stop]
        start = stop

        ox, oy = np.meshgrid(np.arange(mw), np.arange(mh))
        xs = x0[ids][:, None, None] + ox[None, :, :]
        ys = y0[ids][:, None, None] + oy[None, :, :]
        inside_bbox = (xs <= x1[ids][:, None, None]) & (ys <= y1[ids][:, None, None])

        a0, a1, a2 = p0[ids], p1[ids], p2[ids]
        ar = area[ids][:, None, None]

        def edge(pa, pb):
            return ((pb[:, 0, None, None] - pa[:, 0, None, None]) * (ys - pa[:, 1, None, None])
                    - (pb[:, 1, None, None] - pa[:, 1, None, None]) * (xs - pa[:, 0, None, None]))

        w0 = edge(a1, a2) / ar
        w1 = edge(a2, a0) / ar
        w2 = edge(a0, a1) / ar
        inside = inside_bbox & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue

        z0 = vz[faces[ids, 0]][:, None, None]
        z1 = vz[faces[ids, 1]][:, None, None]
        z2 = vz[faces[ids, 2]][:, None, None]
        inv_z = w0 / z0 + w1 / z1 + w2 / z2
        u_over_z = (w0 * uv[faces[ids, 0], 0][:, None, None] / z0
                    + w1 * uv[faces[ids, 1], 0][:, None, None] / z1
                    + w2 * uv[faces[ids, 2], 0][:, None, None] / z2)
        v_over_z = (w0 * uv[faces[ids, 0], 1][:, None, None] / z0
                    + w1 * uv[faces[ids, 1], 1][:, None, None] / z1
                    + w2 * uv[faces[ids, 2], 1][:, None, None] / z2)

        sel = inside
        zf = 1.0 / inv_z[sel]
        frag_pix.append((ys[sel].astype(np.intp) * w + xs[sel].astype(np.intp)))
        frag_z.append(zf)
        frag_u.append(u_over_z[sel] * zf)
        frag_v.append(v_over_z[sel] * zf)
        tri_broadcast = np.broadcast_to(ids[:, None, None], inside.shape)
        frag_tri.append(tri_broadcast[sel])

    if not frag_pix:
        return
    pix = np.concatenate(frag_pix)
    z = np.concatenate(frag_z)
    u = np.concatenate(frag_u)
    v = np.concatenate(frag_v)
    tri = np.concatenate(frag_tri)

    # pass 1: nearest depth per pixel
    np.minimum.at(zbuf, pix, z)
    winners = z == zbuf[pix]
    pix, z, u, v, tri = pix[winners], z[winners], u[winners], v[winners], tri[winners]
    # pass 2: among equal-depth fragments the lowest triangle index wins
    order = np.lexsort((tri, pix))
    pix, z, u, v = pix[order], z[order], u[order], v[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, z, u, v = pix[first], z[first], u[first], v[first]
    zbuf[pix] = z
    ubuf[pix] = u
    vbuf[pix] = v


def render_sparse_depth(points: np.ndarray, pose: RigPose,
                        intr: PinholeIntrinsics) -> np.ndarray:
    """Splat world-frame points into a sparse depth map.

    Each point projects to its nearest pixel; where several land on the
    same pixel the smallest depth is kept. Pixels with no point are 0.
    """
    depth = np.full(intr.height * intr.width, np.inf)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.size:
        cam = pose.world_to_camera(pts)
        z = cam[:, 2]
        ok = z > 0
        cam, z = cam[ok], z[ok]
        px = np.rint(intr.fx * cam[:, 0] / z + intr.cx).astype(np.intp)
        py = np.rint(intr.fy * cam[:, 1] / z + intr.cy).astype(np.intp)
        ok = (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height)
        np.minimum.at(depth, py[ok] * intr.width + px[ok], z[ok])
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(intr.height, intr.width)


def apply_depth_masks(depth: np.ndarray, sky: np.ndarray | None = None,
                      dynamic: np.ndarray | None = None,
                      far_sentinel: float = DEFAULT_FAR_SENTINEL) -> np.ndarray:
    """Sky pixels are pushed to the far sentinel; dynamic-object pixels are
    zeroed (excluded from depth losses)."""
    out = np.asarray(depth, dtype=np.float64).copy()
    if sky is not None:
        sky = np.asarray(sky, dtype=bool)
        if sky.shape != out.shape:
            raise ValueError("sky mask dimensions do not match depth")
        out[sky] = far_sentinel
    if dynamic is not None:
        dynamic = np.asarray(dynamic, dtype=bool)
        if dynamic.shape != out.shape:
            raise ValueError("dynamic mask dimensions do not match depth")
        out[dynamic] = 0.0
    return out
