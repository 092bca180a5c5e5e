"""Procedural 2D shape corpus and exact signed-distance sampling.

Shapes are closed simple boundaries with extents in the 0.05-0.15 m range:
regular polygons, superellipses, and user-supplied outlines.  Signed
distances are computed geometrically against the boundary polyline
(negative inside), which is exact for polygons and converges quadratically
in the vertex count for smooth outlines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOX_HALF = 0.15       # sampling box half-extent (m)
NEAR_SURFACE_STD = 0.01
NEAR_SURFACE_FRACTION = 0.7


class ShapeError(Exception):
    pass


@dataclass
class ShapeSpec:
    """One corpus entry: a named closed boundary."""

    name: str
    vertices: np.ndarray     # (V, 2) counter-clockwise closed boundary

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise ShapeError(f"{self.name}: need >= 3 2D vertices")
        if np.allclose(v[0], v[-1]):
            v = v[:-1]
        self.vertices = v
        area = _signed_area(v)
        if abs(area) < 1e-8:
            raise ShapeError(f"{self.name}: degenerate boundary")
        if area < 0:
            self.vertices = v[::-1].copy()


def _signed_area(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def regular_polygon(name, n_sides, circumradius, rotation=0.0):
    angles = rotation + 2.0 * np.pi * np.arange(n_sides) / n_sides
    verts = circumradius * np.column_stack([np.cos(angles), np.sin(angles)])
    return ShapeSpec(name, verts)


def square(name, side):
    h = side / 2.0
    return ShapeSpec(name, np.array(
        [[-h, -h], [h, -h], [h, h], [-h, h]]))


def superellipse(name, a, b, exponent, n_vertices=1024):
    t = np.linspace(0.0, 2.0 * np.pi, n_vertices, endpoint=False)
    c, s = np.cos(t), np.sin(t)
    x = a * np.sign(c) * np.abs(c) ** (2.0 / exponent)
    y = b * np.sign(s) * np.abs(s) ** (2.0 / exponent)
    return ShapeSpec(name, np.column_stack([x, y]))


def outline_from_csv(name, path):
    pts = np.loadtxt(path, delimiter=",")
    return ShapeSpec(name, pts)


def default_corpus():
    """21 procedural shapes; index 0 is the 0.08 m square used by the
    downstream consumers' test scenarios."""
    shapes = [square("square_080", 0.08)]
    for i, (n_sides, radius) in enumerate(
            [(3, 0.045), (3, 0.065), (4, 0.050), (4, 0.070),
             (5, 0.045), (5, 0.065), (6, 0.050), (6, 0.070)]):
        shapes.append(regular_polygon(f"poly{n_sides}_{i}", n_sides, radius))
    idx = 0
    for exponent in (1.5, 2.0, 3.0, 5.0):
        for a in (0.035, 0.050, 0.065):
            shapes.append(superellipse(
                f"superellipse_{idx}", a, 0.8 * a, exponent))
            idx += 1
    assert len(shapes) == 21
    return shapes


def signed_distance(points, shape: ShapeSpec):
    """Exact signed distance to the boundary polyline (negative inside)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    a = shape.vertices
    b = np.roll(a, -1, axis=0)
    ab = b - a
    ab_len2 = np.maximum((ab * ab).sum(axis=1), 1e-300)
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pse,se->ps", ap, ab) / ab_len2, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    dist = np.linalg.norm(p[:, None, :] - closest, axis=-1).min(axis=1)
    ay, by = a[None, :, 1], b[None, :, 1]
    cond = (ay <= p[:, None, 1]) != (by <= p[:, None, 1])
    denom = np.where(by - ay == 0.0, 1.0, by - ay)
    x_int = a[None, :, 0] + (p[:, None, 1] - ay) / denom * ab[None, :, 0]
    crossings = np.sum(cond & (x_int > p[:, None, 0]), axis=1)
    sign = np.where(crossings % 2 == 1, -1.0, 1.0)
    return sign * dist


def sample_sdf(shape: ShapeSpec, n, rng):
    """(point, signed distance) pairs: 70% near-surface, 30% uniform box."""
    n_near = int(round(NEAR_SURFACE_FRACTION * n))
    n_box = n - n_near
    # near-surface: jittered boundary points
    edge_idx = rng.integers(0, len(shape.vertices), n_near)
    t = rng.uniform(0.0, 1.0, n_near)[:, None]
    a = shape.vertices[edge_idx]
    b = shape.vertices[(edge_idx + 1) % len(shape.vertices)]
    on_boundary = a + t * (b - a)
    near = on_boundary + rng.normal(0.0, NEAR_SURFACE_STD, (n_near, 2))
    box = rng.uniform(-BOX_HALF, BOX_HALF, (n_box, 2))
    pts = np.vstack([near, box])
    return pts, signed_distance(pts, shape)


def sample_interior(shape: ShapeSpec, n, rng, max_tries=50):
    """Uniform samples strictly inside the shape (rejection sampling)."""
    lo = shape.vertices.min(axis=0)
    hi = shape.vertices.max(axis=0)
    out_pts, out_d = [], []
    remaining = n
    for _ in range(max_tries):
        if remaining <= 0:
            break
        cand = rng.uniform(lo, hi, (4 * remaining, 2))
        d = signed_distance(cand, shape)
        keep = d < 0.0
        out_pts.append(cand[keep][:remaining])
        out_d.append(d[keep][:remaining])
        remaining = n - sum(len(p) for p in out_pts)
    if remaining > 0:
        raise ShapeError(f"{shape.name}: interior sampling failed")
    return np.vstack(out_pts), np.concatenate(out_d)
