"""Execution of CAD sequences into point-membership solids.

Each ``SOL ... EXT`` group becomes a :class:`Body`: a planar profile (closed
polylines, even-odd interior) swept along the plane normal between two
heights. Bodies are folded left to right with their boolean operation, and
the resulting solid is only ever queried through :func:`contains`. Surface
samples are drawn from every body's walls and caps and kept only where the
composed solid actually changes membership across the sampled surface, so
faces swallowed by later bodies disappear and cut cavities are walled by the
cutter's surface.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cad_lang import (
    BooleanOp,
    CommandType,
    ExtentType,
    from_token_matrix,
    validate_syntax,
)
from .errors import (
    DegenerateCloud,
    DegenerateLoop,
    EmptyCloud,
    EmptySolid,
    FormatError,
    MalformedTokens,
    P2CadError,
    ZeroExtent,
)

SEGMENTS_PER_TURN = 64
AREA_EPS = 1e-9
EXTENT_EPS = 1e-9
# offset used to probe membership on either side of a sampled surface point
SURFACE_PROBE = 1e-6


def plane_rotation(theta, phi, gamma):
    """Sketch-plane orientation; columns are the sketch x axis, y axis and normal.

    Z-Y-Z Euler angles with the tilt offset by pi, so the exactly
    representable range ends (all angles at -pi or pi) give the identity.
    """
    def rz(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    c, s = math.cos(phi + math.pi), math.sin(phi + math.pi)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return rz(theta) @ ry @ rz(gamma)


def polygon_area(poly):
    """Signed shoelace area of a closed polyline (first == last)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def even_odd(points, edges_a, edges_b, chunk=4096):
    """Crossing-number test of 2D ``points`` against the edge list a->b."""
    points = np.atleast_2d(points)
    out = np.zeros(len(points), dtype=bool)
    ax, ay = edges_a[:, 0], edges_a[:, 1]
    bx, by = edges_b[:, 0], edges_b[:, 1]
    dy = by - ay
    safe_dy = np.where(dy == 0.0, 1.0, dy)
    for start in range(0, len(points), chunk):
        px = points[start:start + chunk, 0:1]
        py = points[start:start + chunk, 1:2]
        straddle = (ay > py) != (by > py)
        x_cross = ax + (py - ay) * (bx - ax) / safe_dy
        hits = straddle & (px < x_cross)
        out[start:start + chunk] = (hits.sum(axis=1) % 2) == 1
    return out


@dataclass(frozen=True)
class Profile:
    """Closed loops in plane coordinates (already multiplied by the scale)."""

    loops: tuple
    origin: np.ndarray
    rotation: np.ndarray
    scale: float

    @property
    def edges(self):
        a = np.concatenate([lp[:-1] for lp in self.loops])
        b = np.concatenate([lp[1:] for lp in self.loops])
        return a, b

    def area(self):
        total = 0.0
        for i, lp in enumerate(self.loops):
            depth = 0
            for j, other in enumerate(self.loops):
                if i != j and even_odd(lp[:1], other[:-1], other[1:])[0]:
                    depth += 1
            total += (-1) ** depth * abs(polygon_area(lp))
        return max(total, 0.0)

    def contains_2d(self, uv):
        a, b = self.edges
        return even_odd(uv, a, b)


@dataclass(frozen=True)
class Body:
    profile: Profile
    lo: float
    hi: float
    op: BooleanOp

    def to_local(self, q):
        return (np.atleast_2d(q) - self.profile.origin) @ self.profile.rotation

    def to_world(self, local):
        return local @ self.profile.rotation.T + self.profile.origin

    def contains(self, q):
        local = self.to_local(q)
        h = local[:, 2]
        in_h = (h >= self.lo) & (h <= self.hi)
        out = np.zeros(len(local), dtype=bool)
        if in_h.any():
            out[in_h] = self.profile.contains_2d(local[in_h, :2])
        return out


@dataclass(frozen=True)
class Solid:
    bodies: tuple

    def bounds(self):
        """Axis-aligned box enclosing every body (a superset of the solid)."""
        corners = []
        for body in self.bodies:
            pts = np.concatenate(body.profile.loops)
            lo = pts.min(axis=0)
            hi = pts.max(axis=0)
            for x in (lo[0], hi[0]):
                for y in (lo[1], hi[1]):
                    for h in (body.lo, body.hi):
                        corners.append(body.to_world(np.array([[x, y, h]]))[0])
        corners = np.array(corners)
        return corners.min(axis=0), corners.max(axis=0)


def contains(solid, q):
    """Membership of one point (returns bool) or an (M, 3) array of points."""
    q_arr = np.asarray(q, dtype=float)
    single = q_arr.ndim == 1
    pts = np.atleast_2d(q_arr)
    acc = np.zeros(len(pts), dtype=bool)
    for body in solid.bodies:
        inside = body.contains(pts)
        if body.op in (BooleanOp.NEW, BooleanOp.UNION):
            acc |= inside
        elif body.op == BooleanOp.CUT:
            acc &= ~inside
        else:
            acc &= inside
    return bool(acc[0]) if single else acc


# ---------------------------------------------------------------- execution

def _arc_points(start, end, alpha, ccw):
    """Points after ``start`` up to and including ``end``."""
    chord = end - start
    c = float(np.hypot(*chord))
    if c == 0.0:
        return np.empty((0, 2))
    if alpha <= 1e-12 or alpha >= 2 * math.pi - 1e-12:
        return end[None, :]
    mid = 0.5 * (start + end)
    left = np.array([-chord[1], chord[0]]) / c
    offset = 0.5 * c / math.tan(0.5 * alpha)
    center = mid + left * offset if ccw else mid - left * offset
    a0 = math.atan2(start[1] - center[1], start[0] - center[0])
    radius = float(np.hypot(*(start - center)))
    n = max(1, math.ceil(SEGMENTS_PER_TURN * alpha / (2 * math.pi)))
    sweep = alpha if ccw else -alpha
    t = a0 + sweep * np.arange(1, n + 1) / n
    pts = center + radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    pts[-1] = end
    return pts


def _circle_points(cx, cy, r):
    t = 2 * math.pi * np.arange(SEGMENTS_PER_TURN + 1) / SEGMENTS_PER_TURN
    pts = np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)
    pts[-1] = pts[0]
    return pts


def _build_loop(curves):
    if any(c.ctype == CommandType.CIRCLE for c in curves):
        if len(curves) != 1:
            raise DegenerateLoop("a circle must be the only curve of its loop")
        v = curves[0].values()
        if v["r"] <= 0.0:
            raise DegenerateLoop(f"circle radius {v['r']}")
        return _circle_points(v["x"], v["y"], v["r"])
    ends = [np.array([c.values()["x"], c.values()["y"]]) for c in curves]
    pts = []
    for k, c in enumerate(curves):
        start, end = ends[k - 1], ends[k]
        if c.ctype == CommandType.LINE:
            pts.append(end[None, :])
        else:
            v = c.values()
            pts.append(_arc_points(start, end, v["alpha"], v["f"] >= 0.5))
    pts = np.concatenate(pts)
    # drop repeated vertices from zero-length curves
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0.0, axis=1)
    pts = pts[keep]
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise DegenerateLoop(f"{len(pts)} distinct vertices")
    loop = np.concatenate([pts, pts[:1]])
    if abs(polygon_area(loop)) < AREA_EPS:
        raise DegenerateLoop("zero-area loop")
    return loop


def _extent(v):
    e1, e2, u = v["e1"], v["e2"], int(v["u"])
    if u == ExtentType.SYMMETRIC:
        lo, hi = -abs(e1), abs(e1)
    elif u == ExtentType.ONE_SIDED:
        lo, hi = min(0.0, e1), max(0.0, e1)
    else:
        lo, hi = min(e1, e2), max(e1, e2)
    if hi - lo < EXTENT_EPS:
        raise ZeroExtent(f"extent [{lo}, {hi}]")
    return lo, hi


def _groups(seq):
    """Split into [(loops, ext_command)] where loops is a list of curve lists."""
    groups, loops = [], []
    for c in seq.commands:
        if c.ctype == CommandType.SOL:
            loops.append([])
        elif c.ctype == CommandType.EXT:
            groups.append((loops, c))
            loops = []
        elif c.ctype != CommandType.EOS:
            loops[-1].append(c)
    return groups


def execute(seq):
    """Build the :class:`Solid` described by a CAD sequence."""
    groups = _groups(seq)
    if not groups:
        raise EmptySolid("sequence has no extrusion")
    bodies = []
    for k, (loops, ext_cmd) in enumerate(groups):
        v = ext_cmd.values()
        scale = v["s"]
        if scale <= 0.0:
            raise DegenerateLoop("zero sketch scale")
        rings = tuple(_build_loop(curves) * scale for curves in loops)
        profile = Profile(
            loops=rings,
            origin=np.array([v["px"], v["py"], v["pz"]]),
            rotation=plane_rotation(v["theta"], v["phi"], v["gamma"]),
            scale=scale,
        )
        if profile.area() < AREA_EPS:
            raise DegenerateLoop("profile encloses no area")
        lo, hi = _extent(v)
        op = BooleanOp(int(v["b"])) if k else BooleanOp.NEW
        bodies.append(Body(profile, lo, hi, op))
    solid = Solid(tuple(bodies))
    if any(b.op in (BooleanOp.CUT, BooleanOp.INTERSECT) for b in bodies):
        pts, _ = _surface_candidates(solid, np.random.default_rng(0), 4096)
        if not len(pts):
            raise EmptySolid("boolean composition removed everything")
    return solid


# ---------------------------------------------------------------- sampling

def _surface_elements(solid):
    """Flat table of sampleable patches: (body, kind, data, area)."""
    elems = []
    for bi, body in enumerate(solid.bodies):
        height = body.hi - body.lo
        a, b = body.profile.edges
        seg = np.hypot(*(b - a).T)
        for i in np.flatnonzero(seg > 0):
            elems.append((bi, "wall", (a[i], b[i]), seg[i] * height))
        cap_area = body.profile.area()
        for h, sign in ((body.lo, -1.0), (body.hi, 1.0)):
            elems.append((bi, "cap", (h, sign), cap_area))
    return elems


def _surface_candidates(solid, rng, count, elems=None):
    """Draw ``count`` candidates and keep those on the composed boundary.

    Random numbers are consumed in fixed-size blocks, so small parameter
    changes move samples continuously instead of reshuffling the stream.
    """
    if elems is None:
        elems = _surface_elements(solid)
    areas = np.array([e[3] for e in elems])
    cdf = np.cumsum(areas) / areas.sum()
    u = rng.random((count, 3))
    which = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(elems) - 1)
    pts = np.empty((count, 3))
    normals = np.empty((count, 3))
    valid = np.ones(count, dtype=bool)
    for ei in np.unique(which):
        rows = np.flatnonzero(which == ei)
        bi, kind, data, _ = elems[ei]
        body = solid.bodies[bi]
        local = np.empty((len(rows), 3))
        n_local = np.zeros((len(rows), 3))
        if kind == "wall":
            a, b = data
            t = u[rows, 1:2]
            local[:, :2] = a + t * (b - a)
            local[:, 2] = body.lo + u[rows, 2] * (body.hi - body.lo)
            d = (b - a) / np.hypot(*(b - a))
            n_local[:, 0], n_local[:, 1] = d[1], -d[0]
        else:
            h, sign = data
            ring = np.concatenate(body.profile.loops)
            lo, hi = ring.min(axis=0), ring.max(axis=0)
            local[:, :2] = lo + u[rows, 1:3] * (hi - lo)
            local[:, 2] = h
            n_local[:, 2] = sign
            valid[rows] = body.profile.contains_2d(local[:, :2])
        pts[rows] = body.to_world(local)
        normals[rows] = n_local @ body.profile.rotation.T
    eps = SURFACE_PROBE
    keep = valid.copy()
    idx = np.flatnonzero(valid)
    if idx.size:
        plus = contains(solid, pts[idx] + eps * normals[idx])
        minus = contains(solid, pts[idx] - eps * normals[idx])
        keep[idx] = plus != minus
    return pts[keep], normals[keep]


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise FormatError(f"point cloud must be (M, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise FormatError("non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def sample_surface(solid, m=2048, seed=0, max_rounds=100):
    """Area-weighted uniform samples from the boundary of ``solid``."""
    rng = np.random.default_rng(seed)
    elems = _surface_elements(solid)
    batch = max(2 * m, 1024)
    chunks, got = [], 0
    for rnd in range(max_rounds):
        pts, _ = _surface_candidates(solid, rng, batch, elems)
        chunks.append(pts)
        got += len(pts)
        if got >= m:
            return PointCloud(np.concatenate(chunks)[:m])
        if got == 0 and rnd >= 4:
            break
    raise EmptySolid(f"only {got} surface samples after {rnd + 1} rounds")


def normalize(pc):
    """Centre the bounding box at the origin and scale its longest side to 2."""
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=float)
    if len(pts) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        raise DegenerateCloud("all points coincide")
    return PointCloud((pts - 0.5 * (lo + hi)) * (2.0 / extent))


def chamfer_distance(a, b):
    """Sum of the two mean nearest-neighbour L2 distances (not squared)."""
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=float)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=float)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(d_ab.mean() + d_ba.mean())


def is_valid_model(m, m_points=2048, seed=0):
    """True when the tokens parse, execute and sample without error."""
    if not validate_syntax(m).ok:
        return False
    try:
        solid = execute(from_token_matrix(m))
        sample_surface(solid, m_points, seed)
    except (P2CadError, MalformedTokens):
        return False
    return True


# ---------------------------------------------------------------- file formats

CLOUD_MAGIC = b"P2PC"


def cloud_to_bytes(pc):
    pts = np.asarray(pc.points, dtype="<f4")
    return CLOUD_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes(order="C")


def cloud_from_bytes(raw, offset=0):
    """Decode one cloud record; returns (cloud, offset after the record)."""
    if raw[offset:offset + 4] != CLOUD_MAGIC:
        raise FormatError(f"bad cloud magic {raw[offset:offset + 4]!r}")
    (count,) = struct.unpack_from("<I", raw, offset + 4)
    start = offset + 8
    end = start + 12 * count
    if len(raw) < end:
        raise FormatError("truncated cloud payload")
    pts = np.frombuffer(raw, dtype="<f4", count=3 * count, offset=start)
    return PointCloud(pts.reshape(count, 3).astype(np.float64)), end


def save_cloud(pc, path):
    """Write ``.xyz``/``.txt`` as text triples, anything else as binary."""
    path = Path(path)
    if path.suffix in (".xyz", ".txt"):
        lines = [" ".join(repr(float(c)) for c in p) for p in pc.points]
        path.write_text("\n".join(lines) + "\n")
    else:
        path.write_bytes(cloud_to_bytes(pc))


def load_cloud(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == CLOUD_MAGIC:
        pc, end = cloud_from_bytes(raw)
        if end != len(raw):
            raise FormatError(f"{path}: trailing bytes after cloud")
        return pc
    try:
        pts = np.loadtxt(path, dtype=float, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return PointCloud(pts.reshape(-1, 3))
