"""Periodicity cell, perforated domain and their triangulations.

The unit cell ``Y = [0, 1]^2`` holds one inclusion ``X`` (a disk or a simple
polygon) strictly inside it; the solid part is ``Z = Y \\ X`` and the interface
is ``Gamma = dX``.  Cell meshes are conforming along the interface and the
solid mesh is periodic: vertices on opposite faces of ``Y`` pair exactly under
unit translation.  A perforated domain is tiled from copies of the cell mesh
scaled by ``epsilon``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

INTERFACE = "interface"
OUTER = "outer"

REGION_SOLID = 0
REGION_INCLUSION = 1

MARGIN = 1e-6


class GeometryError(ValueError):
    """Invalid geometry description."""


class MeshError(RuntimeError):
    """Meshing produced a non-conforming or invalid triangulation."""


@dataclass(frozen=True)
class CellGeometry:
    """Inclusion inside the unit periodicity cell.

    ``kind`` is ``"disk"``, ``"polygon"`` or ``"none"`` (no inclusion, Z = Y).
    """

    kind: str
    center: tuple[float, float] = (0.5, 0.5)
    radius: float = 0.0
    vertices: tuple[tuple[float, float], ...] = ()

    @property
    def inclusion_area(self) -> float:
        if self.kind == "disk":
            return math.pi * self.radius**2
        if self.kind == "polygon":
            return abs(_polygon_signed_area(np.asarray(self.vertices)))
        return 0.0

    @property
    def solid_area(self) -> float:
        return 1.0 - self.inclusion_area

    @property
    def is_empty(self) -> bool:
        return self.kind == "none"

    @property
    def is_centered_disk(self) -> bool:
        return self.kind == "disk" and self.center == (0.5, 0.5)

    def bounding_box(self) -> tuple[float, float, float, float]:
        if self.kind == "disk":
            cx, cy = self.center
            r = self.radius
            return cx - r, cy - r, cx + r, cy + r
        if self.kind == "polygon":
            v = np.asarray(self.vertices)
            return float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max())
        raise GeometryError("empty inclusion has no bounding box")

    def feature_size(self) -> float:
        """Radius for disks, inradius-like half width for polygons."""
        if self.kind == "disk":
            return self.radius
        if self.kind == "polygon":
            x0, y0, x1, y1 = self.bounding_box()
            return 0.5 * min(x1 - x0, y1 - y0)
        return math.inf

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points strictly inside the inclusion."""
        points = np.atleast_2d(points)
        if self.kind == "disk":
            d = np.hypot(points[:, 0] - self.center[0], points[:, 1] - self.center[1])
            return d < self.radius
        if self.kind == "polygon":
            return points_in_polygon(points, np.asarray(self.vertices))
        return np.zeros(len(points), dtype=bool)

    def interface_polygon(self, h: float) -> np.ndarray:
        """Closed counter-clockwise polyline approximating the interface, spacing <= h."""
        if self.kind == "disk":
            n = max(8, 8 * math.ceil(2.0 * math.pi * self.radius / h / 8.0))
            theta = 2.0 * math.pi * np.arange(n) / n
            return np.column_stack(
                [self.center[0] + self.radius * np.cos(theta), self.center[1] + self.radius * np.sin(theta)]
            )
        if self.kind == "polygon":
            v = np.asarray(self.vertices, dtype=float)
            if _polygon_signed_area(v) < 0:
                v = v[::-1]
            pts = []
            for a, b in zip(v, np.roll(v, -1, axis=0)):
                k = max(1, math.ceil(np.hypot(*(b - a)) / h))
                s = np.arange(k)[:, None] / k
                pts.append(a + s * (b - a))
            return np.vstack(pts)
        return np.zeros((0, 2))


def _polygon_signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting test, vectorized over points."""
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    x0, y0 = poly[:, 0][None, :], poly[:, 1][None, :]
    x1, y1 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    crosses = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return np.count_nonzero(crosses & (x < xint), axis=1) % 2 == 1


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return d1 * d2 < 0 and d3 * d4 < 0


def build_cell_geometry(spec: dict) -> CellGeometry:
    """Validate an inclusion descriptor and return the cell geometry.

    ``spec`` is ``{"type": "disk", "center": [x, y], "radius": r}``,
    ``{"type": "polygon", "vertices": [[x, y], ...]}`` or ``{"type": "none"}``.
    """
    kind = spec.get("type", "disk")
    if kind == "none":
        return CellGeometry(kind="none")
    if kind == "disk":
        center = tuple(float(c) for c in spec.get("center", (0.5, 0.5)))
        radius = float(spec["radius"])
        if radius <= 0.0:
            raise GeometryError("empty inclusion: disk radius must be positive")
        margin = min(center[0] - radius, center[1] - radius, 1.0 - center[0] - radius, 1.0 - center[1] - radius)
        if margin < MARGIN:
            raise GeometryError(f"inclusion touches cell boundary (margin {margin:.3g} < {MARGIN:g})")
        return CellGeometry(kind="disk", center=center, radius=radius)
    if kind == "polygon":
        verts = np.asarray(spec["vertices"], dtype=float)
        if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
            raise GeometryError("polygon needs at least three 2D vertices")
        if abs(_polygon_signed_area(verts)) <= 0.0:
            raise GeometryError("empty inclusion: polygon has zero area")
        margin = float(min(verts.min(), 1.0 - verts.max()))
        if margin < MARGIN:
            raise GeometryError(f"inclusion touches cell boundary (margin {margin:.3g} < {MARGIN:g})")
        n = len(verts)
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_intersect(verts[i], verts[(i + 1) % n], verts[j], verts[(j + 1) % n]):
                    raise GeometryError("polygon is not simple")
        return CellGeometry(kind="polygon", vertices=tuple(map(tuple, verts.tolist())))
    raise GeometryError(f"unknown inclusion type {kind!r}")


@dataclass(frozen=True)
class PeriodicMap:
    """Slave -> master vertex identification on the faces of the unit cell."""

    slaves: np.ndarray
    masters: np.ndarray
    n_vertices: int

    @classmethod
    def empty(cls, n_vertices: int) -> "PeriodicMap":
        return cls(np.zeros(0, dtype=int), np.zeros(0, dtype=int), n_vertices)


@dataclass(frozen=True)
class TriMesh:
    """Conforming P1 triangulation with tagged boundary edges.

    ``edges`` maps a tag (``"interface"`` or ``"outer"``) to an ``(k, 2)``
    vertex index array.  ``cell_local`` optionally holds, for tiled meshes,
    the lattice cell and the cell-mesh vertex each node came from.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: dict = field(default_factory=dict)
    region: np.ndarray | None = None
    cell_index: np.ndarray | None = None
    cell_local: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def area(self) -> float:
        return float(self.signed_areas().sum())

    def edge_set(self) -> set[tuple[int, int]]:
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return set(map(tuple, np.unique(e, axis=0).tolist()))

    def max_edge_length(self) -> float:
        if self.n_triangles == 0:
            return 0.0
        p = self.vertices[self.triangles]
        lens = [np.hypot(*(p[:, i] - p[:, (i + 1) % 3]).T) for i in range(3)]
        return float(np.max(lens))

    def tagged_vertices(self, tag: str) -> np.ndarray:
        e = self.edges.get(tag)
        if e is None or len(e) == 0:
            return np.zeros(0, dtype=int)
        return np.unique(e)

    def interface_length(self) -> float:
        e = self.edges.get(INTERFACE, np.zeros((0, 2), dtype=int))
        return float(np.hypot(*(self.vertices[e[:, 1]] - self.vertices[e[:, 0]]).T).sum()) if len(e) else 0.0


def boundary_edges(triangles: np.ndarray) -> np.ndarray:
    """Edges used by exactly one triangle, oriented as in that triangle."""
    if len(triangles) == 0:
        return np.zeros((0, 2), dtype=int)
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return e[counts[inv.ravel()] == 1]


def _compact(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    used = np.unique(triangles)
    remap = -np.ones(len(vertices), dtype=int)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[triangles], used


# --- point generation -------------------------------------------------------


def _cell_points(geom: CellGeometry, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Point cloud for the cell mesh and the interface polygon it contains."""
    nb = 2 * max(1, math.ceil(0.5 / h))
    s = np.arange(nb + 1) / nb
    grid = np.array(np.meshgrid(s, s, indexing="ij")).reshape(2, -1).T
    on_face = (grid == 0.0) | (grid == 1.0)
    face_pts = grid[on_face.any(axis=1)]
    interior = grid[~on_face.any(axis=1)]

    poly = geom.interface_polygon(h)
    if len(poly) == 0:
        return np.vstack([face_pts, interior]), poly

    pts = [face_pts, poly]
    if geom.kind == "disk":
        cx, cy = geom.center
        r = geom.radius
        n = len(poly)
        theta = 2.0 * math.pi * np.arange(n) / n
        ds = 2.0 * math.pi * r / n
        off = 0.5 * math.sqrt(3.0) * ds
        rings = []
        outer = np.column_stack([cx + (r + off) * np.cos(theta), cy + (r + off) * np.sin(theta)])
        keep = np.min(np.column_stack([outer, 1.0 - outer]), axis=1) > 0.5 * h
        rings.append(outer[keep])
        # concentric rings fill the disk; counts stay multiples of 8 for symmetry
        n_rings = max(0, round((r - 0.5 * ds) / off))
        step = r / (n_rings + 1) if n_rings else r
        for k in range(1, n_rings + 1):
            rad = r - k * step
            nk = max(8, 8 * round(2.0 * math.pi * rad / ds / 8.0))
            if nk > 8 and 2.0 * math.pi * rad / nk < 0.6 * step:
                nk -= 8
            phase = 0.0 if k % 2 == 0 else math.pi / nk
            if geom.is_centered_disk:
                phase = 0.0
            th = phase + 2.0 * math.pi * np.arange(nk) / nk
            rings.append(np.column_stack([cx + rad * np.cos(th), cy + rad * np.sin(th)]))
        rings.append(np.array([[cx, cy]]))
        pts.extend(rings)
        dist = np.hypot(interior[:, 0] - cx, interior[:, 1] - cy) - r
        interior = interior[dist > off + 0.6 * h]
    else:
        d = _distance_to_polyline(interior, poly)
        interior = interior[d > 0.7 * h]
    pts.append(interior)
    return np.vstack(pts), poly


def _distance_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a = poly[None, :, :]
    b = np.roll(poly, -1, axis=0)[None, :, :]
    p = points[:, None, :]
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=2) / np.sum(ab * ab, axis=2), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.min(np.linalg.norm(p - proj, axis=2), axis=1)


def _delaunay(points: np.ndarray) -> np.ndarray:
    tri = Delaunay(points).simplices.astype(int)
    p = points[tri]
    area = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    scale = np.max(np.ptp(points, axis=0)) ** 2
    tri = tri[np.abs(area) > 1e-12 * scale]
    area = area[np.abs(area) > 1e-12 * scale]
    neg = area < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    return tri


def _symmetric_disk_triangulation(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Triangulate a D4-symmetric point cloud by meshing one eighth and reflecting.

    Offsets from the cell center are used so that every reflection is an exact
    sign change or coordinate swap in floating point.
    """
    off = points - 0.5
    tol = 1e-12
    wedge = off[(off[:, 1] >= -tol) & (off[:, 1] <= off[:, 0] + tol)].copy()
    wedge[np.abs(wedge[:, 1]) <= tol, 1] = 0.0
    diag = np.abs(wedge[:, 1] - wedge[:, 0]) <= tol
    wedge[diag, 1] = wedge[diag, 0]
    wedge = np.unique(wedge, axis=0)
    tri = _delaunay(wedge)
    all_v, all_t = [], []
    for swap in (False, True):
        for sx in (1.0, -1.0):
            for sy in (1.0, -1.0):
                v = wedge[:, ::-1] if swap else wedge
                v = v * np.array([sx, sy])
                t = tri.copy()
                if swap ^ (sx * sy < 0):
                    t = t[:, [0, 2, 1]]
                all_t.append(t + sum(len(x) for x in all_v))
                all_v.append(v)
    verts = np.vstack(all_v)
    verts[verts == 0.0] = 0.0  # drop negative zeros so duplicates merge
    uniq, inv = np.unique(verts, axis=0, return_inverse=True)
    tris = inv.ravel()[np.vstack(all_t)]
    tris = np.unique(np.sort(tris, axis=1), axis=0)
    verts = uniq + 0.5
    p = verts[tris]
    area = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    neg = area < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return verts, tris


def _snap_to_faces(verts: np.ndarray) -> np.ndarray:
    v = verts.copy()
    for val in (0.0, 1.0):
        v[np.abs(v - val) < 1e-12] = val
    return v


def periodic_map(vertices: np.ndarray, tol: float = 1e-10) -> PeriodicMap:
    """Pair vertices on the faces x=1 and y=1 of the unit cell with their images on x=0 and y=0.

    Corners all map to the vertex at the origin.  Raises :class:`MeshError`
    when the face vertex sets do not match under translation.
    """
    n = len(vertices)
    key = {}
    for i, (x, y) in enumerate(vertices):
        key[(round(x / tol), round(y / tol))] = i

    def find(x, y):
        j = key.get((round(x / tol), round(y / tol)))
        if j is None:
            raise MeshError(f"periodic partner of ({x:.6g}, {y:.6g}) missing")
        return j

    slaves, masters = [], []
    for i, (x, y) in enumerate(vertices):
        on_x1 = abs(x - 1.0) < tol
        on_y1 = abs(y - 1.0) < tol
        if not (on_x1 or on_y1):
            continue
        mx = 0.0 if on_x1 else x
        my = 0.0 if on_y1 else y
        if abs(mx) < tol and abs(my - 1.0) < tol:
            my = 0.0
        if abs(my) < tol and abs(mx - 1.0) < tol:
            mx = 0.0
        slaves.append(i)
        masters.append(find(mx, my))
    for i, (x, y) in enumerate(vertices):
        on_x0 = abs(x) < tol and abs(y) > tol and abs(y - 1.0) > tol
        on_y0 = abs(y) < tol and abs(x) > tol and abs(x - 1.0) > tol
        if on_x0:
            find(1.0, y)
        if on_y0:
            find(x, 1.0)
    return PeriodicMap(np.asarray(slaves, dtype=int), np.asarray(masters, dtype=int), n)


def _tag_cell_edges(verts: np.ndarray, tris: np.ndarray, rect=(0.0, 0.0, 1.0, 1.0), tol=1e-12) -> dict:
    be = boundary_edges(tris)
    if len(be) == 0:
        return {INTERFACE: np.zeros((0, 2), dtype=int), OUTER: np.zeros((0, 2), dtype=int)}
    x0, y0, x1, y1 = rect
    p, q = verts[be[:, 0]], verts[be[:, 1]]
    outer = (
        ((np.abs(p[:, 0] - x0) < tol) & (np.abs(q[:, 0] - x0) < tol))
        | ((np.abs(p[:, 0] - x1) < tol) & (np.abs(q[:, 0] - x1) < tol))
        | ((np.abs(p[:, 1] - y0) < tol) & (np.abs(q[:, 1] - y0) < tol))
        | ((np.abs(p[:, 1] - y1) < tol) & (np.abs(q[:, 1] - y1) < tol))
    )
    return {INTERFACE: be[~outer], OUTER: be[outer]}


def mesh_cell(geom: CellGeometry, h: float, allow_empty: bool = False) -> tuple[TriMesh, TriMesh, PeriodicMap]:
    """Triangulate the unit cell into a periodic solid mesh and an inclusion mesh.

    Both meshes share bitwise-identical interface vertices.  A centered disk is
    meshed on one eighth of the cell and reflected so the mesh carries the full
    symmetry of the square.

    Parameters
    ----------
    geom : CellGeometry
    h : float
        Target edge length, ``0 < h < radius``.
    allow_empty : bool
        Permit a cell without inclusion; the inclusion mesh is then empty.
    """
    if geom.is_empty and not allow_empty:
        raise MeshError("empty inclusion: mesh_cell requires an inclusion (pass allow_empty=True for Z = Y)")
    if not (0.0 < h < geom.feature_size()):
        raise MeshError(f"target edge length h={h} must lie in (0, {geom.feature_size():g})")
    if h > 0.5:
        raise MeshError("h must be at most 0.5")

    points, poly = _cell_points(geom, h)
    if geom.is_centered_disk:
        verts, tris = _symmetric_disk_triangulation(points)
        # interface vertices: recover by matching the reflected polygon coordinates
        poly = verts[np.abs(np.hypot(*(verts - 0.5).T) - geom.radius) < 1e-12]
        ang = np.arctan2(poly[:, 1] - 0.5, poly[:, 0] - 0.5)
        poly = poly[np.argsort(ang)]
    else:
        verts = np.unique(points, axis=0)
        tris = _delaunay(verts)
    verts = _snap_to_faces(verts)

    if len(poly):
        cent = verts[tris].mean(axis=1)
        inside = geom.contains(cent) if geom.kind == "disk" else points_in_polygon(cent, poly)
    else:
        inside = np.zeros(len(tris), dtype=bool)

    # interface conformity: every polygon edge must be a mesh edge
    if len(poly):
        index = {tuple(v): i for i, v in enumerate(verts.tolist())}
        try:
            pid = np.array([index[tuple(p)] for p in poly.tolist()])
        except KeyError as exc:
            raise MeshError("interface vertex lost during triangulation") from exc
        mesh_edges = TriMesh(verts, tris).edge_set()
        for a, b in zip(pid, np.roll(pid, -1)):
            if (min(a, b), max(a, b)) not in mesh_edges:
                raise MeshError("non-conforming interface: polygon edge missing from triangulation")

    solid_v, solid_t, _ = _compact(verts, tris[~inside])
    solid = TriMesh(
        solid_v,
        solid_t,
        _tag_cell_edges(solid_v, solid_t),
        region=np.full(len(solid_t), REGION_SOLID),
    )
    if inside.any():
        incl_v, incl_t, _ = _compact(verts, tris[inside])
        incl_edges = _tag_cell_edges(incl_v, incl_t)
        if len(incl_edges[OUTER]):
            raise MeshError("inclusion mesh reaches the cell boundary")
        incl = TriMesh(incl_v, incl_t, incl_edges, region=np.full(len(incl_t), REGION_INCLUSION))
    else:
        incl = TriMesh(np.zeros((0, 2)), np.zeros((0, 3), dtype=int), {INTERFACE: np.zeros((0, 2), dtype=int)})

    if np.any(solid.signed_areas() <= 0) or (incl.n_triangles and np.any(incl.signed_areas() <= 0)):
        raise MeshError("degenerate or inverted triangle")
    pmap = periodic_map(solid.vertices)
    return solid, incl, pmap


def refine_cell_meshes(
    geom: CellGeometry, solid: TriMesh, incl: TriMesh
) -> tuple[TriMesh, TriMesh, PeriodicMap]:
    """Uniform red refinement of a conforming cell mesh pair.

    New interface midpoints are projected onto the exact interface for disks,
    so refinement converges to the curved boundary.
    """
    verts = np.vstack([solid.vertices, incl.vertices])
    tris = np.vstack([solid.triangles, incl.triangles + solid.n_vertices])
    region = np.concatenate([np.full(solid.n_triangles, REGION_SOLID), np.full(incl.n_triangles, REGION_INCLUSION)])
    verts, inv = np.unique(verts, axis=0, return_inverse=True)
    tris = inv.ravel()[tris]
    iface = set()
    for a, b in solid.edges.get(INTERFACE, np.zeros((0, 2), int)):
        iface.add(tuple(sorted((inv.ravel()[a], inv.ravel()[b]))))

    e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, einv = np.unique(key, axis=0, return_inverse=True)
    einv = einv.ravel()
    mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    if geom.kind == "disk":
        on_if = np.array([tuple(k) in iface for k in uniq.tolist()], dtype=bool)
        c = np.asarray(geom.center)
        d = mids[on_if] - c
        mids[on_if] = c + geom.radius * d / np.linalg.norm(d, axis=1)[:, None]
    mids = _snap_to_faces(mids)
    nt = len(tris)
    m01, m12, m20 = (einv[k * nt:(k + 1) * nt] + len(verts) for k in range(3))
    a, b, cc = tris[:, 0], tris[:, 1], tris[:, 2]
    new = np.vstack(
        [np.column_stack(x) for x in ((a, m01, m20), (m01, b, m12), (m20, m12, cc), (m01, m12, m20))]
    )
    new_region = np.tile(region, 4)
    allv = np.vstack([verts, mids])
    s_v, s_t, _ = _compact(allv, new[new_region == REGION_SOLID])
    i_v, i_t, _ = _compact(allv, new[new_region == REGION_INCLUSION])
    solid2 = TriMesh(s_v, s_t, _tag_cell_edges(s_v, s_t), region=np.full(len(s_t), REGION_SOLID))
    incl2 = TriMesh(i_v, i_t, _tag_cell_edges(i_v, i_t), region=np.full(len(i_t), REGION_INCLUSION))
    if np.any(solid2.signed_areas() <= 0) or np.any(incl2.signed_areas() <= 0):
        raise MeshError("refinement produced an inverted triangle")
    return solid2, incl2, periodic_map(s_v)


# --- perforated domain -------------------------------------------------------


@dataclass(frozen=True)
class PerforatedDomain:
    """Macro rectangle ``D`` with the epsilon-periodic array of inclusions inside it."""

    geometry: CellGeometry
    epsilon: float
    rect: tuple[float, float, float, float]
    z_extent: float
    inclusion_cells: tuple[tuple[int, int], ...]

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.rect
        return (x1 - x0) * (y1 - y0)


def _near_int(x: float, tol: float = 1e-9) -> int | None:
    k = round(x)
    return int(k) if abs(x - k) <= tol * max(1.0, abs(x)) else None


def build_perforated_domain(
    geom: CellGeometry, rect, epsilon: float, L: float = 0.0
) -> PerforatedDomain:
    """Collect the lattice cells ``k`` with ``epsilon*(k + closure(X))`` inside ``rect``."""
    x0, y0, x1, y1 = (float(v) for v in rect)
    if not (x1 > x0 and y1 > y0):
        raise GeometryError("macro rectangle must have positive extent")
    if epsilon <= 0 or _near_int(1.0 / epsilon) is None:
        raise GeometryError(f"epsilon must be 1/n for a positive integer n, got {epsilon}")
    if L < 0:
        raise GeometryError("z extent must be non-negative")
    cells: list[tuple[int, int]] = []
    if not geom.is_empty:
        bx0, by0, bx1, by1 = geom.bounding_box()
        for i in range(math.floor(x0 / epsilon) - 1, math.ceil(x1 / epsilon) + 1):
            for j in range(math.floor(y0 / epsilon) - 1, math.ceil(y1 / epsilon) + 1):
                if (
                    epsilon * (i + bx0) >= x0
                    and epsilon * (i + bx1) <= x1
                    and epsilon * (j + by0) >= y0
                    and epsilon * (j + by1) <= y1
                ):
                    cells.append((i, j))
    if cells or geom.is_empty:
        for v in (x0, y0, x1, y1):
            if _near_int(v / epsilon) is None:
                raise GeometryError(
                    f"rectangle {rect} is not tiled exactly by cells of size {epsilon}; "
                    "corners must be integer multiples of epsilon"
                )
    return PerforatedDomain(geom, float(epsilon), (x0, y0, x1, y1), float(L), tuple(cells))


def rectangle_mesh(rect, nx: int, ny: int) -> TriMesh:
    """Structured triangulation of a rectangle; each square split along its rising diagonal."""
    x0, y0, x1, y1 = rect
    xs = x0 + (x1 - x0) * np.arange(nx + 1) / nx
    ys = y0 + (y1 - y0) * np.arange(ny + 1) / ny
    X, Yg = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Yg.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    edges = {OUTER: boundary_edges(tris), INTERFACE: np.zeros((0, 2), dtype=int)}
    return TriMesh(verts, tris, edges, region=np.full(len(tris), REGION_SOLID))


def mesh_perforated(
    dom: PerforatedDomain, h: float, cell_meshes: tuple[TriMesh, TriMesh, PeriodicMap] | None = None
) -> tuple[TriMesh, TriMesh]:
    """Mesh ``D_eps`` and ``G_eps`` by tiling the cell mesh built at ``h / epsilon``.

    Returns ``(solid, inclusions)``.  Both carry ``cell_index`` (lattice cell
    per node) and ``cell_local`` (cell-mesh vertex per node).  The interface
    vertex sets of the two meshes coincide bitwise.
    """
    eps = dom.epsilon
    x0, y0, x1, y1 = dom.rect
    nx = _near_int((x1 - x0) / eps)
    ny = _near_int((y1 - y0) / eps)
    if not dom.inclusion_cells and not dom.geometry.is_empty:
        n = max(1, math.ceil((x1 - x0) / h)), max(1, math.ceil((y1 - y0) / h))
        solid = rectangle_mesh(dom.rect, *n)
        empty = TriMesh(np.zeros((0, 2)), np.zeros((0, 3), dtype=int), {INTERFACE: np.zeros((0, 2), dtype=int)})
        return solid, empty
    if cell_meshes is None:
        cell_meshes = mesh_cell(dom.geometry, h / eps, allow_empty=dom.geometry.is_empty)
    csolid, cincl, _ = cell_meshes
    i0, j0 = _near_int(x0 / eps), _near_int(y0 / eps)
    lattice = [(i0 + i, j0 + j) for i in range(nx) for j in range(ny)]
    incl_set = set(dom.inclusion_cells)
    if not dom.geometry.is_empty and set(lattice) != incl_set:
        raise GeometryError("inclusion cells do not tile the rectangle exactly")

    sv, st, scell, sloc = [], [], [], []
    iv, it, icell, iloc, iedge = [], [], [], [], []
    off_s = off_i = 0
    for c, (i, j) in enumerate(lattice):
        shift = np.array([i, j], dtype=float)
        sv.append(eps * (shift + csolid.vertices))
        st.append(csolid.triangles + off_s)
        scell.append(np.full(csolid.n_vertices, c))
        sloc.append(np.arange(csolid.n_vertices))
        off_s += csolid.n_vertices
        if cincl.n_vertices:
            iv.append(eps * (shift + cincl.vertices))
            it.append(cincl.triangles + off_i)
            icell.append(np.full(cincl.n_vertices, c))
            iloc.append(np.arange(cincl.n_vertices))
            iedge.append(cincl.edges[INTERFACE] + off_i)
            off_i += cincl.n_vertices

    allv = np.vstack(sv)
    uniq, first, inv = np.unique(allv, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    stris = inv[np.vstack(st)]
    solid = TriMesh(
        uniq,
        stris,
        _tag_cell_edges(uniq, stris, rect=dom.rect, tol=1e-12 * max(1.0, x1, y1)),
        region=np.full(len(stris), REGION_SOLID),
        cell_index=np.concatenate(scell)[first],
        cell_local=np.concatenate(sloc)[first],
    )
    if iv:
        incl = TriMesh(
            np.vstack(iv),
            np.vstack(it),
            {INTERFACE: np.vstack(iedge)},
            region=np.full(off_i and sum(len(t) for t in it), REGION_INCLUSION),
            cell_index=np.concatenate(icell),
            cell_local=np.concatenate(iloc),
        )
    else:
        incl = TriMesh(np.zeros((0, 2)), np.zeros((0, 3), dtype=int), {INTERFACE: np.zeros((0, 2), dtype=int)})
    return solid, incl
