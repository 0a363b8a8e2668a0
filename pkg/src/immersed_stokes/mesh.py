"""Structured triangular background mesh on the unit square.

The solver never fits the mesh to the immersed geometry, so the only mesh
ever needed is the uniform triangulation of ``(0,1)^2`` obtained by splitting
an ``n x n`` grid of squares along the lower-left/upper-right diagonal.  The
mesh size is ``h = sqrt(2)/n`` (the diagonal length).

Everything downstream (classification, degree-2 node numbering, facet jumps)
relies on the deterministic numbering fixed here:

* vertices: lexicographic, ``id = j*(n+1) + i`` for grid point ``(i/n, j/n)``;
* cells: square ``(i, j)`` owns cells ``2*(j*n+i)`` (lower triangle) and
  ``2*(j*n+i)+1`` (upper triangle), both listed counter-clockwise;
* facets: unique sorted vertex pairs, ordered by first occurrence over cells;
* quadratic nodes: all vertices first, then one midpoint per facet, so node
  ``n_vertices + f`` is the midpoint of facet ``f``.
"""

import numpy as np


class MeshError(Exception):
    """Raised for invalid mesh construction or queries."""


class TriMesh:
    """Conforming triangulation of the unit square with adjacency tables.

    Attributes
    ----------
    n : int
        Number of squares per side.
    h : float
        Mesh size, ``sqrt(2)/n``.
    vertices : (n_vertices, 2) float array
    cells : (n_cells, 3) int array
        Vertex ids per cell, counter-clockwise.
    facets : (n_facets, 2) int array
        Endpoint vertex ids, sorted within each facet.
    facet_cells : (n_facets, 2) int array
        Adjacent cell ids in increasing order; second entry is -1 on the
        outer boundary.
    cell_facets : (n_cells, 3) int array
        Facet ids per cell; local facet ``k`` is opposite local vertex ``k``.
    wall_facet : (n_facets,) bool array
        True for facets lying on the boundary of the unit square.
    p2_coords : (n_vertices + n_facets, 2) float array
        Coordinates of the degree-2 nodes (vertices, then facet midpoints).
    jac, inv_jac : (n_cells, 2, 2) float arrays
        Affine map matrix ``B = [v1-v0 | v2-v0]`` and its inverse per cell.
    det : (n_cells,) float array
        ``det(B)`` per cell (twice the signed area, positive here).
    """

    def __init__(self, n):
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise MeshError("subdivision count n must be a positive integer, got %r" % (n,))
        self.n = int(n)
        self.h = np.sqrt(2.0) / n
        self._build()

    def _build(self):
        n = self.n
        # Vertices on the (n+1) x (n+1) grid, lexicographic in (i, j).
        side = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(side, side)  # Y varies along axis 0
        self.vertices = np.column_stack([X.ravel(), Y.ravel()])

        ii, jj = np.meshgrid(np.arange(n), np.arange(n))
        i = ii.ravel()
        j = jj.ravel()
        v00 = j * (n + 1) + i
        v10 = v00 + 1
        v01 = v00 + (n + 1)
        v11 = v01 + 1
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        cells = np.empty((2 * n * n, 3), dtype=np.int64)
        cells[0::2] = lower
        cells[1::2] = upper
        self.cells = cells

        # Facets as unique sorted vertex pairs.  Local facet k sits opposite
        # local vertex k, i.e. it joins local vertices k+1 and k+2 (mod 3).
        pairs = cells[:, [[1, 2], [2, 0], [0, 1]]].reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        facets, first, inverse = np.unique(
            pairs, axis=0, return_index=True, return_inverse=True
        )
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        self.facets = facets[order]
        self.cell_facets = rank[inverse].reshape(-1, 3)

        nf = len(self.facets)
        flat_f = self.cell_facets.ravel()
        flat_c = np.repeat(np.arange(len(cells)), 3)
        by_facet = np.argsort(flat_f, kind="stable")  # keeps cell ids ascending
        fs = flat_f[by_facet]
        cs = flat_c[by_facet]
        lo = np.searchsorted(fs, np.arange(nf), side="left")
        hi = np.searchsorted(fs, np.arange(nf), side="right")
        if np.any(hi - lo > 2) or np.any(hi - lo < 1):
            raise MeshError("non-manifold facet produced during construction")
        facet_cells = np.full((nf, 2), -1, dtype=np.int64)
        facet_cells[:, 0] = cs[lo]
        two = (hi - lo) == 2
        facet_cells[two, 1] = cs[hi[two] - 1]
        self.facet_cells = facet_cells
        self.wall_facet = facet_cells[:, 1] < 0

        mids = 0.5 * (self.vertices[self.facets[:, 0]] + self.vertices[self.facets[:, 1]])
        self.p2_coords = np.vstack([self.vertices, mids])
        self.cell_p2_nodes = np.hstack(
            [self.cells, len(self.vertices) + self.cell_facets]
        )

        p0 = self.vertices[cells[:, 0]]
        jac = np.empty((len(cells), 2, 2))
        jac[:, :, 0] = self.vertices[cells[:, 1]] - p0
        jac[:, :, 1] = self.vertices[cells[:, 2]] - p0
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0):
            raise MeshError("degenerate or inverted cell in background mesh")
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv /= det[:, None, None]
        self.jac = jac
        self.inv_jac = inv
        self.det = det

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_facets(self):
        return len(self.facets)

    @property
    def n_p2_nodes(self):
        return len(self.p2_coords)

    def facet_length(self, facet_ids=None):
        """Euclidean length of the requested facets (all by default)."""
        f = self.facets if facet_ids is None else self.facets[facet_ids]
        d = self.vertices[f[:, 1]] - self.vertices[f[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def cell_areas(self):
        return 0.5 * self.det


def facet_normal(mesh, facet, from_cell):
    """Unit normal of ``facet`` pointing out of ``from_cell``.

    Raises
    ------
    MeshError
        If the facet is not one of the three facets of ``from_cell``.
    """
    locals_ = mesh.cell_facets[from_cell]
    hit = np.nonzero(locals_ == facet)[0]
    if hit.size == 0:
        raise MeshError(
            "facet %d is not adjacent to cell %d" % (facet, from_cell)
        )
    a, b = mesh.facets[facet]
    t = mesh.vertices[b] - mesh.vertices[a]
    nrm = np.array([t[1], -t[0]]) / np.hypot(t[0], t[1])
    # orient away from the vertex opposite the facet
    opp = mesh.vertices[mesh.cells[from_cell, hit[0]]]
    mid = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
    if np.dot(nrm, mid - opp) < 0:
        nrm = -nrm
    return nrm


def facet_normals(mesh, facet_ids, from_cells):
    """Vectorised :func:`facet_normal` for index arrays."""
    facet_ids = np.asarray(facet_ids)
    from_cells = np.asarray(from_cells)
    a = mesh.facets[facet_ids, 0]
    b = mesh.facets[facet_ids, 1]
    t = mesh.vertices[b] - mesh.vertices[a]
    length = np.hypot(t[:, 0], t[:, 1])
    nrm = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    mid = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
    match = mesh.cell_facets[from_cells] == facet_ids[:, None]
    if not np.all(match.sum(axis=1) == 1):
        raise MeshError("facet/cell adjacency mismatch in facet_normals")
    local = np.argmax(match, axis=1)
    opp = mesh.vertices[mesh.cells[from_cells, local]]
    flip = np.einsum("fi,fi->f", nrm, mid - opp) < 0
    nrm[flip] = -nrm[flip]
    return nrm


def locate_cell(mesh, point):
    """Cell containing ``point``, with ties broken toward the lower cell id.

    Points on shared edges or vertices belong to the adjacent cell with the
    smallest id; this makes point location deterministic, which the
    self-convergence comparison relies on.
    """
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    out = locate_cells(mesh, pts)
    return int(out[0]) if np.ndim(point) == 1 else out


def locate_cells(mesh, points):
    """Vectorised point location for an (m, 2) array of points."""
    points = np.asarray(points, dtype=float)
    n = mesh.n
    eps = 1e-12
    if np.any(points < -eps) or np.any(points > 1.0 + eps):
        raise MeshError("point outside the unit square")
    x = np.clip(points[:, 0], 0.0, 1.0)
    y = np.clip(points[:, 1], 0.0, 1.0)
    # ceil(x*n) - 1 sends grid-line points to the lower-index square
    i = np.clip(np.ceil(x * n).astype(np.int64) - 1, 0, n - 1)
    j = np.clip(np.ceil(y * n).astype(np.int64) - 1, 0, n - 1)
    xi = x * n - i
    eta = y * n - j
    # lower triangle covers eta <= xi; the diagonal belongs to it (lower id)
    upper = eta > xi
    return 2 * (j * n + i) + upper


def reference_coords(mesh, cells, points):
    """Map physical ``points`` into the reference triangle of ``cells``."""
    cells = np.asarray(cells)
    d = np.asarray(points, dtype=float) - mesh.vertices[mesh.cells[cells, 0]]
    return np.einsum("cab,cb->ca", mesh.inv_jac[cells], d)
