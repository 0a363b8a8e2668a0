"""Lagrange reference bases, quadrature rules and degree-of-freedom maps.

The scheme needs second derivatives of the degree-2 shape functions (the
stabilisation integrates the strong momentum residual), so the reference
basis tabulates values, gradients and the constant-per-function Hessians.
Triangle quadrature uses symmetric rules with strictly positive weights;
facet quadrature uses Gauss-Legendre points mapped to the unit interval.
"""

from dataclasses import dataclass
from math import factorial

import numpy as np

from .mesh import MeshError


# ---------------------------------------------------------------------------
# reference bases on the unit triangle {xi >= 0, eta >= 0, xi + eta <= 1}
# ---------------------------------------------------------------------------

_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # barycentric grads


class ReferenceBasis:
    """Scalar Lagrange basis (degree 1 or 2) on the reference triangle.

    Degree-2 node order: the three vertices (0,0), (1,0), (0,1), then the
    edge midpoints opposite each vertex, matching the mesh-wide numbering
    (all vertices first, then facet midpoints with facet k opposite vertex k).
    """

    def __init__(self, degree):
        if degree not in (1, 2):
            raise ValueError("only degrees 1 and 2 are tabulated")
        self.degree = degree
        if degree == 1:
            self.nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        else:
            self.nodes = np.array(
                [
                    [0.0, 0.0],
                    [1.0, 0.0],
                    [0.0, 1.0],
                    [0.5, 0.5],
                    [0.0, 0.5],
                    [0.5, 0.0],
                ]
            )

    @property
    def n_functions(self):
        return len(self.nodes)

    def values(self, points):
        """Tabulate all shape functions at reference ``points`` -> (m, nfn)."""
        pts = np.atleast_2d(points)
        L = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
        if self.degree == 1:
            return L
        out = np.empty((len(pts), 6))
        out[:, :3] = L * (2.0 * L - 1.0)
        out[:, 3] = 4.0 * L[:, 1] * L[:, 2]
        out[:, 4] = 4.0 * L[:, 2] * L[:, 0]
        out[:, 5] = 4.0 * L[:, 0] * L[:, 1]
        return out

    def gradients(self, points):
        """Reference gradients -> (m, nfn, 2)."""
        pts = np.atleast_2d(points)
        m = len(pts)
        if self.degree == 1:
            return np.broadcast_to(_DL, (m, 3, 2)).copy()
        L = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
        out = np.empty((m, 6, 2))
        for k in range(3):
            out[:, k] = (4.0 * L[:, k, None] - 1.0) * _DL[k]
        out[:, 3] = 4.0 * (L[:, 1, None] * _DL[2] + L[:, 2, None] * _DL[1])
        out[:, 4] = 4.0 * (L[:, 2, None] * _DL[0] + L[:, 0, None] * _DL[2])
        out[:, 5] = 4.0 * (L[:, 0, None] * _DL[1] + L[:, 1, None] * _DL[0])
        return out

    def hessians(self):
        """Constant reference Hessians -> (nfn, 2, 2); zero for degree 1."""
        if self.degree == 1:
            return np.zeros((3, 2, 2))
        out = np.empty((6, 2, 2))
        for k in range(3):
            out[k] = 4.0 * np.outer(_DL[k], _DL[k])
        out[3] = 4.0 * (np.outer(_DL[1], _DL[2]) + np.outer(_DL[2], _DL[1]))
        out[4] = 4.0 * (np.outer(_DL[2], _DL[0]) + np.outer(_DL[0], _DL[2]))
        out[5] = 4.0 * (np.outer(_DL[0], _DL[1]) + np.outer(_DL[1], _DL[0]))
        return out


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass
class QuadratureRule:
    """Points (reference coordinates) and weights; weights sum to the
    reference measure (1/2 for the triangle, 1 for the unit interval)."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


def _sym_orbits(entries):
    """Expand (multiplicity, weight, coords) symmetric-orbit entries into
    explicit barycentric points on the triangle."""
    pts, wts = [], []
    for mult, w, args in entries:
        if mult == 1:
            orbit = [(1 / 3, 1 / 3, 1 / 3)]
        elif mult == 3:
            a = args[0]
            b = 1.0 - 2.0 * a
            orbit = [(a, a, b), (a, b, a), (b, a, a)]
        else:  # mult == 6
            a, b = args
            c = 1.0 - a - b
            orbit = [
                (a, b, c), (a, c, b), (b, a, c),
                (b, c, a), (c, a, b), (c, b, a),
            ]
        for lam in orbit:
            pts.append((lam[1], lam[2]))  # (xi, eta) from barycentric
            wts.append(w)
    return np.array(pts), 0.5 * np.array(wts)  # weights given vs. unit area


# Symmetric triangle rules with positive weights (Dunavant 1985 family).
# Weights below are with respect to unit total area; _sym_orbits rescales
# to the reference-triangle measure 1/2.
_TRIANGLE_RULES = {
    1: [(1, 1.0, ())],
    2: [(3, 1.0 / 3.0, (1.0 / 6.0,))],
    4: [
        (3, 0.223381589678011, (0.445948490915965,)),
        (3, 0.109951743655322, (0.091576213509771,)),
    ],
    5: [
        (1, 0.225, ()),
        (3, 0.132394152788506, (0.470142064105115,)),
        (3, 0.125939180544827, (0.101286507323456,)),
    ],
    6: [
        (3, 0.116786275726379, (0.249286745170910,)),
        (3, 0.050844906370207, (0.063089014491502,)),
        (6, 0.082851075618374, (0.053145049844817, 0.310352451033784)),
    ],
    8: [
        (1, 0.144315607677787, ()),
        (3, 0.095091634413923, (0.459292588292723,)),
        (3, 0.103217370534718, (0.170569307751760,)),
        (3, 0.032458497623198, (0.050547228317031,)),
        (6, 0.027230314174435, (0.008394777409958, 0.263112829634638)),
    ],
    10: [
        (1, 0.090817990382754, ()),
        (3, 0.036725957756467, (0.485577633383657,)),
        (3, 0.045321059435528, (0.109481575485037,)),
        (6, 0.072757916845420, (0.141707219414880, 0.307939838764121)),
        (6, 0.028327242531057, (0.025003534762686, 0.246672560639903)),
        (6, 0.009421666963733, (0.009540815400299, 0.066803251012200)),
    ],
}


def triangle_rule(degree):
    """Smallest tabulated symmetric triangle rule exact to ``degree``."""
    for d in sorted(_TRIANGLE_RULES):
        if d >= degree:
            pts, wts = _sym_orbits(_TRIANGLE_RULES[d])
            return QuadratureRule(pts, wts, d)
    raise ValueError("no tabulated triangle rule of degree %d" % degree)


def segment_rule(n_points=5):
    """Gauss-Legendre rule on [0, 1]; ``n_points`` points integrate
    polynomials of degree ``2*n_points - 1`` exactly."""
    x, w = np.polynomial.legendre.leggauss(n_points)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, 2 * n_points - 1)


def monomial_integral(a, b):
    """Exact ``\\int_T xi^a eta^b`` over the reference triangle (test oracle)."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)


# ---------------------------------------------------------------------------
# physical-frame tabulation
# ---------------------------------------------------------------------------

def map_basis(mesh, cell, basis, points):
    """Push reference tabulations of ``basis`` to physical ``cell``.

    Returns ``(values, gradients, hessians)`` with shapes ``(m, nfn)``,
    ``(m, nfn, 2)`` and ``(nfn, 2, 2)``; the Hessians are constant per
    function because the cell map is affine.
    """
    if cell < 0 or cell >= mesh.n_cells:
        raise MeshError("cell id %d out of range" % cell)
    vals = basis.values(points)
    gref = basis.gradients(points)
    inv = mesh.inv_jac[cell]
    grads = np.einsum("mib,ba->mia", gref, inv)
    hess = np.einsum("ca,icd,db->iab", inv, basis.hessians(), inv)
    return vals, grads, hess


# ---------------------------------------------------------------------------
# dof maps on the active part of the mesh
# ---------------------------------------------------------------------------

@dataclass
class DofMap:
    """Global numbering of the unconstrained unknowns of one field.

    ``node_dof`` maps each background node to its dof id, with -1 for nodes
    that are constrained (wall) or not covered by the active mesh.  For the
    vector-valued velocity the layout is all x-components first, then all
    y-components, so the dof of component ``c`` at node ``v`` is
    ``node_dof[v] + c * n_free_nodes``.
    """

    field: str
    n_components: int
    n_free_nodes: int
    node_dof: np.ndarray
    cell_dofs: np.ndarray  # (n_active, nfn * n_components), -1 = constrained
    active_cells: np.ndarray

    @property
    def n_dofs(self):
        return self.n_components * self.n_free_nodes


def _wall_node_mask(mesh):
    """Boolean mask over all degree-2 nodes lying on the outer boundary.

    Determined from index arithmetic (grid position for vertices, wall
    facets for midpoints), so no floating-point comparisons are involved.
    """
    n = mesh.n
    nv = mesh.n_vertices
    mask = np.zeros(mesh.n_p2_nodes, dtype=bool)
    idx = np.arange(nv)
    i = idx % (n + 1)
    j = idx // (n + 1)
    mask[:nv] = (i == 0) | (i == n) | (j == 0) | (j == n)
    mask[nv:] = mesh.wall_facet
    return mask


def build_dofmap(mesh, classification, field):
    """Number the free nodes of ``field`` ("velocity" or "pressure") over the
    active cells of ``classification`` (an index array also works).

    Velocity uses the degree-2 nodes of the active cells with the wall nodes
    removed (the outer boundary is mesh-fitted, so the Dirichlet condition
    is imposed by eliminating those rows and columns).  Pressure uses the
    vertices of the active cells with no constraint.
    """
    active_cells = getattr(classification, "active_cells", classification)
    active_cells = np.asarray(active_cells)
    if field == "velocity":
        cells_nodes = mesh.cell_p2_nodes[active_cells]
        n_nodes = mesh.n_p2_nodes
        constrained = _wall_node_mask(mesh)
        n_comp = 2
    elif field == "pressure":
        cells_nodes = mesh.cells[active_cells]
        n_nodes = mesh.n_vertices
        constrained = np.zeros(n_nodes, dtype=bool)
        n_comp = 1
    else:
        raise ValueError("unknown field %r" % field)

    covered = np.zeros(n_nodes, dtype=bool)
    covered[cells_nodes.ravel()] = True
    free = covered & ~constrained
    node_dof = np.full(n_nodes, -1, dtype=np.int64)
    node_dof[free] = np.arange(free.sum())

    local = node_dof[cells_nodes]  # (n_active, nfn)
    if n_comp == 2:
        shift = np.where(local >= 0, free.sum(), 0)
        cell_dofs = np.concatenate([local, local + shift], axis=1)
    else:
        cell_dofs = local
    return DofMap(
        field=field,
        n_components=n_comp,
        n_free_nodes=int(free.sum()),
        node_dof=node_dof,
        cell_dofs=cell_dofs,
        active_cells=active_cells,
    )
