"""Immersed geometry: level set, cut-off profile, and mesh classification.

The disk is described implicitly by a level set that is positive inside the
solid and negative in the fluid.  Both the level set and the radial cut-off
enter the discrete scheme only through their degree-2 nodal interpolants, so
this module also owns the scalar P2 field container.

Classification follows the vertex-sign rule: a background cell is *active*
(kept in the computational mesh) when the level set is <= 0 at one of its
vertices, and *cut* when additionally >= 0 at one of its vertices.  The rule
is deliberately cheap and slightly generous — active cells may stick into
the solid by up to one cell layer, which the ghost stabilisation is there
to control.
"""

from dataclasses import dataclass, field

import numpy as np

from .basis import ReferenceBasis


class GeometryError(Exception):
    """Raised when the immersed geometry is incompatible with the mesh."""


@dataclass
class LevelSet:
    """Quadratic level set of a disk: positive inside, zero on the circle.

    phi(x, y) = radius^2 - (x - cx)^2 - (y - cy)^2
    """

    radius: float = 0.21
    center: tuple = (0.5, 0.5)

    def __call__(self, x, y):
        cx, cy = self.center
        return self.radius ** 2 - (np.asarray(x) - cx) ** 2 - (np.asarray(y) - cy) ** 2

    def gradient(self, x, y):
        cx, cy = self.center
        return np.stack(
            [-2.0 * (np.asarray(x) - cx), -2.0 * (np.asarray(y) - cy)], axis=-1
        )


class CutoffProfile:
    """C^2 radial cut-off: identically 1 up to ``r0``, identically 0 from
    ``r1`` on, and the unique quintic in between with matching value and
    first two derivatives at both ends.

    The quintic coefficients are obtained by solving the 6x6 Hermite
    interpolation system in the monomial basis.
    """

    def __init__(self, r0, r1):
        if not (0.0 < r0 < r1):
            raise GeometryError("cut-off radii must satisfy 0 < r0 < r1")
        self.r0 = float(r0)
        self.r1 = float(r1)
        self.coeffs = self._solve_hermite(self.r0, self.r1)

    @staticmethod
    def _solve_hermite(r0, r1):
        powers = np.arange(6)
        rows = []
        for r in (r0, r1):
            rows.append(r ** powers)
            rows.append(powers * r ** np.maximum(powers - 1, 0))
            rows.append(powers * (powers - 1) * r ** np.maximum(powers - 2, 0))
        A = np.array(rows)
        b = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        return np.linalg.solve(A, b)

    def value(self, r):
        r = np.asarray(r, dtype=float)
        # evaluate the quintic everywhere, then clamp the flat parts
        mid = np.polynomial.polynomial.polyval(r, self.coeffs)
        out = np.where(r <= self.r0, 1.0, np.where(r >= self.r1, 0.0, mid))
        return out if out.ndim else float(out)

    def __call__(self, r):
        return self.value(r)


@dataclass
class ScalarP2Field:
    """Continuous piecewise-quadratic scalar field given by nodal values."""

    mesh: object
    coeffs: np.ndarray

    _basis: ReferenceBasis = field(default_factory=lambda: ReferenceBasis(2), repr=False)

    def cell_coeffs(self, cells):
        return self.coeffs[self.mesh.cell_p2_nodes[np.asarray(cells)]]

    def values_at(self, cells, ref_points):
        """Field values at per-cell reference points.

        ``ref_points`` has shape (m, q, 2) for m cells; returns (m, q).
        """
        cells = np.asarray(cells)
        rp = np.asarray(ref_points)
        N = self._basis.values(rp.reshape(-1, 2)).reshape(rp.shape[0], rp.shape[1], 6)
        return np.einsum("mqi,mi->mq", N, self.cell_coeffs(cells))

    def gradients_at(self, cells, ref_points):
        """Physical gradients at per-cell reference points -> (m, q, 2)."""
        cells = np.asarray(cells)
        rp = np.asarray(ref_points)
        G = self._basis.gradients(rp.reshape(-1, 2)).reshape(
            rp.shape[0], rp.shape[1], 6, 2
        )
        Gx = np.einsum("mqib,mba->mqia", G, self.mesh.inv_jac[cells])
        return np.einsum("mqia,mi->mqa", Gx, self.cell_coeffs(cells))


def interpolate_p2(mesh, fn):
    """Nodal degree-2 interpolant of ``fn(x, y)`` on the whole background
    mesh.  ``fn`` must accept numpy arrays.  Exact whenever ``fn`` is a
    polynomial of degree <= 2, in particular for the disk level set."""
    xy = mesh.p2_coords
    vals = np.asarray(fn(xy[:, 0], xy[:, 1]), dtype=float)
    if vals.shape != (mesh.n_p2_nodes,):
        raise GeometryError("interpolated function must return one value per node")
    return ScalarP2Field(mesh, vals)


def cutoff_field(mesh, profile, center=(0.5, 0.5)):
    """Nodal degree-2 interpolant of the radial cut-off about ``center``.

    Refuses geometries where the cut-off support reaches the outer wall,
    because the rigid-velocity extension must vanish there.
    """
    cx, cy = center
    wall_dist = min(cx, 1.0 - cx, cy, 1.0 - cy)
    if profile.r1 >= wall_dist:
        raise GeometryError(
            "cut-off outer radius %.3f reaches the wall (distance %.3f)"
            % (profile.r1, wall_dist)
        )
    xy = mesh.p2_coords
    r = np.hypot(xy[:, 0] - cx, xy[:, 1] - cy)
    return ScalarP2Field(mesh, profile.value(r))


@dataclass
class DomainClassification:
    """Outcome of the vertex-sign sweep over the background mesh.

    Attributes
    ----------
    active_cells : sorted int array of cells kept in the computational mesh
    cut_cells : sorted int array of active cells crossed by the interface
    ghost_facets : int array of interior facets (both cells active) touching
        at least one cut cell; jumps are penalised across these
    interface_facets : int array of facets forming the internal boundary of
        the active mesh (exactly one adjacent cell active, not on the wall)
    interface_cells : the active cell adjacent to each interface facet
    wall_facets : facets on the outer boundary (all of them, since the solid
        must stay away from the wall)
    is_active, is_cut : boolean masks over all cells
    """

    active_cells: np.ndarray
    cut_cells: np.ndarray
    ghost_facets: np.ndarray
    interface_facets: np.ndarray
    interface_cells: np.ndarray
    wall_facets: np.ndarray
    is_active: np.ndarray
    is_cut: np.ndarray

    @property
    def n_active(self):
        return len(self.active_cells)

    @property
    def n_cut(self):
        return len(self.cut_cells)

    def summary(self):
        return {
            "cells": len(self.is_active),
            "active": int(self.is_active.sum()),
            "cut": int(self.is_cut.sum()),
            "discarded": int((~self.is_active).sum()),
            "ghost_facets": len(self.ghost_facets),
            "interface_facets": len(self.interface_facets),
        }


def classify(mesh, phi):
    """Split the background mesh by the sign of ``phi`` at the vertices.

    Parameters
    ----------
    phi : callable
        Analytic level set ``phi(x, y)``, positive in the solid.

    Raises
    ------
    GeometryError
        If no cell is active, or if the discarded (solid) region reaches
        the outer wall.
    """
    v = mesh.vertices
    sign = np.asarray(phi(v[:, 0], v[:, 1]))
    cell_sign = sign[mesh.cells]  # (nc, 3)
    is_active = np.any(cell_sign <= 0.0, axis=1)
    is_cut = is_active & np.any(cell_sign >= 0.0, axis=1)
    if not is_active.any():
        raise GeometryError("active mesh is empty: level set positive everywhere")

    wall = np.nonzero(mesh.wall_facet)[0]
    if not is_active[mesh.facet_cells[wall, 0]].all():
        raise GeometryError("solid region touches the outer wall")

    c0 = mesh.facet_cells[:, 0]
    c1 = mesh.facet_cells[:, 1]
    interior = c1 >= 0
    both_active = interior & is_active[c0] & is_active[c1]
    ghost = both_active & (is_cut[c0] | is_cut[c1])

    one_active = interior & (is_active[c0] ^ is_active[c1])
    interface = np.nonzero(one_active)[0]
    interface_cells = np.where(
        is_active[c0[interface]], c0[interface], c1[interface]
    )

    return DomainClassification(
        active_cells=np.nonzero(is_active)[0],
        cut_cells=np.nonzero(is_cut)[0],
        ghost_facets=np.nonzero(ghost)[0],
        interface_facets=interface,
        interface_cells=interface_cells,
        wall_facets=wall,
        is_active=is_active,
        is_cut=is_cut,
    )
