"""Assembly of the immersed Stokes and particulate flow systems.

Both schemes look for the velocity in a "composite" form built from the
level-set and cut-off interpolants,

    u_h = u_D,h + phi_h w_h                        (prescribed-data case)
    u_h = phi_h w_h + chi_h (U + psi x r)          (free-particle case)

so every trial and test function is a product of interpolants and standard
shape functions.  All derivatives of these products are expanded by product
rules per cell (never by numerical differentiation), and every integrand is
a polynomial of degree <= 8 per cell, integrated exactly by the degree-8
triangle rule / 5-point Gauss facet rule.

The assembled blocks:

* viscous, pressure-coupling and incompressibility terms over the active
  cells;
* a consistency term on the internal boundary of the active mesh (tested
  against the phi-composite functions only);
* ghost penalties on first and second normal derivatives across the facets
  around the cut layer;
* a least-squares penalty on the strong momentum residual and on the
  divergence over the cut cells (the momentum test combination carries
  -nu*Lap(v) - grad(q), which makes the matrix deliberately nonsymmetric);
* a symmetric Lagrange-multiplier row/column pinning the pressure mean;
* for the particulate scheme, three extra unknowns (translation U and
  angular rate psi) whose gravity load integrates the cut-off over the
  whole background box, plus the reduced-gravity load (1 - rho_f/rho_s) m g.

Known data (the Dirichlet lift) is never a system unknown: its
contributions are evaluated field-wise at the quadrature points and moved
to the right-hand side.
"""

from dataclasses import dataclass

import numpy as np

from .basis import ReferenceBasis, build_dofmap, segment_rule, triangle_rule
from .linalg import SparseMatrix
from .mesh import facet_normals

_P1 = ReferenceBasis(1)
_P2 = ReferenceBasis(2)

#: spin generator: grad of (-(y-cy), (x-cx))
_SPIN = np.array([[0.0, -1.0], [1.0, 0.0]])


class AssemblyError(Exception):
    """Raised for geometric or data problems detected during assembly."""


# ---------------------------------------------------------------------------
# layout and result containers
# ---------------------------------------------------------------------------

@dataclass
class SystemLayout:
    """Position of each unknown block inside the monolithic system.

    Order: velocity (x-components then y-components of the free nodes),
    pressure, then for the particulate scheme U_x, U_y, psi, and finally
    the pressure-mean multiplier.
    """

    n_free_velocity_nodes: int
    n_pressure: int
    rigid: bool

    @property
    def n_velocity(self):
        return 2 * self.n_free_velocity_nodes

    @property
    def pressure_offset(self):
        return self.n_velocity

    @property
    def rigid_offset(self):
        return self.n_velocity + self.n_pressure

    @property
    def multiplier_index(self):
        return self.rigid_offset + (3 if self.rigid else 0)

    @property
    def size(self):
        return self.multiplier_index + 1

    def velocity_part(self, vec):
        return vec[: self.n_velocity]

    def pressure_part(self, vec):
        return vec[self.pressure_offset : self.pressure_offset + self.n_pressure]

    def rigid_part(self, vec):
        if not self.rigid:
            return np.zeros(3)
        return vec[self.rigid_offset : self.rigid_offset + 3]


@dataclass
class AssembledSystem:
    matrix: SparseMatrix
    rhs: np.ndarray
    layout: SystemLayout
    velocity_dofmap: object
    pressure_dofmap: object
    params: dict


@dataclass
class StokesData:
    """Data for the prescribed-boundary scheme: body force, boundary
    velocity (analytic, interpolated to vector P2 before assembly),
    viscosity and the two stabilisation weights."""

    forcing: object
    dirichlet: object
    nu: float = 1.0
    sigma: float = 20.0
    sigma_u: float = 20.0


@dataclass
class ParticulateData:
    """Data for the freely moving particle: fluid/solid densities, gravity,
    particle center/radius (mass = rho_s * pi * radius^2), viscosity and
    stabilisation weights."""

    nu: float = 1.0
    rho_f: float = 1.0
    rho_s: float = 2.0
    gravity: tuple = (0.0, -10.0)
    center: tuple = (0.5, 0.5)
    radius: float = 0.21
    sigma: float = 20.0
    sigma_u: float = 20.0

    @property
    def mass(self):
        return self.rho_s * np.pi * self.radius ** 2


# ---------------------------------------------------------------------------
# tabulation of the composite basis
# ---------------------------------------------------------------------------

@dataclass
class CellTables:
    """Geometry + shape tables for a batch of cells at per-cell reference
    points; produced by CompositeVelocityBasis.tabulate."""

    cells: np.ndarray          # (m,)
    ref: np.ndarray            # (m, q, 2)
    x: np.ndarray              # (m, q, 2) physical points
    N: np.ndarray              # (m, q, 6) scalar P2 values
    G: np.ndarray              # (m, q, 6, 2) physical gradients
    H: np.ndarray              # (m, 6, 2, 2) physical Hessians (constant)
    pv: np.ndarray             # (m, q, 3) P1 values
    pg: np.ndarray             # (m, 3, 2) P1 gradients (constant)
    # composite scalar modes beta_i = phi_h * N_i
    b: np.ndarray              # (m, q, 6)
    bg: np.ndarray             # (m, q, 6, 2)
    blap: np.ndarray = None    # (m, q, 6) when second derivatives requested
    # level-set tables
    fv: np.ndarray = None      # (m, q)
    fg: np.ndarray = None      # (m, q, 2)
    fH: np.ndarray = None      # (m, 2, 2)
    # rigid generators chi*e_x, chi*e_y, chi*rot (particulate only)
    rv: np.ndarray = None      # (m, q, 3, 2) values
    rj: np.ndarray = None      # (m, q, 3, 2, 2) gradients d_c (chi M)_b
    rdiv: np.ndarray = None    # (m, q, 3)
    rlap: np.ndarray = None    # (m, q, 3, 2)
    cv: np.ndarray = None      # (m, q) cut-off values
    cg: np.ndarray = None      # (m, q, 2)
    cH: np.ndarray = None      # (m, 2, 2)
    # volume extras
    wdet: np.ndarray = None    # (m, q) quadrature weights x jacobian
    # facet extras
    normals: np.ndarray = None  # (f, 2)
    length: np.ndarray = None   # (f,)
    wlen: np.ndarray = None     # (f, q) weights x facet length
    d1n: np.ndarray = None      # (f, q, 6) normal derivative of beta_i
    d2n: np.ndarray = None      # (f, q, 6) second normal derivative
    rd1n: np.ndarray = None     # (f, q, 3, 2)
    rd2n: np.ndarray = None     # (f, q, 3, 2)


class CompositeVelocityBasis:
    """Product-rule tabulation of the composite velocity modes.

    Per active cell the velocity trial/test space is spanned by the twelve
    modes ``phi_h N_i e_a`` (scalar degree-2 shape functions times the
    level-set interpolant, per component) and — when a cut-off field is
    attached — by the three rigid generators ``chi_h e_x``, ``chi_h e_y``
    and ``chi_h (-(y-c_y), x-c_x)``.  Values, gradients, divergences and
    Laplacians all come from expanding the products analytically; the
    second derivatives of the interpolants are taken cellwise.
    """

    def __init__(self, mesh, phi, chi=None, center=(0.5, 0.5)):
        self.mesh = mesh
        self.phi = phi
        self.chi = chi
        self.center = np.asarray(center, dtype=float)

    def rotation(self, x):
        """Spin mode (-(y-c_y), x-c_x) at physical points (..., 2)."""
        r = np.asarray(x) - self.center
        return np.stack([-r[..., 1], r[..., 0]], axis=-1)

    def _scalar_field_tables(self, coeffs, tab):
        """Value/gradient/Hessian tables of one scalar P2 field."""
        loc = coeffs[self.mesh.cell_p2_nodes[tab.cells]]  # (m, 6)
        v = np.einsum("mqi,mi->mq", tab.N, loc)
        g = np.einsum("mqia,mi->mqa", tab.G, loc)
        Hc = np.einsum("miab,mi->mab", tab.H, loc)
        return v, g, Hc

    def tabulate(self, cells, ref_points, second=False):
        """Tabulate everything on ``cells`` at ``ref_points`` (m, q, 2)."""
        mesh = self.mesh
        cells = np.asarray(cells)
        rp = np.asarray(ref_points)
        m, q = rp.shape[0], rp.shape[1]
        flat = rp.reshape(-1, 2)
        N = _P2.values(flat).reshape(m, q, 6)
        Gref = _P2.gradients(flat).reshape(m, q, 6, 2)
        inv = mesh.inv_jac[cells]
        G = np.einsum("mqib,mba->mqia", Gref, inv)
        H = np.einsum("mca,icd,mdb->miab", inv, _P2.hessians(), inv)
        pv = _P1.values(flat).reshape(m, q, 3)
        pg = np.einsum("ib,mba->mia", _P1.gradients(np.zeros((1, 2)))[0], inv)
        v0 = mesh.vertices[mesh.cells[cells, 0]]
        x = v0[:, None, :] + np.einsum("mab,mqb->mqa", mesh.jac[cells], rp)

        tab = CellTables(cells=cells, ref=rp, x=x, N=N, G=G, H=H, pv=pv, pg=pg,
                         b=None, bg=None)
        fv, fg, fH = self._scalar_field_tables(self.phi.coeffs, tab)
        tab.fv, tab.fg, tab.fH = fv, fg, fH
        tab.b = fv[:, :, None] * N
        tab.bg = fv[:, :, None, None] * G + N[:, :, :, None] * fg[:, :, None, :]
        if second:
            lapN = H[:, :, 0, 0] + H[:, :, 1, 1]          # (m, 6)
            flap = fH[:, 0, 0] + fH[:, 1, 1]              # (m,)
            tab.blap = (
                fv[:, :, None] * lapN[:, None, :]
                + 2.0 * np.einsum("mqa,mqia->mqi", fg, G)
                + N * flap[:, None, None]
            )
        if self.chi is not None:
            cv, cg, cH = self._scalar_field_tables(self.chi.coeffs, tab)
            tab.cv, tab.cg, tab.cH = cv, cg, cH
            rot = self.rotation(x)                         # (m, q, 2)
            M = np.zeros((m, q, 3, 2))
            M[:, :, 0, 0] = 1.0
            M[:, :, 1, 1] = 1.0
            M[:, :, 2] = rot
            tab.rv = cv[:, :, None, None] * M
            rj = np.einsum("mq,rbc->mqrbc", cv, np.stack([np.zeros((2, 2)),
                                                          np.zeros((2, 2)),
                                                          _SPIN]))
            rj = rj + np.einsum("mqrb,mqc->mqrbc", M, cg)
            tab.rj = rj
            # div(chi M) = M . grad(chi) (the generators are divergence-free)
            tab.rdiv = np.einsum("mqrb,mqb->mqr", M, cg)
            if second:
                clap = cH[:, 0, 0] + cH[:, 1, 1]
                rlap = M * clap[:, None, None, None]
                rlap = rlap + 2.0 * np.einsum("rbc,mqc->mqrb",
                                              np.stack([np.zeros((2, 2)),
                                                        np.zeros((2, 2)),
                                                        _SPIN]), cg)
                tab.rlap = rlap
        return tab

    def volume_tables(self, cells, rule, second=False):
        """Tabulate at shared quadrature points; adds integration weights
        ``wdet`` (m, q) with sum(w * det) = cell area."""
        cells = np.asarray(cells)
        m = len(cells)
        q = len(rule.weights)
        rp = np.broadcast_to(rule.points, (m, q, 2))
        tab = self.tabulate(cells, rp, second=second)
        tab.wdet = rule.weights[None, :] * self.mesh.det[cells][:, None]
        return tab

    def facet_tables(self, facets, cells, srule, normals, second=False):
        """Tabulate on one cell-side of each facet at mapped segment points.

        Adds facet lengths ``length`` (f,), unit ``normals`` (f, 2) as
        given, weights ``wlen`` (f, q) with sum = facet length, and the
        normal-derivative tables ``d1n``/``d2n`` of the composite modes
        (and of the rigid generators when present).
        """
        mesh = self.mesh
        facets = np.asarray(facets)
        cells = np.asarray(cells)
        t = srule.points
        p0 = mesh.vertices[mesh.facets[facets, 0]]
        p1 = mesh.vertices[mesh.facets[facets, 1]]
        x = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
        v0 = mesh.vertices[mesh.cells[cells, 0]]
        ref = np.einsum("fab,fqb->fqa", mesh.inv_jac[cells], x - v0[:, None, :])
        tab = self.tabulate(cells, ref, second=second)
        n = np.asarray(normals)
        tab.normals = n
        tab.length = mesh.facet_length(facets)
        tab.wlen = srule.weights[None, :] * tab.length[:, None]
        tab.d1n = np.einsum("fqia,fa->fqi", tab.bg, n)
        if second:
            # d2n(beta_i) = n.H(beta_i).n expanded by the product rule
            h2N = np.einsum("fa,fiab,fb->fi", n, tab.H, n)
            Gn = np.einsum("fqia,fa->fqi", tab.G, n)
            fgn = np.einsum("fqa,fa->fq", tab.fg, n)
            fHnn = np.einsum("fa,fab,fb->f", n, tab.fH, n)
            tab.d2n = (
                tab.fv[:, :, None] * h2N[:, None, :]
                + 2.0 * fgn[:, :, None] * Gn
                + tab.N * fHnn[:, None, None]
            )
        if self.chi is not None:
            tab.rd1n = np.einsum("fqrbc,fc->fqrb", tab.rj, n)
            if second:
                cgn = np.einsum("fqa,fa->fq", tab.cg, n)
                cHnn = np.einsum("fa,fab,fb->f", n, tab.cH, n)
                M = np.zeros_like(tab.rv)
                M[:, :, 0, 0] = 1.0
                M[:, :, 1, 1] = 1.0
                M[:, :, 2] = self.rotation(tab.x)
                gMn = np.einsum("rbc,fc->frb",
                                np.stack([np.zeros((2, 2)), np.zeros((2, 2)),
                                          _SPIN]), n)
                tab.rd2n = (2.0 * cgn[:, :, None, None] * gMn[:, None, :, :]
                            + M * cHnn[:, None, None, None])
        return tab


def known_field_tables(mesh, coeffs, tab):
    """Evaluate a known vector P2 field (n_p2_nodes, 2) on a tabulated batch.

    Returns value (m,q,2), gradient (m,q,2,2) with [b,c] = d_c u_b,
    divergence (m,q) and Laplacian (m,q,2).
    """
    loc = coeffs[mesh.cell_p2_nodes[tab.cells]]            # (m, 6, 2)
    val = np.einsum("mqi,mib->mqb", tab.N, loc)
    grad = np.einsum("mqic,mib->mqbc", tab.G, loc)
    div = grad[:, :, 0, 0] + grad[:, :, 1, 1]
    lapN = tab.H[:, :, 0, 0] + tab.H[:, :, 1, 1]
    lap_const = np.einsum("mi,mib->mb", lapN, loc)
    lap = np.broadcast_to(lap_const[:, None, :], val.shape)
    return val, grad, div, lap


# ---------------------------------------------------------------------------
# block assembler
# ---------------------------------------------------------------------------

def _slots12(arr_jb):
    """Reorder (m, j, b) -> (m, 12) with slot = 6*b + j (component-blocked)."""
    return arr_jb.transpose(0, 2, 1).reshape(arr_jb.shape[0], -1)


class _Assembler:
    """Accumulates triplets and right-hand side for one scheme."""

    CHUNK = 2048

    def __init__(self, mesh, cls, phi, *, nu, sigma, sigma_u, basis):
        self.mesh = mesh
        self.cls = cls
        self.phi = phi
        self.nu = nu
        self.sigma = sigma
        self.sigma_u = sigma_u
        self.basis = basis
        self.rigid = basis.chi is not None

        self.vmap = build_dofmap(mesh, cls, "velocity")
        self.pmap = build_dofmap(mesh, cls, "pressure")
        self.layout = SystemLayout(
            n_free_velocity_nodes=self.vmap.n_free_nodes,
            n_pressure=self.pmap.n_dofs,
            rigid=self.rigid,
        )
        self.rows = []
        self.cols = []
        self.vals = []
        self.rhs = np.zeros(self.layout.size)
        self.vrule = triangle_rule(8)
        self.srule = segment_rule(5)
        # dirichlet lift as a known field, set by the stokes driver
        self.lift = None

    # -- dof helpers -----------------------------------------------------

    def _vel_dofs(self, positions):
        return self.vmap.cell_dofs[positions]              # (m, 12), -1 fixed

    def _pres_dofs(self, positions):
        d = self.pmap.cell_dofs[positions]
        return np.where(d >= 0, d + self.layout.pressure_offset, -1)

    def _rigid_dofs(self, m):
        base = self.layout.rigid_offset
        return np.broadcast_to(np.arange(base, base + 3), (m, 3))

    def _positions(self, cells):
        return np.searchsorted(self.cls.active_cells, cells)

    def _scatter(self, rdofs, cdofs, local):
        """Append local blocks (m, R, C) at (m, R) x (m, C) dof arrays."""
        m, R = rdofs.shape
        C = cdofs.shape[1]
        r = np.broadcast_to(rdofs[:, :, None], (m, R, C))
        c = np.broadcast_to(cdofs[:, None, :], (m, R, C))
        keep = (r >= 0) & (c >= 0)
        self.rows.append(r[keep])
        self.cols.append(c[keep])
        self.vals.append(np.asarray(local)[keep])

    def _add_rhs(self, rdofs, local):
        keep = rdofs >= 0
        np.add.at(self.rhs, rdofs[keep], np.asarray(local)[keep])

    # -- volume terms over the active cells ------------------------------

    def volume_terms(self, forcing):
        cells = self.cls.active_cells
        for start in range(0, len(cells), self.CHUNK):
            batch = cells[start : start + self.CHUNK]
            pos = np.arange(start, start + len(batch))
            self._volume_chunk(batch, pos, forcing)

    def _volume_chunk(self, batch, pos, forcing):
        nu = self.nu
        tab = self.basis.volume_tables(batch, self.vrule)
        w = tab.wdet
        vd = self._vel_dofs(pos)
        pd = self._pres_dofs(pos)
        m = len(batch)

        # 2 nu D(u):D(v): nu * (delta_ab grad.grad + cross term)
        T1 = np.einsum("mq,mqid,mqjd->mij", w, tab.bg, tab.bg)
        X = np.einsum("mq,mqib,mqja->mijab", w, tab.bg, tab.bg)
        visc = np.zeros((m, 12, 12))
        for a in (0, 1):
            for b in (0, 1):
                blk = nu * X[:, :, :, a, b].transpose(0, 2, 1)
                if a == b:
                    blk = blk + nu * T1
                visc[:, 6 * b : 6 * b + 6, 6 * a : 6 * a + 6] = blk
        self._scatter(vd, vd, visc)

        # -int p div(v) and -int q div(u)
        bp = -np.einsum("mq,mqk,mqjb->mjbk", w, tab.pv, tab.bg)
        self._scatter(vd, pd, bp.transpose(0, 2, 1, 3).reshape(m, 12, 3))
        bq = -np.einsum("mq,mql,mqia->mlia", w, tab.pv, tab.bg)
        self._scatter(pd, vd, bq.transpose(0, 1, 3, 2).reshape(m, 3, 12))

        # pressure-mean multiplier row/column
        mloc = np.einsum("mq,mqk->mk", w, tab.pv)
        lam = np.full((m, 1), self.layout.multiplier_index)
        self._scatter(pd, lam, mloc[:, :, None])
        self._scatter(lam, pd, mloc[:, None, :])

        # body force against the phi-composite test functions
        f = np.asarray(forcing(tab.x[..., 0], tab.x[..., 1]))
        if not np.all(np.isfinite(f)):
            raise AssemblyError("body force evaluated to non-finite values")
        rl = np.einsum("mq,mqb,mqj->mjb", w, f, tab.b)
        self._add_rhs(vd, _slots12(rl))

        if self.rigid:
            S = 0.5 * (tab.rj + tab.rj.transpose(0, 1, 2, 4, 3))
            vr = 2.0 * nu * np.einsum("mq,mqrbc,mqjc->mjbr", w, S, tab.bg)
            vr = vr.transpose(0, 2, 1, 3).reshape(m, 12, 3)
            rdofs = self._rigid_dofs(m)
            self._scatter(vd, rdofs, vr)
            self._scatter(rdofs, vd, vr.transpose(0, 2, 1))
            rr = 2.0 * nu * np.einsum("mq,mqrbc,mqsbc->mrs", w, S, S)
            self._scatter(rdofs, rdofs, rr)
            bqr = -np.einsum("mq,mql,mqr->mlr", w, tab.pv, tab.rdiv)
            self._scatter(pd, rdofs, bqr)
            self._scatter(rdofs, pd, bqr.transpose(0, 2, 1))

        if self.lift is not None:
            uval, ugrad, udiv, _ = known_field_tables(self.mesh, self.lift, tab)
            Sd = 0.5 * (ugrad + ugrad.transpose(0, 1, 3, 2))
            corr = 2.0 * nu * np.einsum("mq,mqbc,mqjc->mjb", w, Sd, tab.bg)
            self._add_rhs(vd, -_slots12(corr))
            corrq = -np.einsum("mq,mql,mq->ml", w, tab.pv, udiv)
            self._add_rhs(pd, -corrq)

    # -- least-squares terms over the cut cells ---------------------------

    def cut_terms(self, forcing):
        cut = self.cls.cut_cells
        if len(cut) == 0:
            raise AssemblyError("no cut cells: geometry does not cross the mesh")
        pos = self._positions(cut)
        tab = self.basis.volume_tables(cut, self.vrule, second=True)
        w = tab.wdet
        nu, sig = self.nu, self.sigma
        h2 = sig * self.mesh.h ** 2
        m = len(cut)
        vd = self._vel_dofs(pos)
        pd = self._pres_dofs(pos)

        # momentum residual x momentum test, velocity-velocity part
        L2 = np.einsum("mq,mqi,mqj->mij", w, tab.blap, tab.blap)
        lsm = np.zeros((m, 12, 12))
        for a in (0, 1):
            lsm[:, 6 * a : 6 * a + 6, 6 * a : 6 * a + 6] = h2 * nu * nu * L2
        self._scatter(vd, vd, lsm)

        # velocity test x pressure trial and transpose-with-sign-flip
        vp = -h2 * nu * np.einsum("mq,mkb,mqj->mjbk", w, tab.pg, tab.blap)
        self._scatter(vd, pd, vp.transpose(0, 2, 1, 3).reshape(m, 12, 3))
        pu = h2 * nu * np.einsum("mq,mqi,mla->mlia", w, tab.blap, tab.pg)
        self._scatter(pd, vd, pu.transpose(0, 1, 3, 2).reshape(m, 3, 12))

        # pressure-pressure part (note the minus sign from the test -grad q)
        pp = -h2 * np.einsum("mq,mka,mla->mlk", w, tab.pg, tab.pg)
        self._scatter(pd, pd, pp)

        # divergence penalty
        X = np.einsum("mq,mqia,mqjb->mijab", w, tab.bg, tab.bg)
        dd = np.zeros((m, 12, 12))
        for a in (0, 1):
            for b in (0, 1):
                dd[:, 6 * b : 6 * b + 6, 6 * a : 6 * a + 6] = (
                    sig * X[:, :, :, a, b].transpose(0, 2, 1)
                )
        self._scatter(vd, vd, dd)

        # right-hand side: f against the momentum test combination
        f = np.asarray(forcing(tab.x[..., 0], tab.x[..., 1]))
        rl = -h2 * nu * np.einsum("mq,mqb,mqj->mjb", w, f, tab.blap)
        self._add_rhs(vd, _slots12(rl))
        rp = -h2 * np.einsum("mq,mqa,mla->ml", w, f, tab.pg)
        self._add_rhs(pd, rp)

        if self.rigid:
            rdofs = self._rigid_dofs(m)
            # velocity rows x rigid columns
            vr = h2 * nu * nu * np.einsum("mq,mqrb,mqj->mjbr", w, tab.rlap, tab.blap)
            self._scatter(vd, rdofs, vr.transpose(0, 2, 1, 3).reshape(m, 12, 3))
            rv = h2 * nu * nu * np.einsum("mq,mqi,mqrb->mrib", w, tab.blap, tab.rlap)
            # rigid test rows against velocity trial (i,a): match components
            self._scatter(rdofs, vd, rv.transpose(0, 1, 3, 2).reshape(m, 3, 12))
            # pressure rows x rigid columns and back
            pr = h2 * nu * np.einsum("mq,mqrb,mlb->mlr", w, tab.rlap, tab.pg)
            self._scatter(pd, rdofs, pr)
            rp2 = -h2 * nu * np.einsum("mq,mkb,mqrb->mrk", w, tab.pg, tab.rlap)
            self._scatter(rdofs, pd, rp2)
            # rigid x rigid
            rr = h2 * nu * nu * np.einsum("mq,mqrb,mqsb->mrs", w, tab.rlap, tab.rlap)
            self._scatter(rdofs, rdofs, rr)
            # divergence penalty couplings
            dvr = sig * np.einsum("mq,mqr,mqjb->mjbr", w, tab.rdiv, tab.bg)
            self._scatter(vd, rdofs, dvr.transpose(0, 2, 1, 3).reshape(m, 12, 3))
            drv = sig * np.einsum("mq,mqia,mqs->msia", w, tab.bg, tab.rdiv)
            self._scatter(rdofs, vd, drv.transpose(0, 1, 3, 2).reshape(m, 3, 12))
            drr = sig * np.einsum("mq,mqr,mqs->mrs", w, tab.rdiv, tab.rdiv)
            self._scatter(rdofs, rdofs, drr)
            # rigid-test right-hand side
            rrl = -h2 * nu * np.einsum("mq,mqb,mqrb->mr", w, f, tab.rlap)
            self._add_rhs(rdofs, rrl)

        if self.lift is not None:
            _, _, udiv, ulap = known_field_tables(self.mesh, self.lift, tab)
            corr = h2 * nu * nu * np.einsum("mq,mqb,mqj->mjb", w, ulap, tab.blap)
            self._add_rhs(vd, -_slots12(corr))
            corrp = h2 * nu * np.einsum("mq,mqb,mlb->ml", w, ulap, tab.pg)
            self._add_rhs(pd, -corrp)
            corrd = self.sigma * np.einsum("mq,mq,mqjb->mjb", w, udiv, tab.bg)
            self._add_rhs(vd, -_slots12(corrd))

    # -- consistency term on the internal boundary ------------------------

    def interface_terms(self):
        facets = self.cls.interface_facets
        if len(facets) == 0:
            return
        cells = self.cls.interface_cells
        pos = self._positions(cells)
        normals = facet_normals(self.mesh, facets, cells)
        tab = self.basis.facet_tables(facets, cells, self.srule, normals)
        w = tab.wlen
        nu = self.nu
        n = tab.normals
        f = len(facets)
        vd = self._vel_dofs(pos)
        pd = self._pres_dofs(pos)

        # -2 nu (D(u) n) . (phi s): trial velocity columns
        T1 = -nu * np.einsum("fq,fqi,fqj->fji", w, tab.d1n, tab.b)
        T2 = -nu * np.einsum("fq,fqib,fa,fqj->fjiba", w, tab.bg, n, tab.b)
        gv = np.zeros((f, 12, 12))
        for a in (0, 1):
            for b in (0, 1):
                blk = T2[:, :, :, b, a]
                if a == b:
                    blk = blk + T1
                gv[:, 6 * b : 6 * b + 6, 6 * a : 6 * a + 6] = blk
        self._scatter(vd, vd, gv)

        # + (p n) . (phi s): pressure trial columns
        gp = np.einsum("fq,fqk,fb,fqj->fjbk", w, tab.pv, n, tab.b)
        self._scatter(vd, pd, gp.transpose(0, 2, 1, 3).reshape(f, 12, 3))

        if self.rigid:
            S = 0.5 * (tab.rj + tab.rj.transpose(0, 1, 2, 4, 3))
            Sn = np.einsum("fqrbc,fc->fqrb", S, n)
            gr = -2.0 * nu * np.einsum("fq,fqrb,fqj->fjbr", w, Sn, tab.b)
            self._scatter(vd, self._rigid_dofs(f),
                          gr.transpose(0, 2, 1, 3).reshape(f, 12, 3))

        if self.lift is not None:
            _, ugrad, _, _ = known_field_tables(self.mesh, self.lift, tab)
            Sd = 0.5 * (ugrad + ugrad.transpose(0, 1, 3, 2))
            Sdn = np.einsum("fqbc,fc->fqb", Sd, n)
            corr = -2.0 * nu * np.einsum("fq,fqb,fqj->fjb", w, Sdn, tab.b)
            self._add_rhs(vd, -_slots12(corr))

    # -- ghost penalty across the cut layer --------------------------------

    def ghost_terms(self):
        facets = self.cls.ghost_facets
        if len(facets) == 0:
            return
        mesh = self.mesh
        cplus = mesh.facet_cells[facets, 0]
        cminus = mesh.facet_cells[facets, 1]
        normals = facet_normals(mesh, facets, cplus)
        tp = self.basis.facet_tables(facets, cplus, self.srule, normals, second=True)
        tm = self.basis.facet_tables(facets, cminus, self.srule, normals, second=True)
        f = len(facets)
        q = len(self.srule.weights)
        S = 27 if self.rigid else 24

        d1 = np.zeros((f, q, S, 2))
        d2 = np.zeros((f, q, S, 2))
        dofs = np.full((f, S), -1, dtype=np.int64)
        # slots 0..11: composite modes seen from the lower-index cell (+),
        # slots 12..23: the same modes from the other side with flipped sign,
        # so that pairing any two slots yields a product of two jumps
        for a in (0, 1):
            d1[:, :, 6 * a : 6 * a + 6, a] = tp.d1n
            d1[:, :, 12 + 6 * a : 12 + 6 * a + 6, a] = -tm.d1n
            d2[:, :, 6 * a : 6 * a + 6, a] = tp.d2n
            d2[:, :, 12 + 6 * a : 12 + 6 * a + 6, a] = -tm.d2n
        dofs[:, :12] = self._vel_dofs(self._positions(cplus))
        dofs[:, 12:24] = self._vel_dofs(self._positions(cminus))
        if self.rigid:
            d1[:, :, 24:, :] = tp.rd1n - tm.rd1n
            d2[:, :, 24:, :] = tp.rd2n - tm.rd2n
            dofs[:, 24:] = self._rigid_dofs(f)

        e2 = tp.length ** 2
        e4 = tp.length ** 4
        wq = self.srule.weights
        loc = self.sigma_u * (
            np.einsum("q,f,fqsa,fqta->fst", wq, e2, d1, d1)
            + np.einsum("q,f,fqsa,fqta->fst", wq, e4, d2, d2)
        )
        self._scatter(dofs, dofs, loc)

        if self.lift is not None:
            lp = known_field_tables(self.mesh, self.lift, tp)
            lm = known_field_tables(self.mesh, self.lift, tm)
            n = tp.normals
            j1 = np.einsum("fqbc,fc->fqb", lp[1] - lm[1], n)
            locp = self.lift[mesh.cell_p2_nodes[cplus.astype(np.int64)]]
            locm = self.lift[mesh.cell_p2_nodes[cminus.astype(np.int64)]]
            Hp = np.einsum("fiac,fib->fbac", tp.H, locp)
            Hm = np.einsum("fiac,fib->fbac", tm.H, locm)
            j2c = np.einsum("fa,fbac,fc->fb", n, Hp - Hm, n)  # constant in q
            j2 = np.broadcast_to(j2c[:, None, :], j1.shape)
            corr = self.sigma_u * (
                np.einsum("q,f,fqa,fqta->ft", wq, e2, j1, d1)
                + np.einsum("q,f,fqa,fqta->ft", wq, e4, j2, d2)
            )
            keep = dofs >= 0
            np.add.at(self.rhs, dofs[keep], -corr[keep])

    # -- particulate extras -------------------------------------------------

    def rigid_body_rhs(self, rho_f, rho_s, gravity, mass):
        """Gravity load on the rigid tests: fluid part over the whole
        background box plus the reduced-gravity particle load."""
        g = np.asarray(gravity, dtype=float)
        base = self.layout.rigid_offset
        total = np.zeros(3)
        allcells = np.arange(self.mesh.n_cells)
        for start in range(0, len(allcells), self.CHUNK):
            batch = allcells[start : start + self.CHUNK]
            tab = self.basis.volume_tables(batch, self.vrule)
            total += rho_f * np.einsum("mq,b,mqrb->r", tab.wdet, g, tab.rv)
        total[:2] += (1.0 - rho_f / rho_s) * mass * g
        self.rhs[base : base + 3] += total

    # -- finalize ------------------------------------------------------------

    def build(self, params):
        if self.rows:
            rows = np.concatenate(self.rows)
            cols = np.concatenate(self.cols)
            vals = np.concatenate(self.vals)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        matrix = SparseMatrix.from_triplets(rows, cols, vals, self.layout.size)
        return AssembledSystem(
            matrix=matrix,
            rhs=self.rhs,
            layout=self.layout,
            velocity_dofmap=self.vmap,
            pressure_dofmap=self.pmap,
            params=params,
        )


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def interpolate_dirichlet(mesh, dirichlet):
    """Vector P2 nodal interpolant of the boundary-data field -> (nodes, 2)."""
    xy = mesh.p2_coords
    vals = np.asarray(dirichlet(xy[:, 0], xy[:, 1]), dtype=float)
    if vals.shape != (mesh.n_p2_nodes, 2):
        raise AssemblyError(
            "dirichlet data must return one 2-vector per node, got %s"
            % (vals.shape,)
        )
    if not np.all(np.isfinite(vals)):
        raise AssemblyError("dirichlet data evaluated to non-finite values")
    return vals


def assemble_stokes(mesh, classification, phi, data):
    """Assemble the prescribed-boundary scheme.

    Unknowns: the composite velocity coefficients w, the pressure p, and
    the pressure-mean multiplier.  The boundary lift (vector P2 interpolant
    of ``data.dirichlet``) contributes to every term through the right-hand
    side.
    """
    basis = CompositeVelocityBasis(mesh, phi)
    asm = _Assembler(mesh, classification, phi, nu=data.nu, sigma=data.sigma,
                     sigma_u=data.sigma_u, basis=basis)
    asm.lift = interpolate_dirichlet(mesh, data.dirichlet)
    asm.volume_terms(data.forcing)
    asm.cut_terms(data.forcing)
    asm.interface_terms()
    asm.ghost_terms()
    return asm.build(
        {"scheme": "stokes", "nu": data.nu, "sigma": data.sigma,
         "sigma_u": data.sigma_u}
    )


def assemble_particulate(mesh, classification, phi, chi, data):
    """Assemble the freely falling particle scheme.

    Unknowns: composite velocity coefficients, pressure, particle velocity
    (U_x, U_y), particle angular rate psi, pressure-mean multiplier.  The
    body force is the constant fluid weight rho_f * g; the rigid tests
    additionally receive the whole-box gravity integral and the
    reduced-gravity load.
    """
    g = np.asarray(data.gravity, dtype=float)

    def forcing(x, y):
        out = np.zeros(np.shape(x) + (2,))
        out[...] = g * data.rho_f
        return out

    basis = CompositeVelocityBasis(mesh, phi, chi=chi, center=data.center)
    asm = _Assembler(mesh, classification, phi, nu=data.nu, sigma=data.sigma,
                     sigma_u=data.sigma_u, basis=basis)
    asm.volume_terms(forcing)
    asm.cut_terms(forcing)
    asm.interface_terms()
    asm.ghost_terms()
    asm.rigid_body_rhs(data.rho_f, data.rho_s, g, data.mass)
    return asm.build(
        {"scheme": "particulate", "nu": data.nu, "sigma": data.sigma,
         "sigma_u": data.sigma_u, "rho_f": data.rho_f, "rho_s": data.rho_s,
         "gravity": tuple(g), "mass": data.mass, "center": tuple(data.center)}
    )


# ---------------------------------------------------------------------------
# single-facet contributions (reference implementations used by the tests
# to cross-check the vectorised assembly)
# ---------------------------------------------------------------------------

class AnalyticVectorField:
    """Smooth vector field defined by callables for value, gradient and
    Hessian; used as trial/test input to the single-facet operations."""

    def __init__(self, value, grad, hess):
        self.value = value
        self.grad = grad
        self.hess = hess

    def eval(self, cell, pts):
        x, y = pts[:, 0], pts[:, 1]
        return (
            np.asarray(self.value(x, y), dtype=float),
            np.asarray(self.grad(x, y), dtype=float),
            np.asarray(self.hess(x, y), dtype=float),
        )


class PiecewiseVectorField:
    """Vector field with a different smooth definition per cell."""

    def __init__(self, default, per_cell=None):
        self.default = default
        self.per_cell = per_cell or {}

    def eval(self, cell, pts):
        return self.per_cell.get(int(cell), self.default).eval(cell, pts)


def _facet_points(mesh, facet, srule):
    p0 = mesh.vertices[mesh.facets[facet, 0]]
    p1 = mesh.vertices[mesh.facets[facet, 1]]
    return p0 + srule.points[:, None] * (p1 - p0)


def ghost_jump_terms(mesh, classification, facet, trial, test):
    """Penalty contribution of one facet across the cut layer.

    Evaluates ``trial`` and ``test`` from both adjacent cells at shared
    quadrature points; jumps are (value from the lower-index cell) minus
    (value from the other); returns

        |E| * int_E [dn trial].[dn test] + |E|^3 * int_E [d2n trial].[d2n test]

    with d2n the second normal derivative n.H.n per component.
    """
    if int(facet) not in set(classification.ghost_facets.tolist()):
        raise AssemblyError("facet %d is not a ghost facet" % facet)
    srule = segment_rule(5)
    cp, cm = mesh.facet_cells[facet]
    n = facet_normals(mesh, [facet], [cp])[0]
    pts = _facet_points(mesh, facet, srule)
    _, gp, hp = trial.eval(cp, pts)
    _, gm, hm = trial.eval(cm, pts)
    _, Gp, Hp = test.eval(cp, pts)
    _, Gm, Hm = test.eval(cm, pts)
    j1t = np.einsum("qbc,c->qb", gp - gm, n)
    j1s = np.einsum("qbc,c->qb", Gp - Gm, n)
    j2t = np.einsum("a,qbac,c->qb", n, hp - hm, n)
    j2s = np.einsum("a,qbac,c->qb", n, Hp - Hm, n)
    length = mesh.facet_length([facet])[0]
    w = srule.weights * length
    return float(
        length * np.einsum("q,qb,qb->", w, j1t, j1s)
        + length ** 3 * np.einsum("q,qb,qb->", w, j2t, j2s)
    )


def gh_boundary_term(mesh, classification, facet, trial, pressure, test, nu=1.0):
    """Consistency contribution of one internal-boundary facet:
    ``-int_E (2 nu D(trial) - p I) n . test`` with all fields evaluated from
    the adjacent active cell and n pointing out of the active mesh."""
    where = np.nonzero(classification.interface_facets == facet)[0]
    if len(where) == 0:
        raise AssemblyError("facet %d is not on the internal boundary" % facet)
    cell = classification.interface_cells[where[0]]
    srule = segment_rule(5)
    n = facet_normals(mesh, [facet], [cell])[0]
    pts = _facet_points(mesh, facet, srule)
    _, gt, _ = trial.eval(cell, pts)
    vs, _, _ = test.eval(cell, pts)
    p = pressure(pts[:, 0], pts[:, 1]) if callable(pressure) else pressure
    p = np.broadcast_to(np.asarray(p, dtype=float), (len(pts),))
    S = 0.5 * (gt + gt.transpose(0, 2, 1))
    traction = 2.0 * nu * np.einsum("qbc,c->qb", S, n) - p[:, None] * n
    w = srule.weights * mesh.facet_length([facet])[0]
    return float(-np.einsum("q,qb,qb->", w, traction, vs))
