"""Manufactured solutions, composite-field evaluation and error measures.

The solved coefficient vectors only become a velocity/pressure field through
the composite reconstruction

    u_h = u_D,h + phi_h w_h + chi_h (U + psi x r),      p_h = P1 field,

so this module owns that reconstruction (values, gradients, and — for
cross-checking the facet penalties — Hessians), the classical trigonometric
manufactured Stokes solution with its forcing, relative L2/H1(semi) error
norms with pressure-mean alignment, experimental orders of convergence, and
the nested-mesh self-convergence comparison used when no exact solution
exists.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .basis import ReferenceBasis, triangle_rule
from .mesh import locate_cells, reference_coords

_P1 = ReferenceBasis(1)
_P2 = ReferenceBasis(2)
_SPIN = np.array([[0.0, -1.0], [1.0, 0.0]])


class AnalysisError(Exception):
    """Raised for invalid error-measurement requests."""


# ---------------------------------------------------------------------------
# manufactured solution
# ---------------------------------------------------------------------------

@dataclass
class ManufacturedStokes:
    """Divergence-free trigonometric benchmark on the unit square.

    u = (cos(pi x) sin(pi y), -sin(pi x) cos(pi y))
    p = (y - 1/2) cos(2 pi x) + (x - 1/2) sin(2 pi y)

    Since div u = 0 the momentum forcing reduces to
    f = -nu Lap(u) + grad(p) = 2 pi^2 nu u + grad(p).
    """

    nu: float = 1.0

    def velocity(self, x, y):
        x, y = np.asarray(x), np.asarray(y)
        return np.stack(
            [np.cos(np.pi * x) * np.sin(np.pi * y),
             -np.sin(np.pi * x) * np.cos(np.pi * y)], axis=-1
        )

    def velocity_grad(self, x, y):
        """Gradient with [b, c] = d u_b / d x_c."""
        x, y = np.asarray(x), np.asarray(y)
        pi = np.pi
        g = np.empty(np.shape(x) + (2, 2))
        g[..., 0, 0] = -pi * np.sin(pi * x) * np.sin(pi * y)
        g[..., 0, 1] = pi * np.cos(pi * x) * np.cos(pi * y)
        g[..., 1, 0] = -pi * np.cos(pi * x) * np.cos(pi * y)
        g[..., 1, 1] = pi * np.sin(pi * x) * np.sin(pi * y)
        return g

    def pressure(self, x, y):
        x, y = np.asarray(x), np.asarray(y)
        return (y - 0.5) * np.cos(2 * np.pi * x) + (x - 0.5) * np.sin(2 * np.pi * y)

    def pressure_grad(self, x, y):
        x, y = np.asarray(x), np.asarray(y)
        two_pi = 2 * np.pi
        return np.stack(
            [-two_pi * (y - 0.5) * np.sin(two_pi * x) + np.sin(two_pi * y),
             np.cos(two_pi * x) + two_pi * (x - 0.5) * np.cos(two_pi * y)],
            axis=-1,
        )

    def forcing(self, x, y):
        return (2.0 * np.pi ** 2 * self.nu) * self.velocity(x, y) \
            + self.pressure_grad(x, y)

    # the boundary data of the benchmark is the velocity itself
    def dirichlet(self, x, y):
        return self.velocity(x, y)


# ---------------------------------------------------------------------------
# composite solution container and evaluation
# ---------------------------------------------------------------------------

@dataclass
class CompositeSolution:
    """Solved fields in nodal form plus everything needed to evaluate them.

    ``w`` holds the composite velocity coefficients over all degree-2 nodes
    (zero at wall/uncovered nodes), ``p`` the vertex pressures (zero outside
    the active mesh), ``u_d`` the optional boundary-lift coefficients, and
    ``U``/``psi`` the rigid translation/rotation (zero for the prescribed-
    boundary scheme).
    """

    scheme: str
    w: np.ndarray
    p: np.ndarray
    U: np.ndarray
    psi: float
    multiplier: float
    phi: object
    chi: object = None
    u_d: np.ndarray = None
    center: np.ndarray = dc_field(default_factory=lambda: np.array([0.5, 0.5]))
    is_active: np.ndarray = None


def split_solution(system, report, mesh, classification, phi, chi=None,
                   u_d=None, center=(0.5, 0.5)):
    """Scatter a solved dof vector into a CompositeSolution."""
    x = report.solution
    lay = system.layout
    vmap = system.velocity_dofmap
    pmap = system.pressure_dofmap
    w = np.zeros((mesh.n_p2_nodes, 2))
    free = vmap.node_dof >= 0
    w[free, 0] = x[vmap.node_dof[free]]
    w[free, 1] = x[vmap.node_dof[free] + vmap.n_free_nodes]
    p = np.zeros(mesh.n_vertices)
    pfree = pmap.node_dof >= 0
    p[pfree] = x[lay.pressure_offset + pmap.node_dof[pfree]]
    rigid = lay.rigid_part(x)
    return CompositeSolution(
        scheme="particulate" if lay.rigid else "stokes",
        w=w,
        p=p,
        U=rigid[:2].copy(),
        psi=float(rigid[2]),
        multiplier=float(x[lay.multiplier_index]),
        phi=phi,
        chi=chi,
        u_d=u_d,
        center=np.asarray(center, dtype=float),
        is_active=classification.is_active.copy(),
    )


def evaluate_fields(solution, mesh, cells, ref, hessian=False):
    """Evaluate velocity, gradient, pressure (and optionally the velocity
    Hessian) at per-cell reference points.

    Returns a dict with ``u`` (m,q,2), ``grad`` (m,q,2,2) ([b,c] = d_c u_b),
    ``div`` (m,q), ``p`` (m,q), and ``hess`` (m,q,2,2,2) when requested.
    """
    cells = np.asarray(cells)
    rp = np.asarray(ref)
    m, q = rp.shape[0], rp.shape[1]
    flat = rp.reshape(-1, 2)
    N = _P2.values(flat).reshape(m, q, 6)
    Gref = _P2.gradients(flat).reshape(m, q, 6, 2)
    inv = mesh.inv_jac[cells]
    G = np.einsum("mqib,mba->mqia", Gref, inv)
    nodes = mesh.cell_p2_nodes[cells]
    v0 = mesh.vertices[mesh.cells[cells, 0]]
    x = v0[:, None, :] + np.einsum("mab,mqb->mqa", mesh.jac[cells], rp)

    H = None
    if hessian:
        H = np.einsum("mca,icd,mdb->miab", inv, _P2.hessians(), inv)

    def scalar(coeffs):
        loc = coeffs[nodes]
        val = np.einsum("mqi,mi->mq", N, loc)
        grad = np.einsum("mqia,mi->mqa", G, loc)
        hc = np.einsum("miab,mi->mab", H, loc) if hessian else None
        return val, grad, hc

    fv, fg, fH = scalar(solution.phi.coeffs)
    wloc = solution.w[nodes]                                  # (m, 6, 2)
    Wv = np.einsum("mqi,mib->mqb", N, wloc)
    WJ = np.einsum("mqic,mib->mqbc", G, wloc)

    u = fv[:, :, None] * Wv
    grad = fv[:, :, None, None] * WJ + np.einsum("mqb,mqc->mqbc", Wv, fg)
    hess = None
    if hessian:
        WH = np.einsum("miac,mib->mbac", H, wloc)             # (m, 2, 2, 2)
        hess = (
            fv[:, :, None, None, None] * WH[:, None]
            + np.einsum("mqc,mqba->mqbac", fg, WJ)
            + np.einsum("mqa,mqbc->mqbac", fg, WJ)
            + np.einsum("mqb,mac->mqbac", Wv, fH)
        )

    if solution.u_d is not None:
        dloc = solution.u_d[nodes]
        u = u + np.einsum("mqi,mib->mqb", N, dloc)
        grad = grad + np.einsum("mqic,mib->mqbc", G, dloc)
        if hessian:
            hess = hess + np.broadcast_to(
                np.einsum("miac,mib->mbac", H, dloc)[:, None], hess.shape
            )

    if solution.chi is not None and (solution.psi != 0.0 or np.any(solution.U)):
        cv, cg, cH = scalar(solution.chi.coeffs)
        r = x - solution.center
        M = solution.U[None, None, :] + solution.psi * np.stack(
            [-r[..., 1], r[..., 0]], axis=-1
        )
        u = u + cv[:, :, None] * M
        grad = grad + solution.psi * cv[:, :, None, None] * _SPIN \
            + np.einsum("mqb,mqc->mqbc", M, cg)
        if hessian:
            gM = solution.psi * _SPIN                          # (2, 2) d_c M_b
            hess = hess + (
                np.einsum("mqc,ba->mqbac", cg, gM)
                + np.einsum("mqa,bc->mqbac", cg, gM)
                + np.einsum("mqb,mac->mqbac", M, cH)
            )

    ploc = solution.p[mesh.cells[cells]]
    pv = _P1.values(flat).reshape(m, q, 3)
    p = np.einsum("mqk,mk->mq", pv, ploc)

    out = {"u": u, "grad": grad, "div": grad[..., 0, 0] + grad[..., 1, 1],
           "p": p, "x": x}
    if hessian:
        out["hess"] = hess
    return out


def composite_eval(solution, phi, chi, mesh, cell, point):
    """Velocity value, velocity gradient, and pressure at one point of one
    active cell (reference implementation; the batched path is
    evaluate_fields)."""
    if solution.is_active is not None and not solution.is_active[cell]:
        raise AnalysisError("cell %d is not part of the active mesh" % cell)
    probe = CompositeSolution(
        scheme=solution.scheme, w=solution.w, p=solution.p, U=solution.U,
        psi=solution.psi, multiplier=solution.multiplier, phi=phi, chi=chi,
        u_d=solution.u_d, center=solution.center, is_active=solution.is_active,
    )
    ref = reference_coords(mesh, np.array([cell]), np.asarray(point)[None, :])
    fields = evaluate_fields(probe, mesh, np.array([cell]), ref[:, None, :])
    return fields["u"][0, 0], fields["grad"][0, 0], float(fields["p"][0, 0])


class ReferenceSolution:
    """Adapter presenting a solved case as exact-style callables, so the
    same error routine handles manufactured and self-convergence runs.
    Points are located on the reference mesh deterministically."""

    def __init__(self, solution, mesh):
        self.solution = solution
        self.mesh = mesh

    def _fields(self, x, y):
        pts = np.column_stack([np.ravel(x), np.ravel(y)])
        cells = locate_cells(self.mesh, pts)
        if self.solution.is_active is not None and not np.all(
            self.solution.is_active[cells]
        ):
            raise AnalysisError("reference evaluation outside the active mesh")
        ref = reference_coords(self.mesh, cells, pts)
        return evaluate_fields(self.solution, self.mesh, cells, ref[:, None, :])

    def velocity(self, x, y):
        f = self._fields(x, y)
        return f["u"][:, 0, :].reshape(np.shape(x) + (2,))

    def velocity_grad(self, x, y):
        f = self._fields(x, y)
        return f["grad"][:, 0].reshape(np.shape(x) + (2, 2))

    def pressure(self, x, y):
        f = self._fields(x, y)
        return f["p"][:, 0].reshape(np.shape(x))


# ---------------------------------------------------------------------------
# norms and convergence tables
# ---------------------------------------------------------------------------

@dataclass
class ErrorNorms:
    """Relative errors (falling back to absolute when the exact norm is
    zero, e.g. a zero exact pressure) plus the raw absolute quantities."""

    u_l2: float
    u_h1: float
    p_l2: float
    abs_u_l2: float
    abs_u_h1: float
    abs_p_l2: float
    div_l2: float


def error_norms(solution, exact, mesh, classification, cells=None):
    """L2/H1(semi) velocity and mean-aligned L2 pressure errors.

    ``exact`` provides velocity/velocity_grad/pressure callables (a
    ManufacturedStokes or a ReferenceSolution).  Integration runs over the
    active cells (or the explicit ``cells`` subset for self-convergence)
    with the degree-8 rule; both pressures are shifted by their own mean
    over the measurement domain before comparison, which makes the error
    invariant to constant pressure offsets.
    """
    cells = classification.active_cells if cells is None else np.asarray(cells)
    if len(cells) == 0:
        raise AnalysisError("empty error-measurement domain")
    rule = triangle_rule(8)
    q = len(rule.weights)
    rp = np.broadcast_to(rule.points, (len(cells), q, 2))
    fields = evaluate_fields(solution, mesh, cells, rp)
    w = rule.weights[None, :] * mesh.det[cells][:, None]
    x, y = fields["x"][..., 0], fields["x"][..., 1]

    ue = exact.velocity(x, y)
    ge = exact.velocity_grad(x, y)
    pe = exact.pressure(x, y)

    area = w.sum()
    mean_h = np.einsum("mq,mq->", w, fields["p"]) / area
    mean_e = np.einsum("mq,mq->", w, pe) / area
    dp = (fields["p"] - mean_h) - (pe - mean_e)

    du = fields["u"] - ue
    dg = fields["grad"] - ge
    abs_u = np.sqrt(np.einsum("mq,mqb->", w, du ** 2))
    abs_g = np.sqrt(np.einsum("mq,mqbc->", w, dg ** 2))
    abs_p = np.sqrt(np.einsum("mq,mq->", w, dp ** 2))
    den_u = np.sqrt(np.einsum("mq,mqb->", w, ue ** 2))
    den_g = np.sqrt(np.einsum("mq,mqbc->", w, ge ** 2))
    den_p = np.sqrt(np.einsum("mq,mq->", w, (pe - mean_e) ** 2))
    div_l2 = np.sqrt(np.einsum("mq,mq->", w, fields["div"] ** 2))

    return ErrorNorms(
        u_l2=abs_u / den_u if den_u > 0 else abs_u,
        u_h1=abs_g / den_g if den_g > 0 else abs_g,
        p_l2=abs_p / den_p if den_p > 0 else abs_p,
        abs_u_l2=abs_u,
        abs_u_h1=abs_g,
        abs_p_l2=abs_p,
        div_l2=div_l2,
    )


def pressure_integral(solution, mesh, classification):
    """\\int p_h over the active mesh (should vanish by the multiplier)."""
    rule = triangle_rule(2)
    cells = classification.active_cells
    rp = np.broadcast_to(rule.points, (len(cells), len(rule.weights), 2))
    pv = _P1.values(rule.points)
    ploc = solution.p[mesh.cells[cells]]
    vals = np.einsum("qk,mk->mq", pv, ploc)
    w = rule.weights[None, :] * mesh.det[cells][:, None]
    return float(np.einsum("mq,mq->", w, vals))


def eoc(errors, hs):
    """Experimental orders of convergence; first entry is None.

    Raises on nonpositive error values (no meaningful order exists).
    """
    errors = [float(e) for e in errors]
    hs = [float(h) for h in hs]
    if any(e <= 0 for e in errors):
        raise AnalysisError("EOC undefined for nonpositive errors")
    out = [None]
    for i in range(1, len(errors)):
        out.append(np.log(errors[i - 1] / errors[i]) / np.log(hs[i - 1] / hs[i]))
    return out


@dataclass
class ConvergenceTable:
    """Per-refinement errors with mesh data; EOC columns derived on demand."""

    ns: list
    hs: list
    columns: dict

    def __post_init__(self):
        if any(self.hs[i] <= self.hs[i + 1] for i in range(len(self.hs) - 1)):
            raise AnalysisError("mesh sizes must decrease down the table")

    def eocs(self):
        return {"eoc_" + k: eoc(v, self.hs) for k, v in self.columns.items()}


# ---------------------------------------------------------------------------
# self-convergence against a nested fine-mesh solution
# ---------------------------------------------------------------------------

def nested_measurement_cells(coarse_mesh, coarse_cls, fine_mesh, fine_cls):
    """Coarse active cells entirely covered by fine active cells.

    The meshes are nested (fine n a multiple of coarse n), so each coarse
    triangle decomposes exactly into (ratio)^2 fine triangles; a coarse cell
    is kept when every one of those is active on the fine mesh.
    """
    n, nf = coarse_mesh.n, fine_mesh.n
    if nf % n != 0:
        raise AnalysisError("meshes are not nested: %d does not divide %d" % (n, nf))
    k = nf // n
    act = fine_cls.is_active
    ii, jj = np.meshgrid(np.arange(n), np.arange(n))
    i = ii.ravel()
    j = jj.ravel()
    ok_lower = np.ones(n * n, dtype=bool)
    ok_upper = np.ones(n * n, dtype=bool)
    for a in range(k):
        for b in range(k):
            I = i * k + a
            J = j * k + b
            sq = 2 * (J * nf + I)
            if b < a:
                ok_lower &= act[sq] & act[sq + 1]
            elif b == a:
                ok_lower &= act[sq]
                ok_upper &= act[sq + 1]
            else:
                ok_upper &= act[sq] & act[sq + 1]
    sq_ids = j * n + i
    keep = np.sort(np.concatenate(
        [2 * sq_ids[ok_lower], 2 * sq_ids[ok_upper] + 1]
    ))
    return keep[coarse_cls.is_active[keep]]


def self_convergence(cases, reference):
    """Errors of each coarse case against the fine reference run.

    ``cases`` and ``reference`` expose n, mesh, classification, solution.
    Velocity/pressure errors are integrated over the intersection of the
    active domains; the particle errors are |U - U_ref| / |U_ref| and
    |psi - psi_ref|.
    """
    ref = ReferenceSolution(reference.solution, reference.mesh)
    Uref = reference.solution.U
    psiref = reference.solution.psi
    ns, hs = [], []
    cols = {"err_u_l2": [], "err_u_h1": [], "err_p_l2": [],
            "err_U": [], "abs_psi": []}
    for case in cases:
        cells = nested_measurement_cells(
            case.mesh, case.classification, reference.mesh,
            reference.classification
        )
        norms = error_norms(case.solution, ref, case.mesh,
                            case.classification, cells=cells)
        ns.append(case.n)
        hs.append(case.mesh.h)
        cols["err_u_l2"].append(norms.u_l2)
        cols["err_u_h1"].append(norms.u_h1)
        cols["err_p_l2"].append(norms.p_l2)
        cols["err_U"].append(
            float(np.linalg.norm(case.solution.U - Uref))
            / float(np.linalg.norm(Uref))
        )
        cols["abs_psi"].append(abs(case.solution.psi - psiref))
    return ConvergenceTable(ns=ns, hs=hs, columns=cols)
