"""Harmonic metrics for Higgs bundles near a VHS and the nonabelian Hodge map.

A metric is written h = h_ref exp(2 f) with f self-adjoint and traceless.
With g = exp(f) the pair (dbar_E, Phi) for h is gauge equivalent to the pair
(g dbar_E g^-1, g Phi g^-1) for h_ref, so all residuals are evaluated in this
unitary gauge against the fixed reference metric.  The self-duality residual
is assembled weakly (integrated against 0-form test fields), which makes it
exactly self-adjoint at the discrete level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bundle import HiggsPoint, ValidationError, _hermitian_basis
from .surface import ConvergenceError

MAX_SCALE = 5.0
CONTINUATION = (0.25, 0.5, 0.75, 1.0)


@dataclass
class MetricScale:
    """h = h_ref exp(2 f); f at master nodes in the holomorphic frame."""

    vhs: object
    f: np.ndarray
    residual: float = np.nan
    iterations: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        ctx = self.vhs.context
        if self.f is None:
            self.f = np.zeros((ctx.Nm, ctx.n, ctx.n), complex)
        self.f = np.asarray(self.f, complex)
        check_scale(ctx, self.f)

    @property
    def reference(self):
        return "reference"

    def sup_norm(self):
        fh = self.vhs.context.to_unitary(self.f, local=False)
        return float(np.abs(np.linalg.eigvalsh(fh)).max(initial=0.0))

    def is_diagonal(self, tol=1e-6):
        n = self.f.shape[-1]
        off = self.f * (1 - np.eye(n))
        return float(np.abs(off).max(initial=0.0)) <= tol


def zero_scale(v):
    ctx = v.context
    return MetricScale(v, np.zeros((ctx.Nm, ctx.n, ctx.n), complex), 0.0)


def check_scale(ctx, f, tol=1e-8):
    fh = ctx.to_unitary(f, local=False)
    scale = max(1.0, float(np.abs(fh).max(initial=0.0)))
    if np.abs(fh - np.conj(np.swapaxes(fh, 1, 2))).max(initial=0.0) > tol * scale:
        raise ValidationError("f is not self-adjoint for the reference metric")
    if np.abs(np.trace(fh, axis1=1, axis2=2)).max(initial=0.0) > tol * scale:
        raise ValidationError("f is not traceless")
    if np.abs(fh).max(initial=0.0) and np.abs(np.linalg.eigvalsh(fh)).max() >= MAX_SCALE:
        raise FloatingPointError("metric scale out of range: |f|_inf >= 5")


# ---------------------------------------------------------------------------
# Matrix exponential of hermitian fields and its derivative
# ---------------------------------------------------------------------------

def _eig(fh):
    lam, V = np.linalg.eigh(fh)
    return lam, V


def _expm_h(lam, V, t=1.0):
    return (V * np.exp(t * lam)[:, None, :]) @ np.conj(np.swapaxes(V, 1, 2))


def _dexp_h(lam, V, dfh):
    """Directional derivative of exp at V diag(lam) V^H along dfh (Daleckii-Krein)."""
    la, lb = lam[:, :, None], lam[:, None, :]
    diff = la - lb
    ea, eb = np.exp(la), np.exp(lb)
    with np.errstate(divide="ignore", invalid="ignore"):
        gam = np.where(np.abs(diff) > 1e-8, (ea - eb) / np.where(diff == 0, 1, diff),
                       0.5 * (ea + eb) * (1 + diff ** 2 / 24))
    Vh = np.conj(np.swapaxes(V, 1, 2))
    return V @ (gam * (Vh @ dfh @ V)) @ Vh


def metric_exp(ctx, f, local=True):
    """(exp f, exp -f) in the holomorphic frame at local (or master) nodes."""
    fh = ctx.to_unitary(f, local=False)
    lam, V = _eig(fh)
    E = ctx.from_unitary(_expm_h(lam, V, 1.0), local=False)
    Ei = ctx.from_unitary(_expm_h(lam, V, -1.0), local=False)
    if local:
        return ctx.scatter(E), ctx.scatter(Ei)
    return E, Ei


# ---------------------------------------------------------------------------
# Residual
# ---------------------------------------------------------------------------

def reference_curvature(ctx):
    """Weak pieces of i Lambda F for the reference metric.

    Returns (T, Cb, Cp): T is the pointwise curvature of the hyperbolic-induced
    metric, -d-bar d log H_k, with the symmetric form (D_x^2 + D_y^2) / 4 since
    D_x, D_y do not commute on curved elements; Cb, Cp are the d-bar and d
    derivatives of a diagonal correction c, entering weakly as
    <dbar chi, dbar c> + <d chi, d c> so that interelement fluxes are kept.
    """
    if "T1" not in ctx._cache:
        m = ctx.mesh
        n = ctx.n
        T = np.zeros((ctx.L, n, n), complex)
        Cb = np.zeros_like(T)
        Cp = np.zeros_like(T)
        corr = ctx.vhs.metric_correction
        for k in range(n):
            lh = np.log(ctx.H_l[:, k])
            if corr is not None:
                c = corr[m.loc2glob, k]
                lh = lh - 2 * c
                Cb[:, k, k] = ctx.Dzb @ c
                Cp[:, k, k] = ctx.Dz @ c
            ddl = 0.25 * (m.dx_loc @ (m.dx_loc @ lh) + m.dy_loc @ (m.dy_loc @ lh)).real
            T[:, k, k] = -ddl * ctx.form_l
        ctx._cache["T1"] = (T, Cb, Cp)
    return ctx._cache["T1"]


def gauge_pair(ctx, G, Gi, beta, Phi):
    """(alpha, Phi') = (G beta G^-1 + G dbar(G^-1), G Phi G^-1) at local nodes."""
    alpha = G @ beta @ Gi + G @ ctx.dbar_l(Gi)
    return alpha, G @ Phi @ Gi


def weak_hitchin(ctx, alpha, Phi):
    """Weak i Lambda (F_{dbar_0 + alpha} + [Phi, Phi*]) for the reference metric."""
    f1 = ctx.form_l[:, None, None]
    aS, PS = ctx.adj(alpha), ctx.adj(Phi)
    T, Cb, Cp = reference_curvature(ctx)
    Y = T + f1 * (alpha @ aS - aS @ alpha + Phi @ PS - PS @ Phi)
    return ctx.weak(Y=Y, dzb=Cb - alpha, dz=Cp - aS)


def project_sl_hermitian(ctx, Z):
    """Self-adjoint traceless part (reference metric) of a master field."""
    Zh = ctx.to_unitary(Z, local=False)
    Zh = 0.5 * (Zh + np.conj(np.swapaxes(Zh, 1, 2)))
    tr = np.trace(Zh, axis1=1, axis2=2)
    Zh = Zh - tr[:, None, None] * np.eye(ctx.n) / ctx.n
    return ctx.from_unitary(Zh, local=False)


def residual_field(p, f):
    """Projected weak self-duality residual as a master 0-form (i Lambda of the 2-form)."""
    ctx = p.base.context
    G, Gi = metric_exp(ctx, f)
    alpha, Phi = gauge_pair(ctx, G, Gi, p.beta, p.higgs_local)
    return project_sl_hermitian(ctx, weak_hitchin(ctx, alpha, Phi))


def hitchin_residual(p, m):
    """Self-duality residual F + [Phi, Phi*] as the coefficient of dz ^ dz-bar."""
    check_scale(p.base.context, m.f)
    Z = residual_field(p, m.f)
    return 0.5 * p.base.mesh.rho[:, None, None] * Z


def residual_norm(p, m):
    ctx = p.base.context
    return ctx.norm0(residual_field(p, m.f))


# ---------------------------------------------------------------------------
# Newton solver in real coordinates
# ---------------------------------------------------------------------------

class _Batch:
    """Context arrays broadcast over a batch axis placed after the node axis."""

    def __init__(self, ctx):
        self.ctx = ctx
        self.eta = ctx.eta_l[:, None]
        self.etaT = np.swapaxes(ctx.eta_l, 1, 2)[:, None]
        self.f1 = ctx.form_l[:, None, None, None]
        self.w = ctx.mesh.w_loc[:, None, None, None]
        self.fac = ctx.fac["0"][:, None]
        self.su_m = ctx.sqrtH_m[:, None]

    def adj(self, X):
        return np.conj(np.swapaxes(X, -1, -2)) * self.etaT

    def dbar(self, X):
        return self.ctx.apply(self.ctx.Dzb, X)

    def scatter(self, S):
        return S[self.ctx.mesh.loc2glob] * self.fac

    def from_unitary(self, X):
        s = self.su_m
        return X * s[..., None, :] / s[..., :, None]

    def to_unitary(self, X):
        s = self.su_m
        return X * s[..., :, None] / s[..., None, :]

    def weak(self, Y, dz, dzb):
        ctx = self.ctx
        acc = Y + ctx.apply(ctx.DzH, self.w * self.f1 * dz) / self.w
        acc = acc + ctx.apply(ctx.DzbH, self.w * self.f1 * self.eta * dzb) / (self.w * self.eta)
        flat = (acc / self.fac).reshape(ctx.L, -1)
        return (ctx.G0 @ flat).reshape((ctx.Nm,) + acc.shape[1:])


class _Problem:
    """Residual map in orthonormal hermitian coordinates of f."""

    def __init__(self, p):
        self.p = p
        self.ctx = ctx = p.base.context
        self.basis = _hermitian_basis(ctx.n)
        self.dim = len(self.basis)
        self.Phi = p.higgs_local
        self.bt = _Batch(ctx)

    def to_field(self, x):
        return np.einsum("mr,rab->mab", x.reshape(self.ctx.Nm, self.dim), self.basis)

    def to_coords(self, Zh):
        return np.real(np.einsum("m...ab,rba->m...r", Zh, self.basis))

    def state(self, x):
        lam, V = _eig(self.to_field(x))
        if np.abs(lam).max(initial=0.0) >= MAX_SCALE:
            raise FloatingPointError("metric scale out of range: |f|_inf >= 5")
        ctx = self.ctx
        G = ctx.scatter(ctx.from_unitary(_expm_h(lam, V, 1.0), local=False))
        Gi = ctx.scatter(ctx.from_unitary(_expm_h(lam, V, -1.0), local=False))
        alpha, Phi = gauge_pair(ctx, G, Gi, self.p.beta, self.Phi)
        return {"lam": lam, "V": V, "G": G, "Gi": Gi, "DGi": ctx.dbar_l(Gi),
                "alpha": alpha, "Phi": Phi, "aS": ctx.adj(alpha), "PS": ctx.adj(Phi)}

    def residual(self, x, st=None):
        st = self.state(x) if st is None else st
        ctx = self.ctx
        Z = weak_hitchin(ctx, st["alpha"], st["Phi"])
        return self.to_coords(ctx.to_unitary(Z, local=False)).ravel()

    def jvp_batch(self, st, dfh):
        """Exact derivative along a batch of hermitian directions dfh (Nm, B, n, n)
        (unitary frame); returns coordinates (Nm, B, dim)."""
        bt = self.bt
        lam, V = st["lam"][:, None], st["V"][:, None]
        Eih = _expm_h_b(lam, V, -1.0)
        dEh = _dexp_h_b(lam, V, dfh)
        dEih = -Eih @ dEh @ Eih
        dG, dGi = bt.scatter(bt.from_unitary(dEh)), bt.scatter(bt.from_unitary(dEih))
        G, Gi, DGi = st["G"][:, None], st["Gi"][:, None], st["DGi"][:, None]
        beta, A = self.p.beta[:, None], self.Phi[:, None]
        dal = dG @ beta @ Gi + G @ beta @ dGi + dG @ DGi + G @ bt.dbar(dGi)
        dPh = dG @ A @ Gi + G @ A @ dGi
        al, aS = st["alpha"][:, None], st["aS"][:, None]
        Ph, PS = st["Phi"][:, None], st["PS"][:, None]
        daS, dPS = bt.adj(dal), bt.adj(dPh)
        dY = bt.f1 * (dal @ aS - aS @ dal + al @ daS - daS @ al +
                      dPh @ PS - PS @ dPh + Ph @ dPS - dPS @ Ph)
        dZ = bt.weak(dY, -daS, -dal)
        return self.to_coords(bt.to_unitary(dZ))

    def jvp(self, st, dx):
        dfh = self.to_field(dx)[:, None]
        return self.jvp_batch(st, dfh)[:, 0].ravel()

    def norm(self, y):
        """L^2 norm of the coordinate field (orthonormal basis, quadrature weights)."""
        return float(np.sqrt(np.sum(self.ctx.mesh.weights[:, None] *
                                    y.reshape(self.ctx.Nm, self.dim) ** 2)))


def _expm_h_b(lam, V, t):
    return (V * np.exp(t * lam)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def _dexp_h_b(lam, V, dfh):
    la, lb = lam[..., :, None], lam[..., None, :]
    diff = la - lb
    ea, eb = np.exp(la), np.exp(lb)
    with np.errstate(divide="ignore", invalid="ignore"):
        gam = np.where(np.abs(diff) > 1e-8, (ea - eb) / np.where(diff == 0, 1, diff),
                       0.5 * (ea + eb) * (1 + diff ** 2 / 24))
    Vh = np.conj(np.swapaxes(V, -1, -2))
    return V @ (gam * (Vh @ dfh @ V)) @ Vh


def _coloring(mesh):
    """Distance-2 colouring of masters for structured Jacobian assembly."""
    key = "colouring"
    if key in mesh._cache:
        return mesh._cache[key]
    Nm = mesh.n_nodes
    if mesh.kind == "torus":
        colors = np.arange(Nm)
    else:
        npe = (mesh.degree + 1) ** 2
        elem = np.arange(mesh.n_local) // npe
        A = sp.csr_matrix((np.ones(mesh.n_local), (elem, mesh.loc2glob)),
                          shape=(elem.max() + 1, Nm))
        S = (A.T @ A).astype(bool).astype(np.int8)
        C = sp.csr_matrix((S @ S).astype(bool))
        colors = -np.ones(Nm, int)
        for i in range(Nm):
            nb = C.indices[C.indptr[i]:C.indptr[i + 1]]
            used = set(colors[nb][colors[nb] >= 0].tolist())
            c = 0
            while c in used:
                c += 1
            colors[i] = c
    mesh._cache[key] = colors
    return colors


def _pattern(mesh):
    key = "jac_pattern"
    if key not in mesh._cache:
        Nm = mesh.n_nodes
        if mesh.kind == "torus":
            S = sp.csr_matrix(np.ones((Nm, Nm), bool))
        else:
            npe = (mesh.degree + 1) ** 2
            elem = np.arange(mesh.n_local) // npe
            A = sp.csr_matrix((np.ones(mesh.n_local), (elem, mesh.loc2glob)),
                              shape=(elem.max() + 1, Nm))
            S = sp.csr_matrix((A.T @ A).astype(bool))
        mesh._cache[key] = S
    return mesh._cache[key]


def assemble_jacobian(prob, x, batch=48):
    """Sparse Jacobian of the coordinate residual by coloured directional derivatives."""
    mesh = prob.ctx.mesh
    colors = _coloring(mesh)
    S = _pattern(mesh).tocoo()
    Nm, d, n = mesh.n_nodes, prob.dim, prob.ctx.n
    st = prob.state(x)
    ncol = colors.max() + 1
    # every (row, column) pair of the pattern is read from the batch entry of the column's colour
    jobs = [(c, r) for c in range(ncol) for r in range(d)]
    col_color = colors[S.col]
    rows, cols, vals = [], [], []
    for k0 in range(0, len(jobs), batch):
        chunk = jobs[k0:k0 + batch]
        dfh = np.zeros((Nm, len(chunk), n, n), complex)
        for b, (c, r) in enumerate(chunk):
            dfh[colors == c, b] = prob.basis[r]
        jv = prob.jvp_batch(st, dfh)                       # (Nm, B, d)
        for b, (c, r) in enumerate(chunk):
            mask = col_color == c
            r_idx, c_idx = S.row[mask], S.col[mask]
            blk = jv[r_idx, b]                             # (nnz, d)
            rows.append((r_idx[:, None] * d + np.arange(d)).ravel())
            cols.append(np.repeat(c_idx * d + r, d))
            vals.append(blk.ravel())
    return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(Nm * d, Nm * d))


def _preconditioner(prob, x):
    """Incomplete LU of the Jacobian at x (reused across Newton steps and solves)."""
    J = assemble_jacobian(prob, x)
    return spla.spilu(J, drop_tol=1e-3, fill_factor=5)


def _newton(prob, x, tol, max_iters, trace, lu_cache):
    y = prob.residual(x)
    rn = prob.norm(y)
    trace.append(rn)
    it = 0
    while rn > tol:
        if it >= max_iters:
            raise ConvergenceError("Newton stagnated", {"history": trace, "iterations": it})
        st = prob.state(x)
        if lu_cache.get("lu") is None:
            lu_cache["lu"] = _preconditioner(prob, x)
        lu = lu_cache["lu"]
        n = x.size
        A = spla.LinearOperator((n, n), matvec=lambda v: prob.jvp(st, v), dtype=float)
        Mop = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
        dx, info = spla.gmres(A, -y, M=Mop, rtol=1e-8, atol=0.0,
                              restart=60, maxiter=5)
        if info != 0 or not np.all(np.isfinite(dx)):
            # refresh the preconditioner at the current iterate and retry once
            lu_cache["lu"] = lu = _preconditioner(prob, x)
            Mop = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
            dx, info = spla.gmres(A, -y, M=Mop, rtol=1e-5, atol=0.0, restart=60, maxiter=10)
        # Armijo backtracking on the residual norm, initial step 1, c = 1e-4
        step, accepted = 1.0, False
        while step > 1e-4:
            try:
                xn = x + step * dx
                yn = prob.residual(xn)
            except FloatingPointError:
                step *= 0.5
                continue
            rn_new = prob.norm(yn)
            if rn_new <= (1 - 1e-4 * step) * rn:
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            raise ConvergenceError("line search failed", {"history": trace, "iterations": it})
        x, y, rn = xn, yn, rn_new
        trace.append(rn)
    return x, it


def default_tolerance(mesh):
    return 1e-8 if mesh.kind == "torus" else 1e-6 * mesh.area


def _scaled_point(p, s):
    if s == 1.0:
        return p
    return HiggsPoint(p.base, s * p.beta, s * p.phi, p.integrable, p.normal_form)


def solve_harmonic_metric(p, f0=None, tol=None, max_iters=50, continuation=None):
    """Damped Newton for h = h_ref exp(2 f) solving F_h + [Phi, Phi*h] = 0."""
    ctx = p.base.context
    mesh = p.base.mesh
    tol = default_tolerance(mesh) if tol is None else tol
    f0 = zero_scale(p.base) if f0 is None else f0
    check_scale(ctx, f0.f)
    prob = _Problem(p)
    x = prob.to_coords(ctx.to_unitary(f0.f, local=False)).ravel()
    trace = []
    # skip continuation when the initial guess already converges
    rn0 = prob.norm(prob.residual(x))
    if rn0 <= tol:
        return MetricScale(p.base, f0.f.copy(), rn0, 0, [rn0])
    stages = CONTINUATION if continuation is None else continuation
    lu_cache = ctx._cache.setdefault("nahc_lu", {})
    total = 0
    for s in stages:
        sp_ = _Problem(_scaled_point(p, s))
        local = {"lu": lu_cache.get("lu")}
        try:
            x, it = _newton(sp_, x, tol, max_iters - total, trace, local)
        except ConvergenceError as err:
            err.report = {"history": trace, "stage": s, "iterations": total}
            raise
        total += it
        if local.get("lu") is not None and "lu" not in lu_cache:
            lu_cache["lu"] = local["lu"]
    f = ctx.from_unitary(prob.to_field(x), local=False)
    return MetricScale(p.base, f, trace[-1], total, trace)


# ---------------------------------------------------------------------------
# Flat connections
# ---------------------------------------------------------------------------

@dataclass
class FlatConnectionRep:
    """D = dbar_E + del_E^h + Phi + Phi^{*h} in the unitary gauge g = exp(f).

    The four pieces are stored as local coefficient fields relative to the
    reference Chern connection d_0 = dbar_0 + del_0 of h_ref:
    dbar piece alpha (dz-bar), del piece -alpha* (dz), Higgs pieces Phi (dz)
    and Phi* (dz-bar).
    """

    vhs: object
    dbar_part: np.ndarray
    del_part: np.ndarray
    higgs: np.ndarray
    higgs_adjoint: np.ndarray
    metric: MetricScale | None = None

    @property
    def a_z(self):
        return self.del_part + self.higgs

    @property
    def a_zb(self):
        return self.dbar_part + self.higgs_adjoint

    def blocks(self):
        return {"dbar": self.dbar_part, "del": self.del_part,
                "higgs": self.higgs, "higgs_adjoint": self.higgs_adjoint}


def flatness_field(ctx, a_z, a_zb):
    """Weak i Lambda of the curvature of d_0 + a_z dz + a_zb dz-bar."""
    f1 = ctx.form_l[:, None, None]
    T, Cb, Cp = reference_curvature(ctx)
    Y = T + f1 * (a_z @ a_zb - a_zb @ a_z)
    return ctx.weak(Y=Y, dzb=Cb - a_zb, dz=Cp + a_z)


def flatness_residual(D):
    ctx = D.vhs.context
    return ctx.norm0(flatness_field(ctx, D.a_z, D.a_zb))


def connection_from_metric(p, f):
    ctx = p.base.context
    G, Gi = metric_exp(ctx, f)
    alpha, Phi = gauge_pair(ctx, G, Gi, p.beta, p.higgs_local)
    return alpha, Phi


def nhc_map(p, m, tol=None):
    """Flat connection of the harmonic pair (in the unitary gauge of m)."""
    ctx = p.base.context
    tol = default_tolerance(p.base.mesh) * 10 if tol is None else tol
    r = residual_norm(p, m)
    if r > tol:
        raise ValidationError(f"metric does not solve the self-duality equation (residual {r:.3g})")
    alpha, Phi = connection_from_metric(p, m.f)
    return FlatConnectionRep(p.base, alpha, -ctx.adj(alpha), Phi, ctx.adj(Phi), m)


def flatness_tolerance(p, m):
    h = p.base.mesh.h
    ctx = p.base.context
    data = 1.0 + ctx.norm1((p.beta, p.phi))
    return 10 * max(m.residual if np.isfinite(m.residual) else 0.0, 0.0) + 10 * h ** 2 * data


# ---------------------------------------------------------------------------
# First variation
# ---------------------------------------------------------------------------

def first_variation_check(v, direction, t_list=(0.05, 0.1, 0.2), return_norms=False):
    """Fit ||f(t)|| ~ t^k along the slice curve through t * direction.

    ``direction`` is a SliceVector; the curve is the Kuranishi preimage of the
    ray through its harmonic coefficients (or the vector itself when the
    slice equations hold to first order, e.g. Hitchin-section directions).
    Returns the fitted exponent (inf for the zero direction).
    """
    from .strata import slice_point_along
    ctx = v.context
    norms = []
    for t in t_list:
        u = slice_point_along(v, direction, t)
        if not np.any(u.beta) and not np.any(u.phi):
            norms.append(0.0)
            continue
        p = HiggsPoint(v, u.beta, u.phi)
        m = solve_harmonic_metric(p)
        fh = ctx.to_unitary(m.f, local=False)
        norms.append(float(np.sqrt(np.sum(ctx.mesh.weights * np.sum(np.abs(fh) ** 2, axis=(1, 2))))))
    norms = np.array(norms)
    if np.all(norms == 0):
        expo = np.inf
    else:
        expo = float(np.polyfit(np.log(t_list), np.log(norms), 1)[0])
    return (expo, norms) if return_norms else expo
