"""hbar-conformal limits along the BB slice of a chain VHS.

For a slice point u = (beta, phi) and R > 0 the harmonic metric of
(dbar_E + beta, R (Phi + phi)) is written h(u, R) = exp(f_R)(h'_R), where
h'_R rescales the VHS metric on E_j by R^{m_j}.  The scale f_R is stored by
its L + N+ part (grades >= 0); the negative grades are completed as
sum_j R^{2j} (f_j)*.

Two evaluations of the self-duality equation are provided: the direct one in
the holomorphic frame of E (``conformal_residual``), and the solver route,
which uses that conjugation by g = diag(R^{m_j / 2}) turns the problem into
the ordinary one at the slice point R . u for the VHS metric.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .bundle import DomainError, HiggsPoint, ValidationError, g_xi_gauge, grade_matrix, graded_scale
from .nahc import (FlatConnectionRep, MetricScale, default_tolerance, flatness_field,
                   reference_curvature, solve_harmonic_metric)
from .strata import SliceVector, cstar_on_slice
from .surface import ConvergenceError

HBAR_RANGE = (0.1, 10.0)


@dataclass
class ConformalWeights:
    m: tuple
    ranks: tuple

    def gauge(self, R):
        """Diagonal of g = diag(R^{m_j / 2})."""
        return np.array([R ** (mj / 2) for mj in self.m])


def conformal_weights(v):
    """m_j - m_{j+1} = 2 and sum rk(E_j) m_j = 0."""
    ranks = v.ranks
    ell = len(ranks)
    m1 = 2 * sum(r * j for j, r in enumerate(ranks)) / sum(ranks)
    return ConformalWeights(tuple(m1 - 2 * j for j in range(ell)), tuple(ranks))


def _check_R(R, allow_zero=False):
    if R < 0 or (R == 0 and not allow_zero):
        raise DomainError("R must be positive")
    if R > 1:
        raise DomainError("R must lie in (0, 1]")


def _check_hbar(hbar):
    if hbar == 0:
        raise DomainError("hbar must be nonzero")
    if not HBAR_RANGE[0] <= abs(hbar) <= HBAR_RANGE[1]:
        raise DomainError(f"|hbar| must lie in [{HBAR_RANGE[0]}, {HBAR_RANGE[1]}]")


def _grade_power(n, R, expo):
    """Array R^{expo(g)} per entry, with 0^0 = 1 and zero where expo is None."""
    g = grade_matrix(n)
    out = np.zeros((n, n))
    for k in range(n):
        for i in range(n):
            e = expo(g[k, i])
            if e is not None:
                out[k, i] = 1.0 if e == 0 else R ** e
    return out


# ---------------------------------------------------------------------------
# Rescaled operators
# ---------------------------------------------------------------------------

def _del_offset(ctx, beta, R):
    """-sum_j R^{2j} (beta_j)*: the (1,0) part of the Chern connection of (dbar_u, h'_R)."""
    w = _grade_power(ctx.n, R, lambda g: -2 * g if g <= -1 else None)
    return -ctx.adj(beta) * w


def _scaled_higgs_adjoint(ctx, phi, R):
    """R^2 Phi_u^{*h'_R} = Phi* + sum_j R^{2j+2} (phi_j)*."""
    w = _grade_power(ctx.n, R, lambda g: 2 - 2 * g if g <= 0 else None)
    return ctx.PhiS_l + ctx.adj(phi) * w


def rescaled_adjoint(v, X, R, local=True):
    """Adjoint for the rescaled metric h'_R: k^-1 X* k with k = diag(R^{m_j})."""
    ctx = v.context
    k = np.array(conformal_weights(v).gauge(R)) ** 2
    return ctx.adj(X, local) * (k[None, None, :] / k[None, :, None])


def rescaled_family_operators(v, u, R):
    """Operator pieces of (dbar_u, h'_R) and their curvature (weak i Lambda)."""
    _check_R(R)
    ctx = v.context
    A1 = _del_offset(ctx, u.beta, R)
    P = _scaled_higgs_adjoint(ctx, u.phi, R)
    return {
        "dbar": u.beta.copy(),
        "del": A1,
        "higgs": ctx.Phi_l + u.phi,
        "higgs_adjoint": P / R ** 2,
        "higgs_adjoint_scaled": P,
        "curvature": flatness_field(ctx, A1, u.beta),
    }


def limit_connection(v, u, hbar):
    """hbar^-1 Phi_u + dbar_E + del_E + beta + hbar Phi*."""
    _check_hbar(hbar)
    ctx = v.context
    z = np.zeros_like(ctx.Phi_l)
    return FlatConnectionRep(v, u.beta.copy(), z, (ctx.Phi_l + u.phi) / hbar, hbar * ctx.PhiS_l)


# ---------------------------------------------------------------------------
# Scales and the residual N_(u,R)
# ---------------------------------------------------------------------------

def complete_scale(v, f_up, R):
    """f_L + f_+ + sum_j R^{2j} (f_{+,j})* from the grades >= 0 part."""
    ctx = v.context
    g = grade_matrix(v.rank)
    up = np.where(g >= 0, f_up, 0)
    pos = np.where(g >= 1, f_up, 0)
    w = _grade_power(v.rank, R, lambda gr: -2 * gr if gr <= -1 else None)
    return up + ctx.adj(pos, local=False) * w


def _pieces(v, u, R, f_up):
    ctx = v.context
    F = complete_scale(v, f_up, R)
    E = ctx.scatter(expm(2 * F))
    Ei = ctx.scatter(expm(-2 * F))
    A1 = _del_offset(ctx, u.beta, R)
    P = _scaled_higgs_adjoint(ctx, u.phi, R)
    return E, Ei, A1, P


def _assemble(ctx, beta, Phi_u, A_tot, Q):
    f1 = ctx.form_l[:, None, None]
    T, Cb, Cp = reference_curvature(ctx)
    Y = T + f1 * (A_tot @ beta - beta @ A_tot) + f1 * (Phi_u @ Q - Q @ Phi_u)
    return ctx.weak(Y=Y, dzb=Cb - beta, dz=Cp + A_tot)


def conformal_residual(v, u, R, f_up):
    """Weak i Lambda N_(u,R)(f): curvature of (dbar_u, h(u,R)) plus [Phi_u, R^2 Phi_u^*].

    ``f_up`` is the L + N+ part of the scale (master nodes); R may be 0.
    """
    _check_R(R, allow_zero=True)
    ctx = v.context
    E, Ei, A1, P = _pieces(v, u, R, f_up)
    A_tot = Ei @ ctx.del_l(E) + Ei @ A1 @ E
    return _assemble(ctx, u.beta, ctx.Phi_l + u.phi, A_tot, Ei @ P @ E)


def _expm_frechet_batch(X, dX):
    n = X.shape[-1]
    big = np.zeros(X.shape[:-2] + (2 * n, 2 * n), complex)
    big[..., :n, :n] = X
    big[..., n:, n:] = X
    big[..., :n, n:] = dX
    Z = expm(big)
    return Z[..., :n, :n], Z[..., :n, n:]


def conformal_linearization(v, u, f_up, fdot_up, R=0.0):
    """Exact derivative of ``conformal_residual`` at f along fdot.

    At R = 0, f = 0 this is 2 (dbar_u del_E fdot + [Phi_u, [Phi*, fdot]]).
    """
    _check_R(R, allow_zero=True)
    ctx = v.context
    F = complete_scale(v, f_up, R)
    dF = complete_scale(v, fdot_up, R)
    Em, dEm = _expm_frechet_batch(2 * F, 2 * dF)
    Eim = expm(-2 * F)
    E, dE, Ei = ctx.scatter(Em), ctx.scatter(dEm), ctx.scatter(Eim)
    dEi = -Ei @ dE @ Ei
    A1 = _del_offset(ctx, u.beta, R)
    P = _scaled_higgs_adjoint(ctx, u.phi, R)
    dA = dEi @ ctx.del_l(E) + Ei @ ctx.del_l(dE) + dEi @ A1 @ E + Ei @ A1 @ dE
    dQ = dEi @ P @ E + Ei @ P @ dE
    f1 = ctx.form_l[:, None, None]
    Phi_u = ctx.Phi_l + u.phi
    Y = f1 * (dA @ u.beta - u.beta @ dA) + f1 * (Phi_u @ dQ - dQ @ Phi_u)
    return ctx.weak(Y=Y, dz=dA)


def linearization_at_origin(v, u, fdot_up):
    """dbar_u del_E fdot + [Phi_u, [Phi*, fdot]], assembled term by term."""
    ctx = v.context
    S = ctx.scatter(fdot_up)
    dS = ctx.del_l(S)
    f1 = ctx.form_l[:, None, None]
    Phi_u = ctx.Phi_l + u.phi
    C = ctx.PhiS_l @ S - S @ ctx.PhiS_l
    Y = f1 * (dS @ u.beta - u.beta @ dS) + f1 * (Phi_u @ C - C @ Phi_u)
    return ctx.weak(Y=Y, dz=dS)


def linearization_spectrum(v, n_probe=6):
    """Smallest relative singular value of the grade-j diagonal blocks of dN_(u,0)(0).

    The block is (D')* D' on grade-j 0-forms (traceless for j = 0).
    """
    from .surface import detect_kernel
    ctx = v.context
    out = {}
    for j in range(0, v.rank):
        K, M, _ = ctx.laplacian0("D1", j)
        rep = detect_kernel(K, M, v.mesh.h, n_probe=n_probe, want_basis=False)
        out[j] = {"dimension": rep.dimension, "smallest": float(rep.singular_values[0]),
                  "threshold": rep.threshold}
    return out


# ---------------------------------------------------------------------------
# Solver route
# ---------------------------------------------------------------------------

@dataclass
class ConformalScale:
    """f_R (grades >= 0 part) together with the solve at the slice point R . u."""

    vhs: object
    R: float
    f_up: np.ndarray
    solved: MetricScale

    @property
    def residual(self):
        return self.solved.residual

    @property
    def iterations(self):
        return self.solved.iterations

    @property
    def history(self):
        return self.solved.history

    def full(self):
        return complete_scale(self.vhs, self.f_up, self.R)

    def norm(self):
        ctx = self.vhs.context
        F = self.full()
        return float(np.sqrt(np.sum(ctx.mesh.weights * np.einsum("mki,mki,mki->m", F, F.conj(),
                                                                      ctx.eta_m).real)))


def _to_solver_frame(v, F, R):
    """f' = g f g^-1, hermitian for the VHS metric."""
    return graded_scale(F, R)


def solve_conformal_step(v, u, R, f_guess=None, tol=None, max_iters=50):
    """Scale f_R with N_(u,R)(f_R) = 0, solved at the slice point R . u."""
    _check_R(R)
    ctx = v.context
    Ru = cstar_on_slice(u, R)
    p = HiggsPoint(v, Ru.beta, Ru.phi)
    tol = default_tolerance(v.mesh) if tol is None else tol
    if f_guess is None:
        m = solve_harmonic_metric(p, tol=tol, max_iters=max_iters)
    else:
        f0 = _to_solver_frame(v, complete_scale(v, f_guess, R), R)
        f0 = 0.5 * (f0 + ctx.adj(f0, local=False))
        m = solve_harmonic_metric(p, MetricScale(v, f0), tol=tol, max_iters=max_iters,
                                  continuation=(1.0,))
    F = graded_scale(m.f, 1.0 / R)
    g = grade_matrix(v.rank)
    return ConformalScale(v, R, np.where(g >= 0, F, 0), m)


def family_connection(v, u, scale, hbar):
    """D_(u,R) = hbar^-1 Phi_u + dbar_u + del_u^{h(u,R)} + hbar R^2 Phi_u^{*h(u,R)}."""
    _check_hbar(hbar)
    ctx = v.context
    E, Ei, A1, P = _pieces(v, u, scale.R, scale.f_up)
    A_tot = Ei @ ctx.del_l(E) + Ei @ A1 @ E
    return FlatConnectionRep(v, u.beta.copy(), A_tot, (ctx.Phi_l + u.phi) / hbar,
                             hbar * (Ei @ P @ E))


def connection_distance(D1, D2):
    """L^2 norm of the difference of the four operator blocks."""
    ctx = D1.vhs.context
    tot = 0.0
    for key, deg in (("dbar", 1), ("del", 1), ("higgs", 1), ("higgs_adjoint", 1)):
        X = D1.blocks()[key] - D2.blocks()[key]
        tot += ctx.ip_local(X, X, deg).real
    return float(np.sqrt(max(tot, 0.0)))


@dataclass
class ConformalSample:
    R: float
    scale: ConformalScale
    connection: FlatConnectionRep
    residual: float
    flatness: float
    distance: float

    def record(self):
        return {"R": self.R, "residual": self.residual, "flatness": self.flatness,
                "distance": self.distance, "iterations": self.scale.iterations,
                "scale_norm": self.scale.norm()}


@dataclass
class ConformalTrajectory:
    u: SliceVector
    hbar: complex
    samples: list = field(default_factory=list)
    limit: FlatConnectionRep | None = None
    failure: dict | None = None

    def records(self):
        return [s.record() for s in self.samples]

    def distance_slope(self, R_subset=None):
        """Fitted exponent of distance-to-limit against R."""
        pts = [(s.R, s.distance) for s in self.samples
               if (R_subset is None or any(abs(s.R - r) < 1e-12 for r in R_subset)) and s.distance > 0]
        if len(pts) < 2:
            return np.nan
        R, d = np.array(pts).T
        return float(np.polyfit(np.log(R), np.log(d), 1)[0])

    def monotone_below(self):
        """Largest R below which the distance decreases monotonically with R."""
        s = sorted(self.samples, key=lambda x: x.R)
        thr = s[0].R if s else np.nan
        for a, b in zip(s, s[1:]):
            if b.distance >= a.distance:
                thr = b.R
            else:
                break
        return thr


def conformal_trajectory(v, u, hbar, R_list=None, tol=None, max_refine=6):
    """Continuation in R from the largest to the smallest sample, warm-started.

    Default ladder: R = 1, 1/2, 1/4, ..., down to 1/64.  A failed step is
    retried from an intermediate R (ratio 3/4); repeated failure truncates
    the trajectory and records the failure.
    """
    _check_hbar(hbar)
    R_list = [2.0 ** -k for k in range(7)] if R_list is None else list(R_list)
    if any(R <= 0 or R > 1 for R in R_list):
        raise DomainError("R values must lie in (0, 1]")
    if any(b >= a for a, b in zip(R_list, R_list[1:])):
        raise ValidationError("R_list must be strictly decreasing")
    ctx = v.context
    tol = 1e-4 * default_tolerance(v.mesh) if tol is None else tol
    traj = ConformalTrajectory(u, hbar, limit=limit_connection(v, u, hbar))
    guess, last = None, 1.0
    for R in R_list:
        refinements = 0
        while True:
            try:
                sc = solve_conformal_step(v, u, R, guess, tol=tol)
                break
            except (ConvergenceError, FloatingPointError) as err:
                refinements += 1
                mid = 0.75 * last
                failure = {"R": R, "error": str(err),
                           "largest_solved": traj.samples[-1].R if traj.samples else None}
                if refinements > max_refine or mid <= R:
                    traj.failure = failure
                    return traj
                try:
                    guess = solve_conformal_step(v, u, mid, guess, tol=tol).f_up
                except (ConvergenceError, FloatingPointError) as err2:
                    failure["error"] = str(err2)
                    traj.failure = failure
                    return traj
                last = mid
        guess, last = sc.f_up, R
        D = family_connection(v, u, sc, hbar)
        flat = ctx.norm0(flatness_field(ctx, D.a_z, D.a_zb))
        dist = connection_distance(D, traj.limit)
        traj.samples.append(ConformalSample(R, sc, D, float(sc.residual), flat, dist))
    return traj


def slice_gauge_check(v, R):
    """g = diag(R^{m_j/2}) coincides with the C* normalizing gauge at xi = R."""
    w = conformal_weights(v).gauge(R)
    return float(np.abs(w - g_xi_gauge(v, R)).max())
