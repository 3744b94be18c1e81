"""Hodge and Bialynicki-Birula slices at a chain VHS.

A deformation mu = (beta, phi) is stored as local arrays: beta is the
dz-bar coefficient, phi the dz coefficient.  The slice equations are

    D''(beta, phi) + [beta, phi] = 0,      D'(beta, phi) = 0,

reported through i Lambda as weak master fields.  The graded subcomplex
C_j collects beta in grade j and phi in grade j - 1; the C* action on the
slice multiplies C_j by xi^j.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .bundle import (DomainError, HiggsPoint, ValidationError, check_integrable, end_grading,
                     grade_matrix, integrability_tolerance)
from .surface import ConvergenceError, detect_kernel


@dataclass
class SliceVector:
    """A deformation (beta, phi) of the base VHS, with slice flags."""

    base: object
    beta: np.ndarray
    phi: np.ndarray
    in_hodge_slice: bool = False
    in_bb_slice: bool = False
    harmonic: bool = False
    _graded: dict = field(default=None, repr=False, compare=False)

    @property
    def pair(self):
        return self.beta, self.phi

    @property
    def graded(self):
        if self._graded is None:
            self._graded = {"beta": end_grading(self.beta, self.base),
                            "phi": end_grading(self.phi, self.base)}
        return self._graded

    def norm(self):
        return self.base.context.norm1(self.pair)

    def to_point(self):
        return HiggsPoint(self.base, self.beta, self.phi)

    def scaled(self, s):
        return SliceVector(self.base, s * self.beta, s * self.phi)

    def __add__(self, other):
        return SliceVector(self.base, self.beta + other.beta, self.phi + other.phi)

    def __sub__(self, other):
        return SliceVector(self.base, self.beta - other.beta, self.phi - other.phi)


@dataclass
class HarmonicBasis:
    """L^2-orthonormal harmonic vectors per grade j = 1..l (C_j pieces)."""

    base: object
    vectors: dict                      # grade -> list of SliceVector
    reports: dict = field(default_factory=dict)

    @property
    def dims(self):
        return {j: len(v) for j, v in self.vectors.items()}

    @property
    def dimension(self):
        return sum(self.dims.values())

    @property
    def grades(self):
        """Grade label of every coefficient, in coefficient order."""
        return np.array([j for j in sorted(self.vectors) for _ in self.vectors[j]], int)

    def flat(self):
        return [u for j in sorted(self.vectors) for u in self.vectors[j]]

    def fingerprint(self):
        v = self.base
        key = f"{v.mesh.kind}:{v.mesh.n_nodes}:{v.rank}:{v.exponents}:{v.twist}:{self.dims}"
        return hashlib.sha1(key.encode()).hexdigest()[:16]

    def combine(self, c):
        c = np.asarray(c, complex)
        if c.shape != (self.dimension,):
            raise ValidationError(f"expected {self.dimension} coefficients, got {c.shape}")
        ctx = self.base.context
        b = np.zeros((ctx.L, ctx.n, ctx.n), complex)
        p = np.zeros_like(b)
        for ck, u in zip(c, self.flat()):
            b += ck * u.beta
            p += ck * u.phi
        return SliceVector(self.base, b, p)

    def coefficients(self, u):
        ctx = self.base.context
        return np.array([ctx.ip1(u.pair, e.pair) for e in self.flat()], complex)


# ---------------------------------------------------------------------------
# Residuals and harmonic spaces
# ---------------------------------------------------------------------------

def slice_residual(v, u):
    """(i Lambda (D''mu + [beta, phi]), i Lambda D'mu) as weak master fields.

    Both are (1,1)-forms; see the module docstring.
    """
    ctx = v.context
    shape = (ctx.L, ctx.n, ctx.n)
    if u.beta.shape != shape or u.phi.shape != shape:
        raise ValidationError(f"slice vector shape must be {shape}")
    r1 = ctx.weak_D2_1(u.pair) + ctx.weak_bracket(u.pair)
    r2 = ctx.weak_D1_1(u.pair)
    return r1, r2


def slice_tolerance(v, u):
    h = v.mesh.h
    return 10 * h ** 2 * (u.norm() + v.context.norm1((np.zeros_like(v.context.Phi_l),
                                                      v.context.Phi_l)))


def in_normal_form(v, u, tol=0.0):
    g = grade_matrix(v.rank)
    bad = max(np.abs(np.where(g < 1, u.beta, 0)).max(initial=0.0),
              np.abs(np.where(g < 0, u.phi, 0)).max(initial=0.0),
              np.abs(np.trace(u.phi, axis1=1, axis2=2)).max(initial=0.0))
    return bad <= tol


def classify(v, u, tol=None):
    """Set the slice flags of u from its residuals."""
    ctx = v.context
    tol = slice_tolerance(v, u) if tol is None else tol
    r1, r2 = slice_residual(v, u)
    lin = ctx.weak_D2_1(u.pair)
    n1, n2, nl = ctx.norm0(r1), ctx.norm0(r2), ctx.norm0(lin)
    u.in_hodge_slice = bool(n1 < tol and n2 < tol)
    scale = max(np.abs(u.beta).max(initial=0), np.abs(u.phi).max(initial=0), 1.0)
    u.in_bb_slice = bool(u.in_hodge_slice and in_normal_form(v, u, 1e-12 * scale))
    u.harmonic = bool(nl < tol and n2 < tol)
    return {"integrability": n1, "coulomb": n2, "linear": nl, "tol": tol}


def harmonic_basis(v, n_probe=12):
    """Orthonormal bases of ker D'' ^ ker D' on each C_j, j = 1..l."""
    key = ("harmonic_basis", n_probe)
    ctx = v.context
    if key in ctx._cache:
        return ctx._cache[key]
    vectors, reports = {}, {}
    for j in range(1, v.ell + 1):
        K, M, sel_b, sel_p, nb, np_ = ctx.harmonic_pencil(j)
        if nb + np_ == 0:
            vectors[j] = []
            continue
        rep = detect_kernel(K, M, v.mesh.h, n_probe=n_probe, want_basis=True)
        reports[j] = rep
        raw = [ctx.c1_to_local(rep.basis[:, k], j) for k in range(rep.dimension)]
        vectors[j] = _orthonormalize(ctx, raw, v)
    out = HarmonicBasis(v, vectors, reports)
    ctx._cache[key] = out
    return out


def _orthonormalize(ctx, raw, v):
    if not raw:
        return []
    G = np.array([[ctx.ip1(a, b) for b in raw] for a in raw])
    # columns of C give orthonormal combinations: C^H G^T C = 1
    L = np.linalg.cholesky(G.T)
    C = np.linalg.inv(L).conj().T
    out = []
    for k in range(len(raw)):
        b = sum(C[i, k] * raw[i][0] for i in range(len(raw)))
        p = sum(C[i, k] * raw[i][1] for i in range(len(raw)))
        out.append(SliceVector(v, b, p, harmonic=True))
    return out


def expected_dimension(v):
    return (v.rank ** 2 - 1) * (v.mesh.genus - 1)


# ---------------------------------------------------------------------------
# Kuranishi map
# ---------------------------------------------------------------------------

def _green_correction(v, u):
    """i D' psi where (D')* D' psi = Lambda [beta, phi] (Galerkin, per grade)."""
    ctx = v.context
    rhs = -1j * ctx.weak_bracket(u.pair)
    g = grade_matrix(v.rank)
    if np.abs(np.where(g < 1, rhs, 0)).max(initial=0.0) > 0:
        rhs = np.where(g >= 1, rhs, 0)
    if not np.any(rhs):
        z = np.zeros_like(u.beta)
        return z, z.copy()
    psi, _ = ctx.solve_laplacian0("D1", rhs, grades=range(1, v.rank))
    cb, cp = ctx.D1_0(psi)
    return 1j * cb, 1j * cp


def kuranishi_vector(v, u):
    """k(u) = u + (D'')* G [beta, phi] as a SliceVector."""
    cb, cp = _green_correction(v, u)
    return SliceVector(v, u.beta + cb, u.phi + cp)


def kuranishi(v, u, basis=None, check=True, tol=None):
    """Coefficients of k(u) in the harmonic basis.

    With ``check`` the projection remainder of k(u) onto the harmonic space
    must be below ``tol`` relative to |k(u)| (default 10 h^2).
    """
    if not in_normal_form(v, u, 1e-12 * max(np.abs(u.beta).max(initial=1), np.abs(u.phi).max(initial=1))):
        raise ValidationError("slice vector is not in normal form (beta in N+, phi in L + N+)")
    basis = harmonic_basis(v) if basis is None else basis
    k = kuranishi_vector(v, u)
    c = basis.coefficients(k)
    if check:
        tol = 10 * v.mesh.h ** 2 if tol is None else tol
        rem = (k - basis.combine(c)).norm()
        if rem > tol * max(k.norm(), 1e-300):
            raise ValidationError(f"k(u) is not harmonic (relative remainder {rem / k.norm():.3g})")
    return c


def kuranishi_inverse(v, c, basis=None, tol=1e-13, max_iter=100, max_halvings=20):
    """Slice point u with k(u) = sum c_i e_i.

    Solves u = h - (D'')* G [beta, phi](u) by the chord iteration whose
    Jacobian is the identity at the origin.  Large data are first pulled to
    small norm with the slice action, then pushed back with its inverse.
    """
    basis = harmonic_basis(v) if basis is None else basis
    c = np.asarray(c, complex)
    grades = basis.grades
    if not np.any(c):
        z = np.zeros((v.context.L, v.rank, v.rank), complex)
        return SliceVector(v, z, z.copy(), True, True, True)
    xi = 1.0
    for _ in range(max_halvings + 1):
        h = basis.combine(c * xi ** grades)
        u, ok = _chord(v, h, tol, max_iter)
        if ok:
            out = cstar_on_slice(u, 1.0 / xi)
            out.in_hodge_slice = out.in_bb_slice = True
            return out
        xi *= 0.5
    raise ConvergenceError("Kuranishi inversion failed after globalization",
                           {"xi": xi, "norm": float(np.linalg.norm(c))})


def _chord(v, h, tol, max_iter):
    u = h
    ref = max(h.norm(), 1e-300)
    prev = np.inf
    for _ in range(max_iter):
        cb, cp = _green_correction(v, u)
        un = SliceVector(v, h.beta - cb, h.phi - cp)
        step = (un - u).norm() / ref
        u = un
        if step <= tol:
            return u, True
        if step >= prev or not np.isfinite(step):
            return u, False
        prev = step
    return u, False


def cstar_on_slice(u, xi):
    """xi . (sum beta_j, sum phi_j) = (sum xi^j beta_j, sum xi^(j+1) phi_j)."""
    if xi == 0:
        raise DomainError("xi must be nonzero")
    g = grade_matrix(u.base.rank)
    xi = complex(xi)
    out = SliceVector(u.base, u.beta * xi ** g, u.phi * xi ** (g + 1),
                      u.in_hodge_slice, u.in_bb_slice, u.harmonic)
    return out


def slice_point_along(v, direction, t, mode="auto"):
    """Point at parameter t on the curve through ``direction``.

    ``mode="slice"`` follows the slice curve with harmonic coordinates
    t k(direction); ``mode="ray"`` returns t * direction unchanged.  With
    ``"auto"`` the slice curve is used when the direction satisfies the slice
    equations, otherwise the ray (used for control directions).
    """
    if mode == "auto":
        classify(v, direction)
        mode = "slice" if direction.in_hodge_slice else "ray"
    if mode == "ray":
        return direction.scaled(t)
    if mode != "slice":
        raise ValidationError(f"unknown mode {mode!r}")
    basis = harmonic_basis(v)
    c = kuranishi(v, direction, basis, check=False)
    return kuranishi_inverse(v, t * c, basis)


# ---------------------------------------------------------------------------
# Gauge fixing
# ---------------------------------------------------------------------------

def _unipotent_inverse(F):
    """(1 + F)^-1 for strictly upper triangular F, by the finite series."""
    n = F.shape[-1]
    out = np.broadcast_to(np.eye(n), F.shape).astype(complex)
    term = out.copy()
    for _ in range(n - 1):
        term = -term @ F
        out = out + term
    return out


def gauge_action(v, beta, phi, f, mode="higgs"):
    """Apply g = 1 + f (f a master 0-form) to a Higgs pair or flat connection.

    Higgs mode: (dbar_0 + beta, Phi + phi) conjugated by g.  de Rham mode:
    D + beta + phi with D the flat connection of the VHS, so phi also
    receives -(del_0 g) g^-1 and beta the conjugated Phi*.
    """
    ctx = v.context
    F = ctx.scatter(f)
    n = v.rank
    g = np.eye(n) + F
    gi = _unipotent_inverse(F)
    Phi = ctx.Phi_l
    b = g @ beta @ gi - ctx.dbar_l(F) @ gi
    p = g @ (Phi + phi) @ gi - Phi
    if mode == "deRham":
        PS = ctx.PhiS_l
        b = b + g @ PS @ gi - PS
        p = p - ctx.del_l(F) @ gi
    elif mode != "higgs":
        raise ValidationError(f"unknown mode {mode!r}")
    return b, p


def flatness_residual_pair(v, beta, phi):
    """Weak curvature of D + beta + phi, D the flat connection of the VHS."""
    from .nahc import flatness_field
    ctx = v.context
    return flatness_field(ctx, ctx.Phi_l + phi, ctx.PhiS_l + beta)


def _check_input(v, beta, phi, mode):
    if mode == "higgs":
        ok, val = check_integrable(HiggsPoint(v, beta, phi))
        if not ok:
            raise ValidationError(f"input violates the integrability equation ({val:.3g})")
    elif mode == "deRham":
        ctx = v.context
        val = ctx.norm0(flatness_residual_pair(v, beta, phi))
        tol = integrability_tolerance(HiggsPoint(v, beta, phi)) + 10 * v.mesh.h ** 2
        if val > tol:
            raise ValidationError(f"D + beta + phi is not flat ({val:.3g})")
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    u = SliceVector(v, beta, phi)
    if not in_normal_form(v, u, 1e-12 * max(np.abs(beta).max(initial=1), np.abs(phi).max(initial=1))):
        raise ValidationError("input is not in normal form (beta in N+, phi in L + N+)")


def gauge_fix_to_slice(v, beta, phi, mode="higgs", check=True, report=None):
    """Find f in N+ such that (1 + f) . (beta, phi) satisfies D' mu = 0.

    Grade by grade, the grade-j piece of the gauged pair depends on f_j only
    through -D'' f_j, so each step is one Galerkin solve of (D'')* D'' on
    grade-j 0-forms; lower grades are recomputed exactly from the fixed f_k.
    Returns (SliceVector, g) with g = 1 + f at master nodes.
    """
    ctx = v.context
    n = v.rank
    if check:
        _check_input(v, beta, phi, mode)
    ops = ctx.sparse_ops()
    W = ctx._weights(1)
    f = np.zeros((ctx.Nm, n, n), complex)
    steps = []
    for j in range(1, v.ell):
        b, p = gauge_action(v, beta, phi, f, mode)
        K, M, sel = ctx.laplacian0("D2", j)
        Eb = ops["D2_0_b"] @ sel
        Ep = ops["D2_0_p"] @ sel
        vb = np.transpose(b, (1, 2, 0)).ravel()
        vp = np.transpose(p, (1, 2, 0)).ravel()
        rhs = Eb.conj().T @ (W * vb) + Ep.conj().T @ (W * vp)
        x = ctx.green0("D2", j)(rhs)
        res = np.linalg.norm(K @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        steps.append({"grade": j, "green_residual": float(res), "rhs_norm": float(np.linalg.norm(rhs))})
        if res > 1e-8:
            raise ConvergenceError("gauge-fixing Green solve failed", {"grade": j, "residual": res})
        f = f + ctx.vec_to_field(x, sel)
    b, p = gauge_action(v, beta, phi, f, mode)
    u = SliceVector(v, b, p)
    if report is not None:
        report["steps"] = steps
    return u, np.eye(n)[None] + f


def stabilizer_check(v, n_probe=6):
    """Smallest relative singular value of (D'')* D'' on each grade j >= 1.

    A trivial stabilizer (uniqueness of the gauge fixing) means every value
    is well above the kernel threshold h^2.
    """
    ctx = v.context
    out = {}
    for j in range(1, v.rank):
        K, M, _ = ctx.laplacian0("D2", j)
        rep = detect_kernel(K, M, v.mesh.h, n_probe=n_probe, want_basis=False)
        out[j] = {"dimension": rep.dimension, "smallest": float(rep.singular_values[0]),
                  "threshold": rep.threshold}
    return out
