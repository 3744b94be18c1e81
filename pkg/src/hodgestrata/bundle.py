"""Graded variations of Hodge structure and Higgs bundles near them.

A chain VHS is E = E_1 + ... + E_l with rank-one summands E_j = K^{a_j}
(times a flat n-torsion twist) and Higgs blocks Phi_j : E_j -> E_{j+1} K.
Endomorphisms are n x n arrays per node in the holomorphic frame dz^{a_j};
entry (k, i) maps E_i to E_k, has grade i - k and is a section of
K^{a_k - a_i}.  The Higgs field is therefore strictly lower triangular.

Storage conventions used throughout the package:

* endomorphism 0-forms live at master nodes, shape (nodes, n, n);
* endomorphism 1-forms live at element-local nodes, as the coefficient of
  dz-bar ("b") or dz ("p"), shape (local nodes, n, n);
* (1,1)-forms are reported through i Lambda, a 0-form at master nodes, which
  is an isometry with the conventions of :mod:`hodgestrata.surface`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .surface import (ConfigurationError, ConvergenceError, SurfaceMesh, TwistedSection,
                      bordered_lu, detect_kernel)


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class DomainError(ValueError):
    """Parameter outside the domain of an operation (for example xi = 0)."""


class UnsupportedError(ValueError):
    """Construction not available for the given surface or data."""


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

@dataclass
class GradedVHS:
    """Chain VHS E_1 + ... + E_l with E_j = K^{a_j} and blocks Phi_j."""

    mesh: SurfaceMesh
    exponents: tuple                  # a_j as Fractions
    phi_blocks: list                  # master arrays, coefficient of Phi_j dz
    metric_constants: np.ndarray      # c_j with H_j = c_j (2 / rho)^{a_j}
    twist: tuple | None = None
    torsion: int = 1
    kind: str = "custom"
    metric_correction: np.ndarray | None = None   # diagonal f_V, shape (nodes, l)
    _ctx: object = field(default=None, repr=False, compare=False)

    @property
    def rank(self):
        return len(self.exponents)

    @property
    def ell(self):
        return len(self.exponents)

    @property
    def ranks(self):
        return (1,) * self.ell

    def degrees(self):
        """Exact degrees deg E_j = a_j (2g - 2); twists have degree 0."""
        chi = 2 * self.mesh.genus - 2
        return tuple(Fraction(a) * chi for a in self.exponents)

    @property
    def harmonic_scale(self):
        """Diagonal scale f_V relating the reference metric to the hyperbolic one."""
        from .nahc import MetricScale
        n, Nm = self.rank, self.mesh.n_nodes
        f = np.zeros((Nm, n, n), complex)
        if self.metric_correction is not None:
            f[:, np.arange(n), np.arange(n)] = self.metric_correction
        return MetricScale(self.without_correction(), f, 0.0)

    def without_correction(self):
        if self.metric_correction is None:
            return self
        return GradedVHS(self.mesh, self.exponents, self.phi_blocks, self.metric_constants,
                         self.twist, self.torsion, self.kind)

    @property
    def context(self):
        if self._ctx is None:
            self._ctx = EndContext(self)
        return self._ctx

    def phi_matrix(self):
        """Base Higgs field coefficient at master nodes, shape (nodes, n, n)."""
        n = self.rank
        A = np.zeros((self.mesh.n_nodes, n, n), complex)
        for j, blk in enumerate(self.phi_blocks):
            A[:, j + 1, j] = blk
        return A

    def summary(self):
        return {
            "rank": self.rank,
            "exponents": [str(a) for a in self.exponents],
            "degrees": [str(d) for d in self.degrees()],
            "twist": None if self.twist is None else list(map(int, self.twist)),
            "torsion": self.torsion,
            "kind": self.kind,
        }


@dataclass
class EndGrading:
    """Graded pieces of an endomorphism field, keyed by grade i - k."""

    parts: dict

    def total(self):
        return sum(self.parts.values())

    def n_plus(self):
        return sum(v for j, v in self.parts.items() if j > 0)

    def n_minus(self):
        return sum(v for j, v in self.parts.items() if j < 0)

    def levi(self):
        """Traceless part of the grade-0 piece."""
        d = self.parts[0]
        n = d.shape[-1]
        tr = np.trace(d, axis1=-2, axis2=-1)
        return d - tr[..., None, None] * np.eye(n) / n


@dataclass
class HiggsPoint:
    """(dbar_0 + beta, Phi_0 + phi) with beta, phi at local nodes."""

    base: GradedVHS
    beta: np.ndarray
    phi: np.ndarray
    integrable: bool = True
    normal_form: bool = True

    @property
    def higgs_local(self):
        return self.base.context.Phi_l + self.phi


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def fuchsian_constants(n):
    """Constants c_j of the uniformizing harmonic metric, product one.

    The Hitchin equation for H_j = c_j (2 / rho)^{a_j} and unit blocks reduces
    to c_{j+1} / c_j = j (n - j) / 2.
    """
    logs = [0.0]
    for j in range(1, n):
        logs.append(logs[-1] + np.log(j * (n - j) / 2.0))
    logs = np.array(logs)
    return np.exp(logs - logs.mean())


def enumerate_twists(n, genus):
    """All n-torsion flat line bundles, as exponent vectors on the generators."""
    return list(itertools.product(range(n), repeat=2 * genus))


def make_fuchsian(mesh, n, twist=None, harmonic=True):
    """The uniformizing VHS E_j = K^{(n+1)/2 - j} with unit Higgs blocks.

    The reference metric is induced by the hyperbolic metric.  With
    ``harmonic`` the discrete self-duality equation is solved for a diagonal
    correction, so that the reference metric is harmonic to solver tolerance.
    """
    if mesh.genus < 2:
        raise UnsupportedError("the Fuchsian point needs genus >= 2 (K is trivial on a torus)")
    if n < 2:
        raise ConfigurationError("rank must be at least 2")
    if twist is not None:
        twist = tuple(int(t) % n for t in twist)
        if len(twist) != 2 * mesh.genus:
            raise ConfigurationError("twist needs one exponent per generator")
    a = tuple(Fraction(n + 1, 2) - j for j in range(1, n + 1))
    ones = [np.ones(mesh.n_nodes, complex) for _ in range(n - 1)]
    v = GradedVHS(mesh, a, ones, fuchsian_constants(n), twist, n, "fuchsian")
    return with_harmonic_metric(v) if harmonic else v


def with_harmonic_metric(v, passes=6, rtol=1e-4):
    """Copy of v whose reference metric solves the discrete self-duality equation.

    The correction is folded into the reference metric and re-solved until the
    residual at f = 0 is below ``rtol`` times the solver tolerance in the
    updated context (the curvature of the updated metric is discretized
    directly).
    """
    from .nahc import default_tolerance, residual_norm, solve_harmonic_metric, zero_scale
    tol = rtol * default_tolerance(v.mesh)
    w = v
    for _ in range(passes):
        ctx = w.context
        zero = np.zeros((ctx.L, ctx.n, ctx.n), complex)
        p = HiggsPoint(w, zero, zero.copy())
        if residual_norm(p, zero_scale(w)) <= tol:
            return w
        m = solve_harmonic_metric(p, tol=tol)
        corr = np.real(np.diagonal(m.f, axis1=1, axis2=2)).copy()
        base = 0.0 if w.metric_correction is None else w.metric_correction
        w = GradedVHS(w.mesh, w.exponents, w.phi_blocks, w.metric_constants, w.twist,
                      w.torsion, w.kind, base + corr)
        w.context._cache["nahc_lu"] = ctx._cache.get("nahc_lu", {})
    raise ConvergenceError("reference metric correction did not settle", {"passes": passes})


def make_chain(mesh, exponents, phi_blocks, constants=None):
    """A chain VHS from explicit exponents and Higgs block coefficients."""
    a = tuple(Fraction(x).limit_denominator(2) for x in exponents)
    if sum(a) != 0:
        raise ValidationError("determinant constraint: exponents must sum to zero")
    if len(phi_blocks) != len(a) - 1:
        raise ValidationError("need l - 1 Higgs blocks")
    c = np.ones(len(a)) if constants is None else np.asarray(constants, float)
    blocks = [np.asarray(b, complex) * np.ones(mesh.n_nodes) for b in phi_blocks]
    return GradedVHS(mesh, a, blocks, c, None, 1, "custom")


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------

def grade_matrix(n):
    k, i = np.indices((n, n))
    return i - k


def end_grading(s, v):
    s = np.asarray(s)
    n = v.rank
    if s.ndim < 2 or s.shape[-2:] != (n, n):
        raise TypeError(f"expected trailing shape ({n}, {n}), got {s.shape}")
    g = grade_matrix(n)
    return EndGrading({j: np.where(g == j, s, 0) for j in range(1 - n, n)})


def grade_part(X, j):
    n = X.shape[-1]
    return np.where(grade_matrix(n) == j, X, 0)


def graded_scale(X, xi, shift=0):
    """Multiply the grade-j part of X by xi^(j + shift)."""
    n = X.shape[-1]
    g = grade_matrix(n)
    return X * np.asarray(xi, complex) ** (g + shift)


# ---------------------------------------------------------------------------
# The endomorphism-bundle operator context
# ---------------------------------------------------------------------------

def _hermitian_basis(n):
    """Frobenius-orthonormal basis of traceless hermitian n x n matrices."""
    out = []
    for k in range(n):
        for i in range(k + 1, n):
            m = np.zeros((n, n), complex)
            m[k, i] = m[i, k] = 1 / np.sqrt(2)
            out.append(m)
            m = np.zeros((n, n), complex)
            m[k, i], m[i, k] = -1j / np.sqrt(2), 1j / np.sqrt(2)
            out.append(m)
    for d in range(1, n):
        m = np.zeros((n, n), complex)
        m[np.arange(d), np.arange(d)] = 1
        m[d, d] = -d
        out.append(m / np.sqrt(d * (d + 1)))
    return np.array(out)


def _traceless_diag_basis(n):
    """Orthonormal basis of traceless real diagonal vectors, shape (n-1, n)."""
    out = []
    for d in range(1, n):
        v = np.zeros(n)
        v[:d] = 1
        v[d] = -d
        out.append(v / np.sqrt(d * (d + 1)))
    return np.array(out)


class EndContext:
    """Discrete operators on End(E)-valued forms for a chain VHS."""

    def __init__(self, vhs):
        self.vhs = vhs
        m = self.mesh = vhs.mesh
        n = self.n = vhs.rank
        self.Nm, self.L = m.n_nodes, m.n_local
        a = np.array([float(x) for x in vhs.exponents])
        self.a = a
        self.c = np.asarray(vhs.metric_constants, float)
        self.wts = a[:, None] - a[None, :]          # entry (k, i) is a section of K^{a_k - a_i}
        self.grades = grade_matrix(n)
        self.H_m = self.c[None, :] * (2.0 / m.rho[:, None]) ** a[None, :]
        self.H_l = self.c[None, :] * (2.0 / m.rho_loc[:, None]) ** a[None, :]
        if vhs.metric_correction is not None:
            corr = np.asarray(vhs.metric_correction, float)
            self.H_m = self.H_m * np.exp(2 * corr)
            self.H_l = self.H_l * np.exp(2 * corr[m.loc2glob])
        self.eta_m = self.H_m[:, :, None] / self.H_m[:, None, :]
        self.eta_l = self.H_l[:, :, None] / self.H_l[:, None, :]
        self.sqrtH_m = np.sqrt(self.H_m)
        self.sqrtH_l = np.sqrt(self.H_l)
        self.fac = {}
        for ft, (p, q) in {"0": (0, 0), "01": (0, 1), "10": (1, 0), "11": (1, 1)}.items():
            F = np.empty((self.L, n, n), complex)
            for k in range(n):
                for i in range(n):
                    F[:, k, i] = m.factor(self.wts[k, i] + p, q)
            self.fac[ft] = F
        self.form_l = 2.0 / m.rho_loc
        self.form_m = 2.0 / m.rho
        self.G0 = sp.csr_matrix((m.w_loc / m.weights[m.loc2glob],
                                 (m.loc2glob, np.arange(self.L))), shape=(self.Nm, self.L))
        self.Dz = m.d_local("z")
        self.Dzb = m.d_local("zb")
        self.DzH = sp.csr_matrix(self.Dz.conj().T)
        self.DzbH = sp.csr_matrix(self.Dzb.conj().T)
        self.Phi_m = vhs.phi_matrix()
        self.Phi_l = self.scatter(self.Phi_m, "10")
        self.PhiS_l = self.adj(self.Phi_l)
        self._cache = {}

    # -- frame utilities ---------------------------------------------------
    def scatter(self, S, form="0"):
        return S[self.mesh.loc2glob] * self.fac[form]

    def gather(self, X, form="0"):
        Y = (X / self.fac[form]).reshape(self.L, -1)
        return (self.G0 @ Y).reshape(self.Nm, self.n, self.n)

    def adj(self, X, local=True):
        """Pointwise adjoint with respect to the reference metric."""
        eta = self.eta_l if local else self.eta_m
        return np.conj(np.swapaxes(X, -1, -2)) * np.swapaxes(eta, -1, -2)

    def to_unitary(self, X, local=True):
        s = self.sqrtH_l if local else self.sqrtH_m
        return X * s[:, :, None] / s[:, None, :]

    def from_unitary(self, X, local=True):
        s = self.sqrtH_l if local else self.sqrtH_m
        return X * s[:, None, :] / s[:, :, None]

    def apply(self, D, X):
        return (D @ X.reshape(X.shape[0], -1)).reshape((D.shape[0],) + X.shape[1:])

    def dbar_l(self, X):
        """Element-wise d/dz-bar of local values (entry by entry)."""
        return self.apply(self.Dzb, X)

    def del_l(self, X):
        """Element-wise Chern d/dz of local values: eta^-1 d(eta X)."""
        return self.apply(self.Dz, self.eta_l * X) / self.eta_l

    # -- pairings ------------------------------------------------------------
    def ip_local(self, X, Y, form_degree=0):
        """sum_l w_l |.|^2 pairing of local fields (linear in X)."""
        nf = self.form_l ** form_degree
        pw = np.einsum("lki,lki,lki->l", X, np.conj(Y), self.eta_l)
        return complex(np.sum(self.mesh.w_loc * nf * pw))

    def ip_master(self, S, T):
        pw = np.einsum("mki,mki,mki->m", S, np.conj(T), self.eta_m)
        return complex(np.sum(self.mesh.weights * pw))

    def ip1(self, u, v):
        """L^2 pairing of 1-forms given as (b, p) pairs of local arrays."""
        return self.ip_local(u[0], v[0], 1) + self.ip_local(u[1], v[1], 1)

    def norm0(self, S):
        return float(np.sqrt(max(self.ip_master(S, S).real, 0.0)))

    def norm1(self, u):
        return float(np.sqrt(max(self.ip1(u, u).real, 0.0)))

    # -- weak representers -----------------------------------------------------
    def weak(self, Y=None, dz=None, dzb=None):
        """Master field Z with <chi, Z>_M = sum_l w (chi_l, Y_l)
        + <del chi, dz dz> + <dbar chi, dzb dz-bar> for all 0-forms chi."""
        w = self.mesh.w_loc[:, None, None]
        acc = np.zeros((self.L, self.n, self.n), complex)
        if Y is not None:
            acc += Y
        f1 = self.form_l[:, None, None]
        if dz is not None:
            acc += self.apply(self.DzH, w * f1 * dz) / w
        if dzb is not None:
            acc += self.apply(self.DzbH, w * f1 * self.eta_l * dzb) / (w * self.eta_l)
        return self.gather(acc, "0")

    # -- first order operators on 0-forms (strong, into local 1-forms) ---------
    def D2_0(self, S, Phi_l=None):
        """D'' S = (dbar S, [Phi, S]) with S a master 0-form."""
        Phi_l = self.Phi_l if Phi_l is None else Phi_l
        Sl = self.scatter(S)
        return self.dbar_l(Sl), Phi_l @ Sl - Sl @ Phi_l

    def D1_0(self, S, PhiS_l=None):
        """D' S = ([Phi*, S], del S)."""
        PhiS_l = self.PhiS_l if PhiS_l is None else PhiS_l
        Sl = self.scatter(S)
        return PhiS_l @ Sl - Sl @ PhiS_l, self.del_l(Sl)

    # -- weak second stage: 1-forms -> i Lambda (1,1) --------------------------
    def weak_D2_1(self, u):
        """i Lambda D''(b, p) as a weak master field: D''(b,p) = -dbar p + [Phi, b]."""
        b, p = u
        f1 = self.form_l[:, None, None]
        return self.weak(Y=f1 * (self.Phi_l @ b - b @ self.Phi_l), dz=p)

    def weak_D1_1(self, u):
        """i Lambda D'(b, p) weakly: D'(b,p) = del b - [Phi*, p]."""
        b, p = u
        f1 = self.form_l[:, None, None]
        return self.weak(Y=-f1 * (self.PhiS_l @ p - p @ self.PhiS_l), dzb=-b)

    def weak_bracket(self, u):
        """i Lambda [beta, phi] with [beta, phi] = [p, b] dz ^ dz-bar."""
        b, p = u
        f1 = self.form_l[:, None, None]
        return self.weak(Y=f1 * (p @ b - b @ p))

    # -- sparse assembly -----------------------------------------------------
    def _entry_index(self, k, i):
        return k * self.n + i

    def _scatter_sparse(self, form):
        """Block scatter (n^2 L x n^2 Nm), entry-major ordering."""
        key = ("P", form)
        if key not in self._cache:
            n, L, Nm = self.n, self.L, self.Nm
            rows, cols, vals = [], [], []
            g = self.mesh.loc2glob
            for k in range(n):
                for i in range(n):
                    e = self._entry_index(k, i)
                    rows.append(e * L + np.arange(L))
                    cols.append(e * Nm + g)
                    vals.append(self.fac[form][:, k, i])
            self._cache[key] = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n * n * L, n * n * Nm))
        return self._cache[key]

    def _blockdiag(self, D):
        return sp.block_diag([D] * (self.n * self.n), format="csr")

    def _diag_entries(self, F):
        """Diagonal sparse matrix multiplying entry (k,i) at node l by F[l,k,i]."""
        return sp.diags(np.transpose(F, (1, 2, 0)).ravel())

    def _lmul(self, A):
        """Sparse pointwise X -> A X on entry-major local vectors."""
        n, L = self.n, self.L
        rows, cols, vals = [], [], []
        ar = np.arange(L)
        for k in range(n):
            for m_ in range(n):
                if not np.any(A[:, k, m_]):
                    continue
                for i in range(n):
                    rows.append(self._entry_index(k, i) * L + ar)
                    cols.append(self._entry_index(m_, i) * L + ar)
                    vals.append(A[:, k, m_])
        if not rows:
            return sp.csr_matrix((n * n * L, n * n * L))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n * n * L, n * n * L))

    def _rmul(self, A):
        n, L = self.n, self.L
        rows, cols, vals = [], [], []
        ar = np.arange(L)
        for m_ in range(n):
            for i in range(n):
                if not np.any(A[:, m_, i]):
                    continue
                for k in range(n):
                    rows.append(self._entry_index(k, i) * L + ar)
                    cols.append(self._entry_index(k, m_) * L + ar)
                    vals.append(A[:, m_, i])
        if not rows:
            return sp.csr_matrix((n * n * L, n * n * L))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n * n * L, n * n * L))

    def _ad(self, A):
        return self._lmul(A) - self._rmul(A)

    def sparse_ops(self):
        """Broken first-order operators as sparse matrices on entry-major vectors."""
        if "ops" not in self._cache:
            P0, P01, P10 = (self._scatter_sparse(f) for f in ("0", "01", "10"))
            Dzb, Dz = self._blockdiag(self.Dzb), self._blockdiag(self.Dz)
            eta = self._diag_entries(self.eta_l)
            eta_inv = self._diag_entries(1.0 / self.eta_l)
            dchern = eta_inv @ Dz @ eta
            adP, adS = self._ad(self.Phi_l), self._ad(self.PhiS_l)
            ops = {
                # 0-forms -> local 1-forms
                "D2_0_b": Dzb @ P0, "D2_0_p": adP @ P0,
                "D1_0_b": adS @ P0, "D1_0_p": dchern @ P0,
                # continuous 1-forms -> local (1,1) coefficients
                "D2_1_b": adP @ P01, "D2_1_p": -(Dzb @ P10),
                "D1_1_b": dchern @ P01, "D1_1_p": -(adS @ P10),
            }
            self._cache["ops"] = {k: sp.csr_matrix(v) for k, v in ops.items()}
        return self._cache["ops"]

    def _weights(self, form_degree):
        w = self.mesh.w_loc[:, None, None] * self.form_l[:, None, None] ** form_degree
        return np.transpose(w * self.eta_l, (1, 2, 0)).ravel()

    def _mass(self, form_degree):
        w = self.mesh.weights[:, None, None] * self.form_m[:, None, None] ** form_degree
        return np.transpose(w * self.eta_m, (1, 2, 0)).ravel()

    def entry_dofs(self, entries, traceless_diag=False):
        """Column selector (sparse) from a reduced dof vector to entry-major masters.

        For grade 0 with ``traceless_diag`` the diagonal is parametrized by an
        orthonormal traceless basis.
        """
        n, Nm = self.n, self.Nm
        cols, rows, vals = [], [], []
        off = 0
        diag = [e for e in entries if e[0] == e[1]]
        other = [e for e in entries if e[0] != e[1]]
        for (k, i) in other:
            rows.append(self._entry_index(k, i) * Nm + np.arange(Nm))
            cols.append(off + np.arange(Nm))
            vals.append(np.ones(Nm))
            off += Nm
        if diag:
            if traceless_diag:
                T = _traceless_diag_basis(n)
                for r in range(n - 1):
                    for k in range(n):
                        if T[r, k] != 0:
                            rows.append(self._entry_index(k, k) * Nm + np.arange(Nm))
                            cols.append(off + np.arange(Nm))
                            vals.append(np.full(Nm, T[r, k]))
                    off += Nm
            else:
                for (k, _) in diag:
                    rows.append(self._entry_index(k, k) * Nm + np.arange(Nm))
                    cols.append(off + np.arange(Nm))
                    vals.append(np.ones(Nm))
                    off += Nm
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n * n * Nm, off))

    def grade_entries(self, j):
        n = self.n
        return [(k, k + j) for k in range(n) if 0 <= k + j < n]

    def vec_to_field(self, x, sel):
        full = sel @ x
        return np.transpose(full.reshape(self.n, self.n, self.Nm), (2, 0, 1))

    def field_to_vec(self, S, sel):
        full = np.transpose(S, (1, 2, 0)).ravel()
        return sel.T @ full

    # -- Laplacians on 0-forms ---------------------------------------------
    def laplacian0(self, which, j):
        """Galerkin (D'')* D'' ("D2") or (D')* D' ("D1") on grade-j 0-forms.

        Returns (K, mass diagonal, selector).
        """
        key = ("lap0", which, j)
        if key not in self._cache:
            ops = self.sparse_ops()
            sel = self.entry_dofs(self.grade_entries(j), traceless_diag=(j == 0))
            Eb = ops[f"{which}_0_b"] @ sel
            Ep = ops[f"{which}_0_p"] @ sel
            W = sp.diags(self._weights(1))
            K = sp.csc_matrix(Eb.conj().T @ W @ Eb + Ep.conj().T @ W @ Ep)
            # selector columns are orthonormal per node, so sel^T diag(m) sel is diagonal
            M = np.real((sel.multiply(sel)).T @ self._mass(0))
            self._cache[key] = (K, M, sel)
        return self._cache[key]

    def green0(self, which, j):
        """Solver for the grade-j Laplacian (no kernel expected at a stable VHS)."""
        key = ("green0", which, j)
        if key not in self._cache:
            K, M, sel = self.laplacian0(which, j)
            self._cache[key] = bordered_lu(K, M)
        return self._cache[key]

    def solve_laplacian0(self, which, rhs_field, grades=None, tol=None):
        """Solve Laplacian(S) = rhs gradewise; rhs and S are master 0-forms.

        Returns (S, residual) where residual is the relative L^2 residual.
        """
        n = self.n
        tol = tol if tol is not None else (1e-10 if self.mesh.kind == "torus" else 1e-8)
        grades = range(1 - n, n) if grades is None else grades
        out = np.zeros_like(rhs_field)
        worst = 0.0
        for j in grades:
            K, M, sel = self.laplacian0(which, j)
            b = self.field_to_vec(rhs_field, sel)
            if not np.any(b):
                continue
            x = self.green0(which, j)(M * b)
            r = K @ x - M * b
            res = np.sqrt(np.sum(np.abs(r) ** 2 / M)) / max(np.sqrt(np.sum(M * np.abs(b) ** 2)), 1e-300)
            worst = max(worst, float(res))
            out = out + self.vec_to_field(x, sel)
        if worst > tol:
            raise ConvergenceError("Green solve residual above tolerance", {"residual": worst})
        return out, worst

    # -- harmonic spaces -------------------------------------------------------
    def c1_selector(self, j):
        """Dofs of C_j^1: beta in grade j, phi in grade j - 1 (traceless if grade 0)."""
        sel_b = self.entry_dofs(self.grade_entries(j), traceless_diag=True) \
            if self.grade_entries(j) else None
        sel_p = self.entry_dofs(self.grade_entries(j - 1), traceless_diag=True) \
            if self.grade_entries(j - 1) else None
        return sel_b, sel_p

    def harmonic_pencil(self, j):
        """Galerkin form |D'' mu|^2 + |D' mu|^2 on continuous C_j^1 and its mass."""
        key = ("harm", j)
        if key not in self._cache:
            ops = self.sparse_ops()
            sel_b, sel_p = self.c1_selector(j)
            nb = sel_b.shape[1] if sel_b is not None else 0
            np_ = sel_p.shape[1] if sel_p is not None else 0
            W2 = sp.diags(self._weights(2))
            blocks2, blocks1 = [], []
            for name in ("D2_1", "D1_1"):
                parts = []
                if sel_b is not None:
                    parts.append(ops[f"{name}_b"] @ sel_b)
                if sel_p is not None:
                    parts.append(ops[f"{name}_p"] @ sel_p)
                blocks2.append(sp.hstack(parts, format="csr"))
            K = sum(E.conj().T @ W2 @ E for E in blocks2)
            m1 = self._mass(1)
            Ms = []
            if sel_b is not None:
                Ms.append(np.real((sel_b.multiply(sel_b)).T @ m1))
            if sel_p is not None:
                Ms.append(np.real((sel_p.multiply(sel_p)).T @ m1))
            self._cache[key] = (sp.csc_matrix(K), np.concatenate(Ms), sel_b, sel_p, nb, np_)
        return self._cache[key]

    def c1_to_local(self, x, j):
        """Continuous C_j^1 coefficient vector -> local (b, p) arrays."""
        _, _, sel_b, sel_p, nb, _ = self.harmonic_pencil(j)
        b = np.zeros((self.L, self.n, self.n), complex)
        p = np.zeros_like(b)
        if sel_b is not None:
            b = self.scatter(self.vec_to_field(x[:nb], sel_b), "01")
        if sel_p is not None:
            p = self.scatter(self.vec_to_field(x[nb:], sel_p), "10")
        return b, p

    # -- Kahler identity diagnostic -------------------------------------------
    def kahler_discrepancy(self, mu_b, mu_p):
        """Compare the quadrature adjoint of D'' with -i Lambda D' on a 1-form.

        mu_b, mu_p are continuous master fields (coefficients of dz-bar, dz).
        Returns (discrepancy, reference norm).
        """
        ops = self.sparse_ops()
        vb = np.transpose(mu_b, (1, 2, 0)).ravel()
        vp = np.transpose(mu_p, (1, 2, 0)).ravel()
        P01, P10 = self._scatter_sparse("01"), self._scatter_sparse("10")
        W1 = self._weights(1)
        M0 = self._mass(0)
        lb, lp = P01 @ vb, P10 @ vp
        adj = (ops["D2_0_b"].conj().T @ (W1 * lb) + ops["D2_0_p"].conj().T @ (W1 * lp)) / M0
        adj = np.transpose(adj.reshape(self.n, self.n, self.Nm), (2, 0, 1))
        # strong: D'(b,p) = del b - [Phi*, p] at local nodes, averaged, then -i Lambda
        b = self.scatter(mu_b, "01")
        p = self.scatter(mu_p, "10")
        loc11 = self.del_l(b) - (self.PhiS_l @ p - p @ self.PhiS_l)
        c11 = self.gather(loc11, "11")
        strong = -1j * (-2j) * c11 / self.mesh.rho[:, None, None]
        diff = adj - strong
        return self.norm0(diff), self.norm0(strong)


# ---------------------------------------------------------------------------
# Hitchin base, sections, opers
# ---------------------------------------------------------------------------

def hitchin_invariants(p):
    """Characteristic-polynomial invariants (q_2, ..., q_n) of the Higgs field.

    q_j = (-1)^(j+1) e_j(Phi), where e_j is the j-th elementary symmetric
    function of the eigenvalues; q_j is a section of K^j.
    """
    ctx = p.base.context
    Phi = ctx.gather(p.higgs_local, "10")
    n = ctx.n
    powers = []
    X = np.broadcast_to(np.eye(n), Phi.shape).astype(complex)
    for _ in range(n):
        X = X @ Phi
        powers.append(np.trace(X, axis1=1, axis2=2))
    e = [np.ones(Phi.shape[0], complex)]
    for k in range(1, n + 1):
        acc = np.zeros(Phi.shape[0], complex)
        for i in range(1, k + 1):
            acc += (-1) ** (i - 1) * e[k - i] * powers[i - 1]
        e.append(acc / k)
    return tuple(TwistedSection(p.base.mesh, float(j), (-1) ** (j + 1) * e[j])
                 for j in range(2, n + 1))


def highest_weight_insertion(v, j):
    """Constant pattern X^(j) of grade j commuting with Phi_0*, normalized so that
    the (j+1)-st invariant of Phi_0 + q X^(j) is q.
    """
    n = v.rank
    c = np.asarray(v.metric_constants, float)
    r = c[1:] / c[:-1]               # H_{k+1} / H_k up to the common power of 2 / rho
    X = np.zeros((n, n))
    kappa = 1.0
    for k in range(n - j):
        X[k, k + j] = kappa
        if k + j + 1 < n:
            kappa = kappa * r[k + j] / r[k]
    # det(x - M) = sum poly[k] x^(n-k) with poly[k] = (-1)^k e_k, so q_{j+1} = -poly[j+1]
    val = -np.poly(np.diag(np.ones(n - 1), -1) + X)[j + 1].real
    return X / val


def hitchin_section(v, q, tol=None):
    """HiggsPoint (dbar_0, Phi_0 + q_2 X^(1) + ... + q_n X^(n-1)), beta = 0."""
    if v.kind != "fuchsian":
        raise ValidationError("the Hitchin section is parametrized at a Fuchsian point")
    ctx = v.context
    n = v.rank
    if len(q) != n - 1:
        raise ValidationError(f"need {n - 1} differentials")
    phi = np.zeros((ctx.L, n, n), complex)
    for j, qj in enumerate(q, start=1):
        vals = qj.values if isinstance(qj, TwistedSection) else np.asarray(qj, complex)
        if isinstance(qj, TwistedSection) and qj.weight != j + 1:
            raise ValidationError(f"q_{j + 1} must have weight {j + 1}")
        _check_holomorphic(v.mesh, vals, j + 1, tol)
        X = highest_weight_insertion(v, j)
        Q = vals[:, None, None] * X[None]
        phi += ctx.scatter(Q, "10")
    return HiggsPoint(v, np.zeros_like(phi), phi)


def _check_holomorphic(mesh, vals, w, tol=None):
    from .surface import dbar
    s = TwistedSection(mesh, float(w), vals)
    nrm = s.norm()
    tol = tol if tol is not None else 10 * mesh.h ** 2 * max(nrm, 1.0)
    d = dbar(s).norm()
    if d > tol:
        raise ValidationError(f"differential is not holomorphic (|dbar q| = {d:.3g})")


def oper_point(v, q, tol=None):
    """The lambda = 1 connection (dbar_0 + Phi_0*, del_0 + Phi_0 + q)."""
    from .twistor import LambdaConnection
    hp = hitchin_section(v, q, tol)
    ctx = v.context
    return LambdaConnection(v, 1.0, ctx.PhiS_l.copy(), ctx.Phi_l + hp.phi)


def integrability_residual(p):
    """i Lambda of dbar_E Phi_total, i.e. D''(beta, phi) + [beta, phi] (weak form)."""
    ctx = p.base.context
    b, ph = p.beta, p.phi
    f1 = ctx.form_l[:, None, None]
    A = ctx.Phi_l + ph
    return ctx.weak(Y=f1 * (A @ b - b @ A), dz=ph)


def integrability_tolerance(p):
    ctx = p.base.context
    data = ctx.norm1((p.beta, p.phi)) + ctx.norm1((np.zeros_like(ctx.Phi_l), ctx.Phi_l))
    return 10 * p.base.mesh.h ** 2 * data


def check_integrable(p):
    r = integrability_residual(p)
    val = p.base.context.norm0(r)
    return val < integrability_tolerance(p), val


# ---------------------------------------------------------------------------
# C* action
# ---------------------------------------------------------------------------

def cstar_scale(p, xi):
    """Multiply the Higgs field by xi (not in normal form until gauged by g_xi)."""
    if xi == 0:
        raise DomainError("xi must be nonzero")
    ctx = p.base.context
    phi = (xi - 1) * ctx.Phi_l + xi * p.phi
    return HiggsPoint(p.base, p.beta.copy(), phi, p.integrable, normal_form=(xi == 1))


def g_xi_gauge(v, xi):
    """diag(xi^a, xi^(a-1), ...) with sum_j rk(E_{j+1}) (a - j) = 0."""
    if xi == 0:
        raise DomainError("xi must be nonzero")
    ell = v.ell
    ranks = np.array(v.ranks)
    a = float(np.sum(ranks * np.arange(ell)) / np.sum(ranks))
    powers = a - np.arange(ell)
    return np.exp(powers * np.log(complex(xi)))


def apply_constant_gauge(p, g):
    """Apply a constant diagonal gauge g to (dbar_0 + beta, Phi)."""
    ctx = p.base.context
    G = g[:, None] / g[None, :]
    beta = p.beta * G
    Phi = ctx.Phi_l + p.phi
    return HiggsPoint(p.base, beta, Phi * G - ctx.Phi_l, p.integrable, normal_form=False)


def normalize_scaled(p, xi):
    """g_xi applied to cstar_scale(p, xi): the graded scaling of the normal form."""
    q = apply_constant_gauge(cstar_scale(p, xi), g_xi_gauge(p.base, xi))
    q.phi = q.phi * (np.abs(grade_matrix(p.base.rank) + 1) > 0)
    q.normal_form = True
    return q


def in_normal_form(p, tol=0.0):
    n = p.base.rank
    g = grade_matrix(n)
    bad_b = np.abs(np.where(g < 1, p.beta, 0)).max(initial=0.0)
    bad_p = np.abs(np.where(g < 0, p.phi, 0)).max(initial=0.0)
    tr = np.abs(np.trace(p.phi, axis1=1, axis2=2)).max(initial=0.0)
    return max(bad_b, bad_p, tr) <= tol


def bb_limit(point, filtration=None, semistable=True, tol=1e-10):
    """Limit xi -> 0 of the C* orbit.

    For a HiggsPoint in normal form this is its base.  For a LambdaConnection
    the tautological filtration by the summands must be Griffiths transverse;
    the graded Higgs field is read off from the grade -1 part.
    """
    from .twistor import LambdaConnection
    if isinstance(point, HiggsPoint):
        if not in_normal_form(point, tol):
            raise ValidationError("point is not in normal form relative to its base")
        return point.base
    if isinstance(point, LambdaConnection):
        if filtration not in (None, "tautological"):
            raise ValidationError("only the tautological filtration is supported")
        v = point.base
        n = v.rank
        g = grade_matrix(n)
        scale = max(np.abs(point.dbar_op).max(initial=0), np.abs(point.nabla_op).max(initial=0), 1)
        if np.abs(np.where(g < 0, point.dbar_op, 0)).max(initial=0) > tol * scale:
            raise ValidationError("dbar operator does not preserve the filtration")
        if np.abs(np.where(g < -1, point.nabla_op, 0)).max(initial=0) > tol * scale:
            raise ValidationError("filtration is not Griffiths transverse")
        if np.abs(np.where(g == 0, point.dbar_op, 0)).max(initial=0) > tol * scale:
            raise UnsupportedError("graded holomorphic structure differs from the base")
        if not semistable:
            raise ValidationError("graded Higgs bundle flagged unstable")
        ctx = v.context
        phiF = ctx.gather(np.where(g == -1, point.nabla_op, 0), "10")
        blocks = [phiF[:, j + 1, j] for j in range(n - 1)]
        return GradedVHS(v.mesh, v.exponents, blocks, v.metric_constants, v.twist,
                         v.torsion, v.kind if all(np.allclose(b, 1) for b in blocks) else "custom")
    raise TypeError("expected a HiggsPoint or LambdaConnection")


def same_vhs(v, w, tol=1e-10):
    return (v.exponents == w.exponents and
            all(np.abs(a - b).max() <= tol for a, b in zip(v.phi_blocks, w.phi_blocks)))


# ---------------------------------------------------------------------------
# Energy and stability
# ---------------------------------------------------------------------------

def higgs_energy(p, scale=None):
    """||Phi||^2 = i int Tr(Phi ^ Phi*) for the metric H_ref exp(2 f)."""
    ctx = p.base.context
    A = p.higgs_local
    if scale is None or not np.any(scale.f):
        As = ctx.adj(A)
    else:
        from .nahc import metric_exp
        E, Ei = metric_exp(ctx, scale.f, local=True)
        As = Ei @ ctx.adj(A) @ E
    pw = np.real(np.trace(A @ As, axis1=1, axis2=2)) * ctx.form_l
    return float(np.sum(ctx.mesh.w_loc * pw))


def check_vhs_stability_chain(v, tol=1e-12):
    """True if stable, False if a Phi-invariant tail has degree >= 0,
    None (indeterminate) outside the chain case."""
    if any(r != 1 for r in v.ranks):
        return None
    if any(np.abs(b).max() <= tol for b in v.phi_blocks):
        return None
    degs = v.degrees()
    for k in range(1, v.ell):
        if sum(degs[k:]) >= 0:
            return False
    return True
