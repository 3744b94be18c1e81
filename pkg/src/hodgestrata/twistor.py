"""lambda-connections, twistor lines and the hyperkahler tangent algebra.

A lambda-connection (lambda, dbar_E, nabla) is stored relative to the
reference operators of the base VHS: dbar_E = dbar_0 + B dz-bar and
nabla = lambda del_0 + A dz, with B (``dbar_op``) and A (``nabla_op``)
endomorphism coefficients at local nodes.

Tangent vectors are Higgs-type pairs (beta, phi).  The de Rham form of the
same vector is mu = A dz + B dz-bar with A = phi - beta*, B = beta + phi*.
Adjoints always use the metric of the base VHS.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import DomainError, HiggsPoint, ValidationError, g_xi_gauge


@dataclass
class LambdaConnection:
    base: object
    lam: complex
    dbar_op: np.ndarray
    nabla_op: np.ndarray
    integrable: bool = True

    def compatibility_field(self):
        """Weak i Lambda of [dbar_E, nabla]: lambda F_0 + dbar_0 A - lambda del_0 B + [A, B]."""
        from .nahc import reference_curvature
        ctx = self.base.context
        lam = complex(self.lam)
        f1 = ctx.form_l[:, None, None]
        A, B = self.nabla_op, self.dbar_op
        Y = f1 * (A @ B - B @ A)
        dz, dzb = A, None
        if lam != 0:
            T, Cb, Cp = reference_curvature(ctx)
            Y = Y + lam * T
            dz = A + lam * Cp
            dzb = lam * (Cb - B)
        return ctx.weak(Y=Y, dz=dz, dzb=dzb)

    def compatibility_residual(self):
        return self.base.context.norm0(self.compatibility_field())

    def compatibility_tolerance(self):
        ctx = self.base.context
        data = 1.0 + ctx.norm1((self.dbar_op, self.nabla_op))
        return 10 * self.base.mesh.h ** 2 * data

    def gauge_constant(self, g):
        """Conjugate by a constant diagonal gauge g (vector of n entries)."""
        G = np.asarray(g)[:, None] / np.asarray(g)[None, :]
        return LambdaConnection(self.base, self.lam, self.dbar_op * G, self.nabla_op * G,
                                self.integrable)

    def to_higgs(self):
        if self.lam != 0:
            raise ValidationError("only a lambda = 0 connection is a Higgs pair")
        ctx = self.base.context
        return HiggsPoint(self.base, self.dbar_op.copy(), self.nabla_op - ctx.Phi_l)

    def distance(self, other):
        """L^2 distance of the operator data (same base and lambda assumed)."""
        ctx = self.base.context
        return ctx.norm1((self.dbar_op - other.dbar_op, self.nabla_op - other.nabla_op))

    def norm(self):
        return self.base.context.norm1((self.dbar_op, self.nabla_op))


def from_higgs(p):
    return LambdaConnection(p.base, 0.0, p.beta.copy(), p.higgs_local.copy())


def from_flat(D):
    """lambda = 1 connection of a FlatConnectionRep."""
    return LambdaConnection(D.vhs, 1.0, D.a_zb.copy(), D.a_z.copy())


def p_lambda(v, u, lam):
    """(lambda, dbar_0 + lambda Phi* + beta, lambda del_0 + Phi + phi)."""
    if v.kind == "fuchsian" and v.metric_correction is None:
        raise ValidationError("the base metric is not harmonic (use make_fuchsian(harmonic=True))")
    ctx = v.context
    lam = complex(lam)
    return LambdaConnection(v, lam, lam * ctx.PhiS_l + u.beta, ctx.Phi_l + u.phi)


def hod_cstar(c, xi):
    """xi . (lambda, dbar_E, nabla) = (xi lambda, dbar_E, xi nabla)."""
    if xi == 0:
        raise DomainError("xi must be nonzero")
    xi = complex(xi)
    return LambdaConnection(c.base, xi * c.lam, c.dbar_op.copy(), xi * c.nabla_op, c.integrable)


def twistor_line(p, m, xi):
    """(xi, dbar_E + xi Phi^*h, xi del_E^h + Phi) in the unitary gauge of m.

    At xi = 0 this is the Higgs pair in that gauge (the pair itself when
    the metric scale vanishes).
    """
    from .nahc import connection_from_metric
    ctx = p.base.context
    xi = complex(xi)
    alpha, Phi = connection_from_metric(p, m.f)
    return LambdaConnection(p.base, xi, alpha + xi * ctx.adj(Phi), Phi - xi * ctx.adj(alpha))


def vhs_twistor_gauge(v, xi):
    """Constant gauge taking hod_cstar(nhc(v), xi) to twistor_line(v, xi)."""
    return g_xi_gauge(v, xi)


# ---------------------------------------------------------------------------
# Tangent algebra
# ---------------------------------------------------------------------------

@dataclass
class TangentPair:
    base: object
    beta: np.ndarray
    phi: np.ndarray

    @classmethod
    def from_slice(cls, u):
        return cls(u.base, u.beta, u.phi)

    @classmethod
    def from_mu(cls, base, A, B):
        """beta = (mu - mu*)^{0,1} / 2, phi = (mu + mu*)^{1,0} / 2 for mu = A dz + B dz-bar."""
        adj = base.context.adj
        return cls(base, (B - adj(A)) / 2, (A + adj(B)) / 2)

    def mu(self):
        adj = self.base.context.adj
        return self.phi - adj(self.beta), self.beta + adj(self.phi)

    @property
    def pair(self):
        return self.beta, self.phi

    def __sub__(self, o):
        return TangentPair(self.base, self.beta - o.beta, self.phi - o.phi)

    def __add__(self, o):
        return TangentPair(self.base, self.beta + o.beta, self.phi + o.phi)


def star_bar(base, A, B):
    """star-bar(A dz + B dz-bar) = -i A* dz-bar + i B* dz, returned as (A', B')."""
    adj = base.context.adj
    return 1j * adj(B), -1j * adj(A)


def I_of(t):
    return TangentPair(t.base, 1j * t.beta, 1j * t.phi)


def J_of(t):
    adj = t.base.context.adj
    return TangentPair(t.base, 1j * adj(t.phi), -1j * adj(t.beta))


def K_of(t):
    adj = t.base.context.adj
    return TangentPair(t.base, -adj(t.phi), adj(t.beta))


def _integral_dzdzb(ctx, c):
    """int c dz ^ dz-bar for a scalar density c at local nodes."""
    return complex(-1j * np.sum(ctx.mesh.w_loc * ctx.form_l * c))


def omega_I(u1, u2):
    """i int Tr(phi_2 ^ beta_1 - phi_1 ^ beta_2)."""
    ctx = u1.base.context
    tr = (np.einsum("lki,lik->l", u2.phi, u1.beta) - np.einsum("lki,lik->l", u1.phi, u2.beta))
    return 1j * _integral_dzdzb(ctx, tr)


def omega_J(t1, t2):
    """int Tr(mu ^ nu) with mu, nu the de Rham forms of the tangent pairs."""
    ctx = t1.base.context
    A1, B1 = t1.mu()
    A2, B2 = t2.mu()
    tr = np.einsum("lki,lik->l", A1, B2) - np.einsum("lki,lik->l", B1, A2)
    return _integral_dzdzb(ctx, tr)


# ---------------------------------------------------------------------------
# Transversality
# ---------------------------------------------------------------------------

def transversality_check(v, basis=None, t_list=(0.05, 0.1), finite_differences=True,
                         rank_tol=1e-8):
    """Rank and conditioning of {mu_i} + {mu_i - K(mu_i)} over the harmonic basis.

    With ``finite_differences`` the derivative of the flat connection along
    each slice direction is estimated from harmonic-metric solves at the
    given t and compared with mu_i - K(mu_i).
    """
    from .nahc import nhc_map, solve_harmonic_metric, zero_scale
    from .strata import harmonic_basis, kuranishi_inverse
    ctx = v.context
    basis = harmonic_basis(v) if basis is None else basis
    vecs = [TangentPair.from_slice(u) for u in basis.flat()]
    fam = vecs + [t - K_of(t) for t in vecs]
    G = np.array([[ctx.ip1(a.pair, b.pair) for b in fam] for a in fam])
    ev = np.linalg.eigvalsh((G + G.conj().T) / 2)
    rank = int(np.sum(ev > rank_tol * ev.max()))
    cond = float(np.sqrt(ev.max() / ev.min())) if ev.min() > 0 else np.inf
    report = {"dim_H1_plus": basis.dimension, "family_size": len(fam), "rank": rank,
              "expected_rank": 2 * basis.dimension, "condition_number": cond,
              "gram_eigenvalues": ev.tolist(), "directions": []}
    if not finite_differences:
        return report
    D0 = nhc_map(HiggsPoint(v, np.zeros_like(ctx.Phi_l), np.zeros_like(ctx.Phi_l)), zero_scale(v))
    for i, t0 in enumerate(vecs):
        # d T(beta, phi) = (beta + phi*) dz-bar + (phi - beta*) dz, i.e. mu - K(mu)
        target = t0 - K_of(t0)
        errs = []
        c = np.zeros(basis.dimension, complex)
        c[i] = 1.0
        for t in t_list:
            u = kuranishi_inverse(v, t * c, basis)
            p = HiggsPoint(v, u.beta, u.phi)
            m = solve_harmonic_metric(p)
            D = nhc_map(p, m)
            db = (D.a_zb - D0.a_zb) / t
            dp = (D.a_z - D0.a_z) / t
            err = ctx.norm1((db - target.beta, dp - target.phi)) / ctx.norm1(target.pair)
            errs.append(float(err))
        slope = float(np.polyfit(np.log(t_list), np.log(errs), 1)[0]) if len(t_list) > 1 else None
        report["directions"].append({"index": i, "grade": int(basis.grades[i]),
                                     "relative_errors": errs, "slope": slope})
    return report
