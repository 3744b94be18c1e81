from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hodgestrata import bundle as B
from hodgestrata.surface import TwistedSection, canonical_holomorphic_basis, smooth_section


def unit_q(mesh, w=2, k=0, norm=0.1):
    q = canonical_holomorphic_basis(mesh, w)[:, k]
    return q * norm / TwistedSection(mesh, float(w), q).norm()


def test_fuchsian_summands(v2, v3):
    assert v2.exponents == (Fraction(1, 2), Fraction(-1, 2))
    assert all(np.all(b == 1) for b in v2.phi_blocks)
    assert v3.exponents == (Fraction(1), Fraction(0), Fraction(-1))
    assert len(v3.phi_blocks) == 2
    assert sum(v3.degrees()) == 0


@pytest.mark.parametrize("n", [2, 3])
def test_twist_count(n):
    assert len(B.enumerate_twists(n, 2)) == n ** 4


def test_fuchsian_needs_genus_two(torus):
    with pytest.raises(B.UnsupportedError):
        B.make_fuchsian(torus, 2)


def test_make_chain_determinant_constraint(torus):
    with pytest.raises(B.ValidationError):
        B.make_chain(torus, [1, 0], [1.0])


# -- grading --------------------------------------------------------------------

def test_end_grading_identity_and_higgs(v3):
    ctx = v3.context
    eye = np.broadcast_to(np.eye(3, dtype=complex), (5, 3, 3))
    g = B.end_grading(eye, v3)
    assert set(j for j, p in g.parts.items() if np.any(p)) == {0}
    gp = B.end_grading(v3.phi_matrix(), v3)
    assert set(j for j, p in gp.parts.items() if np.any(p)) == {-1}
    assert np.array_equal(gp.total(), v3.phi_matrix())
    assert ctx.n == 3


def test_end_grading_shape_mismatch(v2):
    with pytest.raises(TypeError):
        B.end_grading(np.zeros((4, 3, 3)), v2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_end_grading_partition_exact(v3, seed):
    r = np.random.default_rng(seed)
    s = r.normal(size=(6, 3, 3)) + 1j * r.normal(size=(6, 3, 3))
    g = B.end_grading(s, v3)
    assert np.array_equal(g.total(), s)
    assert np.array_equal(g.n_plus() + g.n_minus() + g.parts[0], s)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), j=st.integers(-2, 2), k=st.integers(-2, 2))
def test_grading_orthogonality(v3, seed, j, k):
    if j + k == 0:
        return
    r = np.random.default_rng(seed)
    A = B.grade_part(r.normal(size=(4, 3, 3)) + 1j * r.normal(size=(4, 3, 3)), j)
    Bm = B.grade_part(r.normal(size=(4, 3, 3)) + 1j * r.normal(size=(4, 3, 3)), k)
    assert np.abs(np.trace(A @ Bm, axis1=1, axis2=2)).max() == 0


# -- invariants, sections, opers --------------------------------------------------

def test_invariants_of_vhs_vanish(v3):
    z = np.zeros((v3.context.L, 3, 3), complex)
    for q in B.hitchin_invariants(B.HiggsPoint(v3, z, z.copy())):
        assert np.abs(q.values).max() < 1e-12


def test_invariants_recover_q2(v2, bolza):
    q = unit_q(bolza)
    p = B.hitchin_section(v2, [q])
    (q2,) = B.hitchin_invariants(p)
    # 2 x 2 oracle: q_2 = -det(Phi) for [[0, a q], [1, 0]] with the insertion scaled to a = 1
    ctx = v2.context
    Phi = ctx.gather(p.higgs_local, "10")
    det = Phi[:, 0, 0] * Phi[:, 1, 1] - Phi[:, 0, 1] * Phi[:, 1, 0]
    assert np.abs(q2.values + det).max() < 1e-12
    assert np.abs(q2.values - q).max() < 1e-10 * np.abs(q).max()
    assert q2.weight == 2


def test_invariants_recover_q3(v3, bolza):
    q2, q3 = unit_q(bolza, 2, 1), unit_q(bolza, 3, 0)
    inv = B.hitchin_invariants(B.hitchin_section(v3, [q2, q3]))
    assert np.abs(inv[0].values - q2).max() < 1e-10 * np.abs(q2).max()
    assert np.abs(inv[1].values - q3).max() < 1e-10 * np.abs(q3).max()


@settings(max_examples=10, deadline=None)
@given(r=st.floats(0.2, 3.0), t=st.floats(0, 2 * np.pi))
def test_invariants_equivariant(v3, bolza, r, t):
    xi = r * np.exp(1j * t)
    p = B.hitchin_section(v3, [unit_q(bolza, 2, 0), unit_q(bolza, 3, 1)])
    a = B.hitchin_invariants(p)
    b = B.hitchin_invariants(B.cstar_scale(p, xi))
    for j, (qa, qb) in enumerate(zip(a, b), start=2):
        assert np.abs(qb.values - xi ** j * qa.values).max() < 1e-12 * (1 + np.abs(qa.values).max())


def test_hitchin_section_zero_is_vhs(v2):
    ctx = v2.context
    p = B.hitchin_section(v2, [np.zeros(ctx.Nm)])
    assert not np.any(p.beta) and not np.any(p.phi)


def test_hitchin_section_rejects_nonholomorphic(v2, bolza):
    bad = smooth_section(bolza, 1, 1, 0) * bolza.rho
    with pytest.raises(B.ValidationError):
        B.hitchin_section(v2, [bad])


def test_hitchin_section_wrong_count(v3, bolza):
    with pytest.raises(B.ValidationError):
        B.hitchin_section(v3, [unit_q(bolza)])


def test_hitchin_section_in_slice(v2, bolza):
    from hodgestrata.strata import SliceVector, slice_residual, slice_tolerance
    p = B.hitchin_section(v2, [unit_q(bolza)])
    u = SliceVector(v2, p.beta, p.phi)
    r1, r2 = slice_residual(v2, u)
    tol = slice_tolerance(v2, u)
    assert v2.context.norm0(r1) < tol and v2.context.norm0(r2) < tol
    assert B.check_integrable(p)[0]


def test_oper_point_zero(v2):
    ctx = v2.context
    op = B.oper_point(v2, [np.zeros(ctx.Nm)])
    assert op.lam == 1.0
    assert np.array_equal(op.dbar_op, ctx.PhiS_l)
    assert np.array_equal(op.nabla_op, ctx.Phi_l)


def test_check_integrable_rejects(v2):
    ctx = v2.context
    beta = np.zeros((ctx.L, 2, 2), complex)
    beta[:, 0, 1] = ctx.scatter(np.tile(smooth_section(v2.mesh, 1, 1, 0)[:, None, None], (1, 2, 2)),
                                "01")[:, 0, 1]
    ok, val = B.check_integrable(B.HiggsPoint(v2, beta, np.zeros_like(beta)))
    assert not ok and val > 0


# -- C* action --------------------------------------------------------------------

def test_g_xi_gauge(v2, v3):
    xi = 0.3 + 0.4j
    g = B.g_xi_gauge(v2, xi)
    assert np.allclose(g, [xi ** 0.5, xi ** -0.5], rtol=1e-14)
    assert np.allclose(B.g_xi_gauge(v3, 2.0), [2.0, 1.0, 0.5])
    assert np.allclose(B.g_xi_gauge(v2, 1.0), 1.0)
    with pytest.raises(B.DomainError):
        B.g_xi_gauge(v2, 0)
    with pytest.raises(B.DomainError):
        B.cstar_scale(B.HiggsPoint(v2, np.zeros((1, 2, 2)), np.zeros((1, 2, 2))), 0)


def test_cstar_identity(v2, bolza):
    p = B.hitchin_section(v2, [unit_q(bolza)])
    q = B.cstar_scale(p, 1.0)
    assert np.array_equal(q.phi, p.phi) and np.array_equal(q.beta, p.beta)


def test_normalized_scaling_is_graded(v3, bolza, rng):
    ctx = v3.context
    g = B.grade_matrix(3)
    beta = np.where(g >= 1, rng.normal(size=(ctx.L, 3, 3)) + 1j * rng.normal(size=(ctx.L, 3, 3)), 0)
    phi = np.where(g >= 0, rng.normal(size=(ctx.L, 3, 3)) + 1j * rng.normal(size=(ctx.L, 3, 3)), 0)
    phi = phi - np.trace(phi, axis1=1, axis2=2)[:, None, None] * np.eye(3) / 3
    p = B.HiggsPoint(v3, beta, phi, integrable=False)
    xi = 0.1 * np.exp(0.7j)
    q = B.normalize_scaled(p, xi)
    assert np.allclose(q.beta, beta * xi ** np.maximum(g, 0), atol=1e-14)
    assert np.allclose(q.phi, phi * xi ** (g + 1), atol=1e-14)
    assert B.in_normal_form(q, 1e-12)


# -- BB limits ----------------------------------------------------------------------

def test_bb_limit_of_vhs_and_section(v2, bolza):
    z = np.zeros((v2.context.L, 2, 2), complex)
    assert B.bb_limit(B.HiggsPoint(v2, z, z.copy())) is v2
    assert B.bb_limit(B.hitchin_section(v2, [unit_q(bolza)])) is v2


def test_bb_limit_of_oper(v2, bolza):
    w = B.bb_limit(B.oper_point(v2, [unit_q(bolza)]), "tautological")
    assert B.same_vhs(w, v2)
    assert w.kind == "fuchsian"


def test_bb_limit_rejects_nontransverse(v3):
    from hodgestrata.twistor import LambdaConnection
    ctx = v3.context
    nab = ctx.Phi_l.copy()
    nab[:, 2, 0] = 1.0
    with pytest.raises(B.ValidationError):
        B.bb_limit(LambdaConnection(v3, 1.0, ctx.PhiS_l.copy(), nab), "tautological")


# -- energy and stability ---------------------------------------------------------------

def test_energy_zero_higgs(v2):
    ctx = v2.context
    p = B.HiggsPoint(v2, np.zeros_like(ctx.Phi_l), -ctx.Phi_l)
    assert B.higgs_energy(p) == 0


def test_energy_fuchsian_pointwise(bolza):
    # |Phi_1|^2 = (c_2 / c_1) (2 / rho)^{-1} |dz|^2 = c_2 / c_1 = 1 / 2 for the hyperbolic metric
    v = B.make_fuchsian(bolza, 2, harmonic=False)
    z = np.zeros((v.context.L, 2, 2), complex)
    e = B.higgs_energy(B.HiggsPoint(v, z, z.copy()))
    assert e == pytest.approx(0.5 * bolza.area, rel=1e-12)


@settings(max_examples=8, deadline=None)
@given(r=st.floats(0.1, 5.0), t=st.floats(0, 2 * np.pi))
def test_energy_quadratic(v2, bolza, r, t):
    xi = r * np.exp(1j * t)
    p = B.hitchin_section(v2, [unit_q(bolza)])
    assert B.higgs_energy(B.cstar_scale(p, xi)) == pytest.approx(r * r * B.higgs_energy(p), rel=1e-10)


def test_stability_chain(v2, v3, bolza):
    assert B.check_vhs_stability_chain(v2) is True
    assert B.check_vhs_stability_chain(v3) is True
    assert B.check_vhs_stability_chain(B.make_chain(bolza, [0, 0], [0.0])) is None
    assert B.check_vhs_stability_chain(B.make_chain(bolza, [0, 0], [1.0])) is False


def test_harmonic_scale_is_diagonal(v2):
    f = v2.harmonic_scale.f
    assert np.abs(f * (1 - np.eye(2))).max() == 0
