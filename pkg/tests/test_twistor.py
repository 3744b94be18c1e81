import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hodgestrata import bundle as B
from hodgestrata import nahc as N
from hodgestrata import strata as S
from hodgestrata import twistor as T
from hodgestrata.surface import TwistedSection, canonical_holomorphic_basis


def unit_q(mesh, norm=0.1):
    q = canonical_holomorphic_basis(mesh, 2)[:, 0]
    return q * norm / TwistedSection(mesh, 2.0, q).norm()


def random_pair(v, rng):
    shape = (v.context.L, v.rank, v.rank)
    f = lambda: rng.normal(size=shape) + 1j * rng.normal(size=shape)
    return T.TangentPair(v, f(), f())


def close(a, b, tol=1e-12):
    scale = 1 + max(np.abs(a.beta).max(), np.abs(a.phi).max())
    return np.abs(a.beta - b.beta).max() < tol * scale and np.abs(a.phi - b.phi).max() < tol * scale


def neg(t):
    return T.TangentPair(t.base, -t.beta, -t.phi)


@pytest.fixture(scope="module")
def section(v2, bolza):
    return B.hitchin_section(v2, [unit_q(bolza)])


@pytest.fixture(scope="module")
def u_section(v2, section):
    return S.SliceVector(v2, section.beta, section.phi)


def zero_slice(v):
    z = np.zeros((v.context.L, v.rank, v.rank), complex)
    return S.SliceVector(v, z, z.copy())


# -- quaternion algebra -------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_quaternion_relations(v2, seed):
    t = random_pair(v2, np.random.default_rng(seed))
    I, J, K = T.I_of, T.J_of, T.K_of
    for op in (I, J, K):
        assert close(op(op(t)), neg(t))
    assert close(I(J(t)), K(t))
    assert close(I(J(K(t))), neg(t))


def test_K_of_pure_beta(v2, rng):
    t = random_pair(v2, rng)
    kt = T.K_of(T.TangentPair(v2, t.beta, np.zeros_like(t.phi)))
    assert not np.any(kt.beta)
    assert np.array_equal(kt.phi, v2.context.adj(t.beta))


def test_mu_roundtrip(v2, rng):
    t = random_pair(v2, rng)
    A, Bm = t.mu()
    assert close(T.TangentPair.from_mu(v2, A, Bm), t)


def test_star_bar_squares_to_minus_one(v2, rng):
    t = random_pair(v2, rng)
    A, Bm = t.mu()
    A2, B2 = T.star_bar(v2, *T.star_bar(v2, A, Bm))
    assert np.allclose(A2, -A, atol=1e-12) and np.allclose(B2, -Bm, atol=1e-12)


def test_symplectic_forms_antisymmetric(v2, rng):
    a, b = random_pair(v2, rng), random_pair(v2, rng)
    assert abs(T.omega_I(a, b) + T.omega_I(b, a)) < 1e-10 * abs(T.omega_I(a, b))
    assert abs(T.omega_J(a, b) + T.omega_J(b, a)) < 1e-10 * abs(T.omega_J(a, b))


def test_omega_J_against_norm(v2, u_section):
    # for beta = 0: mu = phi dz + phi* dz-bar and Tr(mu ^ (I mu)) = -2 i |phi|^2 dz ^ dz-bar
    t = T.TangentPair.from_slice(u_section)
    val = T.omega_J(t, T.I_of(t))
    assert abs(val + 2 * v2.context.norm1(t.pair) ** 2) < 1e-12
    assert abs(val.imag) < 1e-15


# -- lambda-connections --------------------------------------------------------------------

def test_p_lambda_zero(v2):
    c = T.p_lambda(v2, zero_slice(v2), 0.0)
    assert not np.any(c.dbar_op)
    assert np.array_equal(c.nabla_op, v2.context.Phi_l)
    assert c.to_higgs().phi.max() == 0


def test_p_lambda_zero_lambda_is_higgs(v2, section, u_section):
    c = T.p_lambda(v2, u_section, 0.0)
    h = c.to_higgs()
    assert np.array_equal(h.beta, section.beta) and np.allclose(h.phi, section.phi, atol=1e-15)
    with pytest.raises(B.ValidationError):
        T.p_lambda(v2, u_section, 1.0).to_higgs()


def test_p_lambda_one_is_oper(v2, bolza, u_section):
    op = B.oper_point(v2, [unit_q(bolza)])
    c = T.p_lambda(v2, u_section, 1.0)
    assert c.distance(op) == 0 and op.lam == 1.0
    assert c.compatibility_residual() < c.compatibility_tolerance()


def test_p_lambda_needs_harmonic_base(bolza, u_section):
    v = B.make_fuchsian(bolza, 2, harmonic=False)
    with pytest.raises(B.ValidationError):
        T.p_lambda(v, zero_slice(v), 1.0)


def test_hod_cstar(v2, u_section):
    c = T.p_lambda(v2, u_section, 0.7)
    one = T.hod_cstar(c, 1.0)
    assert one.distance(c) == 0 and one.lam == c.lam
    a, b = 0.4 - 0.2j, 1.5j
    assert T.hod_cstar(T.hod_cstar(c, a), b).distance(T.hod_cstar(c, a * b)) < 1e-14
    with pytest.raises(B.DomainError):
        T.hod_cstar(c, 0)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_p_lambda_intertwines(v2, u_section, lam):
    # xi . p_lambda(u) = g_xi . p_{xi lambda}(xi . u)
    xi = 0.3 + 0.2j
    a = T.hod_cstar(T.p_lambda(v2, u_section, lam), xi).gauge_constant(T.vhs_twistor_gauge(v2, xi))
    b = T.p_lambda(v2, S.cstar_on_slice(u_section, xi), xi * lam)
    assert a.distance(b) < 1e-13


# -- twistor lines ----------------------------------------------------------------------------

def test_twistor_line_at_vhs(v2):
    p = B.HiggsPoint(v2, zero_slice(v2).beta, zero_slice(v2).phi)
    m = N.zero_scale(v2)
    assert T.twistor_line(p, m, 0.0).distance(T.from_higgs(p)) < 1e-12
    xi = 0.6 * np.exp(1.1j)
    a = T.hod_cstar(T.p_lambda(v2, zero_slice(v2), 1.0), xi).gauge_constant(T.vhs_twistor_gauge(v2, xi))
    assert a.distance(T.twistor_line(p, m, xi)) < 1e-12


def test_twistor_line_at_one_is_nhc(section):
    m = N.solve_harmonic_metric(section)
    D = N.nhc_map(section, m)
    line = T.twistor_line(section, m, 1.0)
    assert line.distance(T.from_flat(D)) < 1e-14
    assert line.compatibility_residual() < N.flatness_tolerance(section, m)


# -- transversality ---------------------------------------------------------------------------

def test_transversality_rank(v2):
    rep = T.transversality_check(v2, finite_differences=False)
    assert rep["rank"] == rep["expected_rank"] == 6
    assert np.isfinite(rep["condition_number"])
    assert rep["directions"] == []
