"""Acceptance suite: one test per criterion, each logging a pass/fail line."""
import numpy as np
import pytest

from hodgestrata import bundle as B
from hodgestrata import conformal as C
from hodgestrata import nahc as N
from hodgestrata import strata as S
from hodgestrata import twistor as T
from hodgestrata.surface import TwistedSection, canonical_holomorphic_basis, smooth_section


def report(log, k, ok, detail):
    log.append(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def unit_q(mesh, norm=0.1):
    q = canonical_holomorphic_basis(mesh, 2)[:, 0]
    return q * norm / TwistedSection(mesh, 2.0, q).norm()


def smooth_fields(ctx, rng):
    """Smooth master fields (dz-bar and dz coefficients) of the right weights."""
    n, mesh = ctx.n, ctx.mesh
    mb = np.zeros((mesh.n_nodes, n, n), complex)
    mp = np.zeros_like(mb)
    for k in range(n):
        for i in range(n):
            w = int(ctx.wts[k, i])
            cb, cp = rng.normal(size=2) + 1j * rng.normal(size=2)
            mb[:, k, i] = cb * smooth_section(mesh, w, 1, k + i)
            mp[:, k, i] = cp * smooth_section(mesh, w + 1, 0, k + 2 * i)
    return mb, mp


def random_normal_form(v, rng, norm):
    """Smooth pair with beta in N+ and traceless phi in L + N+, of the given L^2 norm."""
    ctx = v.context
    g = B.grade_matrix(v.rank)
    mb, mp = smooth_fields(ctx, rng)
    mb = np.where(g >= 1, mb, 0)
    mp = np.where(g >= 0, mp, 0)
    mp = mp - np.trace(mp, axis1=1, axis2=2)[:, None, None] * np.eye(v.rank) / v.rank
    u = S.SliceVector(v, ctx.scatter(mb, "01"), ctx.scatter(mp, "10"))
    return u.scaled(norm / u.norm())


# -- 1 -------------------------------------------------------------------------------------

def test_criterion_1_hyperkahler_algebra(v2, acceptance_log):
    rng = np.random.default_rng(1)
    shape = (v2.context.L, 2, 2)
    worst = 0.0
    for _ in range(1000):
        f = lambda: rng.normal(size=shape) + 1j * rng.normal(size=shape)
        t = T.TangentPair(v2, f(), f())
        I, J, K = T.I_of, T.J_of, T.K_of
        cands = [(I(I(t)), -1), (J(J(t)), -1), (K(K(t)), -1), (I(J(K(t))), -1)]
        for s, sign in cands:
            worst = max(worst, np.abs(s.beta - sign * t.beta).max(), np.abs(s.phi - sign * t.phi).max())
        ij, k = I(J(t)), K(t)
        worst = max(worst, np.abs(ij.beta - k.beta).max(), np.abs(ij.phi - k.phi).max())
    report(acceptance_log, 1, worst < 1e-12, f"max error {worst:.2e} over 1000 pairs (tol 1e-12)")


# -- 2 -------------------------------------------------------------------------------------

def test_criterion_2_kahler_identity(torus_vhs, bolza, bolza_coarse, acceptance_log):
    rng = np.random.default_rng(2)
    ctx = torus_vhs.context
    L = ctx.mesh.n_nodes
    torus_worst = 0.0
    for _ in range(5):
        mb = rng.normal(size=(L, 2, 2)) + 1j * rng.normal(size=(L, 2, 2))
        mp = rng.normal(size=(L, 2, 2)) + 1j * rng.normal(size=(L, 2, 2))
        d, r = ctx.kahler_discrepancy(mb, mp)
        torus_worst = max(torus_worst, d / r)
    rel = []
    for mesh in (bolza_coarse, bolza):
        c = B.make_fuchsian(mesh, 2).context
        d, r = c.kahler_discrepancy(*smooth_fields(c, np.random.default_rng(20)))
        rel.append(d / r)
    order = np.log(rel[0] / rel[1]) / np.log(bolza_coarse.h / bolza.h)
    ok = torus_worst < 1e-10 and order >= 1.8
    report(acceptance_log, 2, ok,
           f"torus {torus_worst:.2e} (tol 1e-10); Bolza {rel[0]:.2e} -> {rel[1]:.2e}, order {order:.2f} (min 1.8)")


# -- 3 -------------------------------------------------------------------------------------

def test_criterion_3_dimension_count(v2, v3, acceptance_log):
    parts, ok = [], True
    for v, expect in ((v2, 3), (v3, 8)):
        hb = S.harmonic_basis(v)
        gaps = [r.gap for j, r in hb.reports.items() if hb.dims[j] > 0]
        ok &= hb.dimension == expect == S.expected_dimension(v) and min(gaps) >= 10
        parts.append(f"n={v.rank}: dim {hb.dimension} (expect {expect}), min gap {min(gaps):.1f}")
    report(acceptance_log, 3, ok, "; ".join(parts) + " (gap min 10)")


# -- 4 -------------------------------------------------------------------------------------

def test_criterion_4_lagrangian(v2, v3, acceptance_log):
    wI = wJ = 0.0
    for v in (v2, v3):
        vecs = S.harmonic_basis(v).flat()
        tans = [T.TangentPair.from_slice(u) for u in vecs]
        lam1 = [t - T.K_of(t) for t in tans]
        for a in range(len(vecs)):
            for b in range(len(vecs)):
                wI = max(wI, abs(T.omega_I(vecs[a], vecs[b])))
                wJ = max(wJ, abs(T.omega_J(lam1[a], lam1[b])))
    ok = wI < 1e-12 and wJ < 1e-12
    report(acceptance_log, 4, ok, f"max |omega_I| {wI:.2e}, max |omega_J| {wJ:.2e} (tol 1e-12)")


# -- 5 -------------------------------------------------------------------------------------

def test_criterion_5_kuranishi(v3, acceptance_log):
    rng = np.random.default_rng(5)
    hb = S.harmonic_basis(v3)
    eq = 0.0
    for k in range(100):
        if k % 2:
            u = random_normal_form(v3, rng, rng.uniform(0.1, 1.0))
        else:
            c = rng.normal(size=8) + 1j * rng.normal(size=8)
            u = S.kuranishi_inverse(v3, c * rng.uniform(0.1, 1.0) / np.linalg.norm(c), hb)
        xi = np.exp(rng.uniform(-1.0, 0.5) + 1j * rng.uniform(0, 2 * np.pi))
        k0 = S.kuranishi(v3, u, hb, check=False)
        k1 = S.kuranishi(v3, S.cstar_on_slice(u, xi), hb, check=False)
        eq = max(eq, float(np.abs(k1 - xi ** hb.grades * k0).max()))
    rt = 0.0
    for _ in range(10):
        c = rng.normal(size=8) + 1j * rng.normal(size=8)
        c *= rng.uniform(0.1, 1.0) / np.linalg.norm(c)
        u = S.kuranishi_inverse(v3, c, hb)
        rt = max(rt, float(np.abs(S.kuranishi(v3, u, hb) - c).max()))
    ok = eq < 1e-10 and rt < 1e-6
    report(acceptance_log, 5, ok, f"equivariance {eq:.2e} (tol 1e-10, 100 pairs); round trip {rt:.2e} (tol 1e-6)")


# -- 6 -------------------------------------------------------------------------------------

def _upper_gauge(v, rng, scale):
    ctx = v.context
    f = np.zeros((ctx.Nm, v.rank, v.rank), complex)
    for k in range(v.rank):
        for i in range(k + 1, v.rank):
            f[:, k, i] = scale * (rng.normal() + 1j * rng.normal()) * \
                smooth_section(v.mesh, int(ctx.wts[k, i]), 0, k + i)
    return f


def test_criterion_6_gauge_fixing(v2, v3, acceptance_log):
    rng = np.random.default_rng(6)
    hb = S.harmonic_basis(v2)
    rt = idem = 0.0
    steps_ok = True
    for _ in range(5):
        c = rng.normal(size=3) + 1j * rng.normal(size=3)
        u = S.kuranishi_inverse(v2, c / np.linalg.norm(c), hb)
        u0, g0 = S.gauge_fix_to_slice(v2, u.beta, u.phi)
        idem = max(idem, float(np.abs(g0 - np.eye(2)).max()))
        b, p = S.gauge_action(v2, u0.beta, u0.phi, _upper_gauge(v2, rng, 0.3))
        rep = {}
        u1, _ = S.gauge_fix_to_slice(v2, b, p, report=rep)
        rt = max(rt, (u1 - u0).norm() / u0.norm())
        steps_ok &= len(rep["steps"]) == v2.ell - 1
    rep3 = {}
    u3 = S.kuranishi_inverse(v3, np.full(8, 0.3), S.harmonic_basis(v3))
    S.gauge_fix_to_slice(v3, u3.beta, u3.phi, report=rep3)
    steps_ok &= len(rep3["steps"]) == v3.ell - 1
    ok = rt < 1e-6 and idem < 1e-6 and steps_ok
    report(acceptance_log, 6, ok,
           f"n=2 round trip {rt:.2e}, idempotence {idem:.2e} (tol 1e-6); grade steps = l-1 for n=2,3: {steps_ok}")


# -- 7 -------------------------------------------------------------------------------------

def test_criterion_7_hyperbolic_metric(bolza, bolza_coarse, acceptance_log):
    res = []
    for mesh in (bolza_coarse, bolza):
        v = B.make_fuchsian(mesh, 2, harmonic=False)
        z = np.zeros((v.context.L, 2, 2), complex)
        res.append(N.residual_norm(B.HiggsPoint(v, z, z.copy()), N.zero_scale(v)))
    order = np.log(res[0] / res[1]) / np.log(bolza_coarse.h / bolza.h)
    ok = res[0] < 10 * bolza_coarse.h ** 2 and res[1] < 10 * bolza.h ** 2 and order >= 1.8
    report(acceptance_log, 7, ok,
           f"residual {res[0]:.2e} (h={bolza_coarse.h:.3f}), {res[1]:.2e} (h={bolza.h:.3f}) "
           f"below 10h^2; order {order:.2f} (min 1.8)")


# -- 8 -------------------------------------------------------------------------------------

def test_criterion_8_first_variation(v2, acceptance_log):
    expos = [N.first_variation_check(v2, u, (0.05, 0.1, 0.2)) for u in S.harmonic_basis(v2).flat()]
    ok = min(expos) >= 1.8
    report(acceptance_log, 8, ok, "exponents " + ", ".join(f"{e:.2f}" for e in expos) + " (min 1.8)")


# -- 9 -------------------------------------------------------------------------------------

def test_criterion_9_transversality(v2, acceptance_log):
    rep = T.transversality_check(v2, t_list=(0.05, 0.1))
    slopes = [d["slope"] for d in rep["directions"]]
    ok = rep["rank"] == rep["expected_rank"] == 6 and min(slopes) >= 0.8
    report(acceptance_log, 9, ok,
           f"rank {rep['rank']}/{rep['expected_rank']}, condition number {rep['condition_number']:.2f}; "
           f"FD error slopes " + ", ".join(f"{s:.3f}" for s in slopes) + " (min 0.8)")


# -- 10 ------------------------------------------------------------------------------------

def test_criterion_10_conformal_limit(v2, bolza, acceptance_log):
    p = B.hitchin_section(v2, [unit_q(bolza)])
    u = S.SliceVector(v2, p.beta, p.phi)
    hbar = 1.0
    traj = C.conformal_trajectory(v2, u, hbar, [1.0, 0.5, 0.25, 0.16, 0.08, 0.04, 0.02])
    assert traj.failure is None, traj.failure
    final = traj.samples[-1]
    slope = traj.distance_slope([0.02, 0.04, 0.08, 0.16])
    ph = T.hod_cstar(T.p_lambda(v2, u, hbar), 1 / hbar)
    lim = traj.limit
    blk = max(float(np.abs(lim.a_z - ph.nabla_op).max()), float(np.abs(lim.a_zb - ph.dbar_op).max()))
    ok = final.R == 0.02 and final.distance < 1e-4 and slope >= 1.8 and blk < 1e-4
    report(acceptance_log, 10, ok,
           f"distance {final.distance:.2e} at R={final.R} (tol 1e-4); order {slope:.2f} (min 1.8); "
           f"limit vs hbar^-1 . p_hbar(u) {blk:.2e} (tol 1e-4)")
