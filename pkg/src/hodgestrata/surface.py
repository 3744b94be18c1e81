"""Discrete compact Riemann surfaces.

Two substrates are provided.

* The flat unit torus, sampled on an N x N grid with Fourier differentiation.
* The Bolza surface (genus 2), given by the regular hyperbolic octagon in the
  Poincare disk.  The octagon is cut into eight kites (center, side midpoint,
  vertex, next side midpoint), every kite is split into p x p curvilinear
  quadrilaterals, and each quadrilateral carries a tensor Gauss-Lobatto-Legendre
  (GLL) grid of degree N.  Nodes on paired sides coincide under the side
  pairings, so sections are glued through exact automorphy factors.

Sections are stored by their coefficients in the holomorphic frame of the disk
coordinate z.  A section of bi-weight (p, q) is a coefficient s(z) of
dz^p dz^q-bar; it obeys s(g z) = s(z) (c z + d)^(2p) conj(c z + d)^(2q) for a
deck transformation g = [[a, b], [c, d]] in SU(1, 1).  Two-forms are stored as
coefficients of dz ^ dz-bar.

The background metric is rho |dz|^2 with rho = 4 / (1 - |z|^2)^2 (curvature -1)
on the Bolza surface and rho = 1 on the torus.  Pointwise norms use
|dz|^2 = 2 / rho, so |s dz^p dz-bar^q|^2 = |s|^2 (2 / rho)^(p + q) and the
contraction with the area form satisfies Lambda(rho dx ^ dy) = 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree


class ConfigurationError(ValueError):
    """Invalid construction parameters."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


FORM_TYPES = ("0", "01", "10", "11")
_FORM_BIDEGREE = {"0": (0, 0), "01": (0, 1), "10": (1, 0), "11": (1, 1)}


# ---------------------------------------------------------------------------
# Gauss-Lobatto-Legendre utilities
# ---------------------------------------------------------------------------

def gll(n):
    """GLL nodes, weights and differentiation matrix of polynomial degree n."""
    leg = np.polynomial.legendre.Legendre.basis(n)
    inner = np.sort(np.real(leg.deriv().roots())) if n > 1 else np.array([])
    x = np.concatenate([[-1.0], inner, [1.0]])
    pn = leg(x)
    w = 2.0 / (n * (n + 1) * pn ** 2)
    d = np.zeros((n + 1, n + 1))
    for i in range(n + 1):
        for j in range(n + 1):
            if i != j:
                d[i, j] = pn[i] / (pn[j] * (x[i] - x[j]))
    d[0, 0] = -n * (n + 1) / 4.0
    d[n, n] = n * (n + 1) / 4.0
    return x, w, d


# ---------------------------------------------------------------------------
# Bolza octagon geometry and its Fuchsian group
# ---------------------------------------------------------------------------

SQRT2 = np.sqrt(2.0)
_TA = 1.0 + SQRT2
_TB = np.sqrt(2.0 + 2.0 * SQRT2)
MIDPOINT_RADIUS = (_TA - 1.0) / _TB          # Euclidean distance center -> side midpoint
VERTEX_RADIUS = 2.0 ** -0.25                 # Euclidean distance center -> vertex
SIDE_CENTER = (1.0 + MIDPOINT_RADIUS ** 2) / (2.0 * MIDPOINT_RADIUS)
SIDE_RADIUS = SIDE_CENTER - MIDPOINT_RADIUS


def _rot(theta):
    return np.diag([np.exp(0.5j * theta), np.exp(-0.5j * theta)])


def bolza_generators():
    """Side pairings A_0..A_7 in SU(1,1); A_k maps side k+4 onto side k.

    A_{k+4} is the inverse of A_k.  The matrices themselves (not only their
    projective classes) fix the square root of K used for half-integer weights.
    """
    t = np.array([[_TA, _TB], [_TB, _TA]], dtype=complex)
    return [_rot(k * np.pi / 4) @ t @ _rot(-k * np.pi / 4) for k in range(8)]


def mobius(g, z):
    return (g[0, 0] * z + g[0, 1]) / (g[1, 0] * z + g[1, 1])


def relation_word():
    """The defining relation A0 A1^-1 A2 A3^-1 A0^-1 A1 A2^-1 A3 as a matrix."""
    a = bolza_generators()
    g = np.eye(2, dtype=complex)
    for k, sgn in [(0, 1), (1, -1), (2, 1), (3, -1), (0, -1), (1, 1), (2, -1), (3, 1)]:
        g = g @ (a[k] if sgn > 0 else a[k + 4])
    return g


def side_centers():
    return SIDE_CENTER * np.exp(1j * np.pi / 4 * np.arange(8))


def octagon_vertices():
    return VERTEX_RADIUS * np.exp(1j * (np.pi / 4 * np.arange(8) + np.pi / 8))


def in_octagon(z, tol=1e-12):
    z = np.asarray(z)
    out = np.ones(z.shape, dtype=bool)
    for c in side_centers():
        out &= np.abs(z - c) >= SIDE_RADIUS - tol
    return out & (np.abs(z) < 1)


def hyperbolic_rho(z):
    return 4.0 / (1.0 - np.abs(z) ** 2) ** 2


def hyperbolic_distance(z, w):
    num = 2 * np.abs(z - w) ** 2
    den = (1 - np.abs(z) ** 2) * (1 - np.abs(w) ** 2)
    return np.arccosh(1 + num / den)


def group_elements(max_len=4, radius=5.0):
    """Words in the side pairings up to length max_len with d(0, g 0) < radius.

    Returns (matrices, exponent vectors in Z^4 of the abelianization).
    """
    gens = bolza_generators()
    exps = [np.eye(4, dtype=int)[k % 4] * (1 if k < 4 else -1) for k in range(8)]
    mats = [np.eye(2, dtype=complex)]
    vecs = [np.zeros(4, dtype=int)]
    keys = {(0.0, 0.0)}
    frontier = [0]
    for _ in range(max_len):
        nxt = []
        for i in frontier:
            for k in range(8):
                g = mats[i] @ gens[k]
                w = mobius(g, 0.0)
                if hyperbolic_distance(0.0, w) > radius:
                    continue
                key = (round(w.real, 9), round(w.imag, 9))
                if key in keys:
                    continue
                keys.add(key)
                mats.append(g)
                vecs.append(vecs[i] + exps[k])
                nxt.append(len(mats) - 1)
        frontier = nxt
    return np.array(mats), np.array(vecs)


def _coons_kite(k, xi, eta):
    """Transfinite map of [0,1]^2 onto kite k (center, M_k, V_k, M_{k+1})."""
    mk = MIDPOINT_RADIUS * np.exp(1j * k * np.pi / 4)
    mk1 = MIDPOINT_RADIUS * np.exp(1j * (k + 1) * np.pi / 4)
    vk = VERTEX_RADIUS * np.exp(1j * (k * np.pi / 4 + np.pi / 8))
    ck = SIDE_CENTER * np.exp(1j * k * np.pi / 4)
    ck1 = SIDE_CENTER * np.exp(1j * (k + 1) * np.pi / 4)

    def arc(c, p0, p1, t):
        a0 = np.angle(p0 - c)
        a1 = a0 + np.angle((p1 - c) / (p0 - c))
        return c + SIDE_RADIUS * np.exp(1j * (a0 + (a1 - a0) * t))

    c0 = xi * mk
    c1 = arc(ck1, mk1, vk, xi)
    d0 = eta * mk1
    d1 = arc(ck, mk, vk, eta)
    bil = xi * (1 - eta) * mk + (1 - xi) * eta * mk1 + xi * eta * vk
    return (1 - eta) * c0 + eta * c1 + (1 - xi) * d0 + xi * d1 - bil


# ---------------------------------------------------------------------------
# Mesh container
# ---------------------------------------------------------------------------

@dataclass
class SurfaceMesh:
    """A discretized compact Riemann surface.

    Master nodes carry the unknowns.  Local nodes are element-wise copies
    (for the torus they coincide with the masters); each local node is the
    image g(z_master) of its master under a deck transformation g.
    """

    genus: int
    kind: str
    h: float
    z: np.ndarray                  # master node positions in the disk / square
    weights: np.ndarray            # area measure per master node
    rho: np.ndarray                # background conformal factor at masters
    loc2glob: np.ndarray
    loc_g: np.ndarray              # (L, 2, 2) deck transformations
    loc_exp: np.ndarray            # (L, 4) abelianized words
    z_loc: np.ndarray
    w_loc: np.ndarray              # area measure per local node
    rho_loc: np.ndarray
    dx_loc: sp.csr_matrix          # element-local d/dx (split form)
    dy_loc: sp.csr_matrix
    side_pairings: list = field(default_factory=list)
    boundary_pairs: list = field(default_factory=list)
    degree: int = 0
    subdivisions: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    # -- basic sizes -------------------------------------------------------
    @property
    def n_nodes(self):
        return self.z.size

    @property
    def n_local(self):
        return self.z_loc.size

    @property
    def area(self):
        return float(self.weights.sum())

    # -- automorphy ----------------------------------------------------------
    def factor(self, p, q=0.0, twist=None, n=1):
        """Local automorphy factor for bi-weight (p, q): local = factor * master."""
        key = ("factor", float(p), float(q), None if twist is None else tuple(twist), n)
        if key not in self._cache:
            zm = self.z[self.loc2glob]
            j = self.loc_g[:, 1, 0] * zm + self.loc_g[:, 1, 1]
            f = j ** int(round(2 * p)) * np.conj(j) ** int(round(2 * q))
            if twist is not None:
                f = f * np.exp(2j * np.pi * (self.loc_exp @ np.asarray(twist)) / n)
            self._cache[key] = f
        return self._cache[key]

    def scatter_matrix(self, p, q=0.0, twist=None, n=1):
        key = ("P", float(p), float(q), None if twist is None else tuple(twist), n)
        if key not in self._cache:
            f = self.factor(p, q, twist, n)
            self._cache[key] = sp.csr_matrix(
                (f, (np.arange(self.n_local), self.loc2glob)),
                shape=(self.n_local, self.n_nodes))
        return self._cache[key]

    def gather_matrix(self, p, q=0.0, twist=None, n=1):
        """Area-weighted average of local values pulled back to their masters."""
        key = ("G", float(p), float(q), None if twist is None else tuple(twist), n)
        if key not in self._cache:
            f = self.factor(p, q, twist, n)
            vals = self.w_loc / f / self.weights[self.loc2glob]
            self._cache[key] = sp.csr_matrix(
                (vals, (self.loc2glob, np.arange(self.n_local))),
                shape=(self.n_nodes, self.n_local))
        return self._cache[key]

    def scatter(self, values, p, q=0.0, twist=None, n=1):
        """Master values (node axis first) -> local values."""
        f = self.factor(p, q, twist, n)
        v = values[self.loc2glob]
        return v * f.reshape((-1,) + (1,) * (v.ndim - 1))

    def gather(self, local, p, q=0.0, twist=None, n=1):
        """Local values (node axis first) -> master values by weighted averaging."""
        g = self.gather_matrix(p, q, twist, n)
        flat = local.reshape(self.n_local, -1)
        return (g @ flat).reshape((self.n_nodes,) + local.shape[1:])

    def apply_local(self, op, local):
        """Apply a sparse local operator along the node axis."""
        flat = local.reshape(local.shape[0], -1)
        return (op @ flat).reshape((op.shape[0],) + local.shape[1:])

    # -- norms -------------------------------------------------------------
    def norm_factor(self, p, q, local=False):
        """Pointwise |dz^p dz-bar^q|^2 = (2 / rho)^(p + q)."""
        r = self.rho_loc if local else self.rho
        return (2.0 / r) ** (p + q)

    def integrate(self, f):
        return np.sum(self.weights * f, axis=-1)

    # -- derivative matrices -----------------------------------------------
    def d_local(self, which):
        """Element-local d/dz or d/dz-bar as a sparse matrix on local values."""
        key = ("D", which)
        if key not in self._cache:
            if which == "z":
                m = 0.5 * (self.dx_loc - 1j * self.dy_loc)
            elif which == "zb":
                m = 0.5 * (self.dx_loc + 1j * self.dy_loc)
            else:
                raise ValueError(which)
            self._cache[key] = sp.csr_matrix(m)
        return self._cache[key]

    def broken_derivative(self, which, p, q=0.0):
        """Sparse map master values -> element-wise derivative at local nodes."""
        key = ("B", which, float(p), float(q))
        if key not in self._cache:
            self._cache[key] = sp.csr_matrix(self.d_local(which) @ self.scatter_matrix(p, q))
        return self._cache[key]

    def derivative(self, which, p, q=0.0):
        """Strong derivative: element-wise derivative averaged back to masters.

        The output bi-weight is (p + 1, q) for d/dz and (p, q + 1) for d/dz-bar.
        """
        key = ("S", which, float(p), float(q))
        if key not in self._cache:
            po, qo = (p + 1, q) if which == "z" else (p, q + 1)
            self._cache[key] = sp.csr_matrix(
                self.gather_matrix(po, qo) @ self.broken_derivative(which, p, q))
        return self._cache[key]

    def chern_local(self, w):
        """Pointwise metric (2 / rho)^w of K^w at local nodes."""
        return (2.0 / self.rho_loc) ** w

    def del_local(self, local, w):
        """Chern (1,0) derivative of local values of a weight-w quantity.

        Computed as h^-1 d/dz (h s) with h = (2 / rho)^w, so that the adjoint
        relation with d/dz-bar holds exactly at the discrete level.
        """
        h = self.chern_local(w).reshape((-1,) + (1,) * (local.ndim - 1))
        return self.apply_local(self.d_local("z"), h * local) / h

    def dbar_local(self, local):
        return self.apply_local(self.d_local("zb"), local)

    # -- serialization -----------------------------------------------------
    def to_dict(self):
        def cpair(v):
            return [float(np.real(v)), float(np.imag(v))]
        return {
            "schema_version": 1,
            "kind": self.kind,
            "genus": int(self.genus),
            "h": float(self.h),
            "degree": int(self.degree),
            "subdivisions": int(self.subdivisions),
            "nodes": [cpair(v) for v in self.z],
            "weights": [float(v) for v in self.weights],
            "background_rho": [float(v) for v in self.rho],
            "side_pairings": [[cpair(x) for x in g.ravel()] for g in self.side_pairings],
            "local_to_master": [int(v) for v in self.loc2glob],
            "local_deck": [[cpair(x) for x in g.ravel()] for g in self.loc_g],
            "local_words": [[int(x) for x in e] for e in self.loc_exp],
            "boundary_pairs": [list(map(int, p)) for p in self.boundary_pairs],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def mesh_from_json(text):
    """Rebuild a mesh from its JSON description and check it matches."""
    doc = json.loads(text)
    if doc.get("schema_version") != 1:
        raise ConfigurationError("unsupported mesh schema version")
    if doc["kind"] == "torus":
        mesh = build_torus_spectral(int(doc["degree"]))
    elif doc["kind"] == "bolza":
        p, deg = int(doc["subdivisions"]), int(doc["degree"])
        mesh = build_bolza_octagon(VERTEX_RADIUS / (p * deg), degree=deg)
    else:
        raise ConfigurationError(f"unknown mesh kind {doc['kind']!r}")
    nodes = np.array([complex(*v) for v in doc["nodes"]])
    if nodes.shape != mesh.z.shape or np.abs(nodes - mesh.z).max() > 1e-12:
        raise ConfigurationError("serialized nodes do not match the rebuilt mesh")
    return mesh


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_torus_spectral(N):
    """Flat unit torus sampled on an N x N grid, Fourier differentiation."""
    if not isinstance(N, (int, np.integer)) or N < 4 or N % 2:
        raise ConfigurationError("torus grid size must be an even integer >= 4")
    x = np.arange(N) / N
    X, Y = np.meshgrid(x, x, indexing="xy")        # row index = y, column = x
    z = (X + 1j * Y).ravel()
    k = 2j * np.pi * np.fft.fftfreq(N, d=1.0 / N)
    eye = np.eye(N)
    d1 = np.fft.ifft(k[:, None] * np.fft.fft(eye, axis=0), axis=0)
    d1 = np.real_if_close(d1, tol=1e6)
    dx = sp.csr_matrix(np.kron(np.eye(N), d1))
    dy = sp.csr_matrix(np.kron(d1, np.eye(N)))
    nn = N * N
    w = np.full(nn, 1.0 / nn)
    ident = np.broadcast_to(np.eye(2, dtype=complex), (nn, 2, 2)).copy()
    return SurfaceMesh(
        genus=1, kind="torus", h=1.0 / N, z=z, weights=w, rho=np.ones(nn),
        loc2glob=np.arange(nn), loc_g=ident, loc_exp=np.zeros((nn, 4), int),
        z_loc=z.copy(), w_loc=w.copy(), rho_loc=np.ones(nn), dx_loc=dx, dy_loc=dy,
        degree=N, subdivisions=1)


def _split_form_ops(xe, ye, d):
    """Element d/dx, d/dy in split (skew-symmetric) form for one element."""
    m = d.shape[0]
    eye = np.eye(m)
    dr = np.kron(eye, d)     # derivative along the fast (xi) index
    ds = np.kron(d, eye)
    xr, xs = dr @ xe, ds @ xe
    yr, ys = dr @ ye, ds @ ye
    jac = xr * ys - xs * yr
    ij = 1.0 / jac
    dxn = ij[:, None] * (ys[:, None] * dr - yr[:, None] * ds)
    dyn = ij[:, None] * (-xs[:, None] * dr + xr[:, None] * ds)
    dxc = ij[:, None] * (dr * ys[None, :] - ds * yr[None, :])
    dyc = ij[:, None] * (-dr * xs[None, :] + ds * xr[None, :])
    return 0.5 * (dxn + dxc), 0.5 * (dyn + dyc), jac


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)
        self.g = np.broadcast_to(np.eye(2, dtype=complex), (n, 2, 2)).copy()
        self.e = np.zeros((n, 4), dtype=int)

    def find(self, i):
        """Root of i; afterwards z_i = g[i] z_root."""
        path = []
        while self.parent[i] != i:
            path.append(i)
            i = self.parent[i]
        root = i
        for j in reversed(path):
            p = self.parent[j]
            if p != root:
                self.g[j] = self.g[j] @ self.g[p]
                self.e[j] = self.e[j] + self.e[p]
                self.parent[j] = root
        return root

    def union(self, x, y, g_xy, e_xy):
        """Record z_y = g_xy z_x."""
        rx, ry = self.find(x), self.find(y)
        gx, ex = (self.g[x], self.e[x]) if x != rx else (np.eye(2), np.zeros(4, int))
        gy, ey = (self.g[y], self.e[y]) if y != ry else (np.eye(2), np.zeros(4, int))
        if rx == ry:
            mism = np.linalg.inv(gy) @ g_xy @ gx
            if np.abs(mism - np.eye(2)).max() > 1e-6 or np.any(ey - e_xy - ex != 0):
                raise ConfigurationError("inconsistent side identification")
            return
        # z_ry = gy^-1 g_xy gx z_rx
        self.parent[ry] = rx
        self.g[ry] = np.linalg.inv(gy) @ g_xy @ gx
        self.e[ry] = -ey + e_xy + ex


def build_bolza_octagon(h=0.035, degree=4, min_nodes=1000):
    """Spectral-element mesh of the Bolza surface.

    h is the nominal Euclidean node spacing along a center-to-vertex ray; the
    number of quadrilaterals per kite edge is p = ceil(VERTEX_RADIUS / (degree h)).
    """
    if h <= 0 or degree < 2:
        raise ConfigurationError("resolution must be positive and degree >= 2")
    p = int(np.ceil(VERTEX_RADIUS / (degree * h) - 1e-9))
    n_est = 8 * (p * degree) ** 2
    if n_est < min_nodes:
        raise ConfigurationError(
            f"resolution h={h} too coarse: about {n_est} nodes (< {min_nodes})")
    x, wq, d = gll(degree)
    m = degree + 1
    ref_r = np.tile(x, m)
    ref_s = np.repeat(x, m)
    ref_w = np.tile(wq, m) * np.repeat(wq, m)
    zs, ws, blocks_x, blocks_y = [], [], [], []
    for k in range(8):
        for i in range(p):
            for j in range(p):
                xi = (i + 0.5 * (ref_r + 1)) / p
                eta = (j + 0.5 * (ref_s + 1)) / p
                ze = _coons_kite(k, xi, eta)
                bx, by, jac = _split_form_ops(ze.real, ze.imag, d)
                if np.any(jac <= 0):
                    raise ConfigurationError("degenerate element map")
                zs.append(ze)
                ws.append(ref_w * jac)
                blocks_x.append(bx)
                blocks_y.append(by)
    z_loc = np.concatenate(zs)
    rho_loc = hyperbolic_rho(z_loc)
    w_loc = np.concatenate(ws) * rho_loc
    dx = sp.block_diag(blocks_x, format="csr")
    dy = sp.block_diag(blocks_y, format="csr")
    nl = z_loc.size

    uf = _UnionFind(nl)
    tree = cKDTree(np.c_[z_loc.real, z_loc.imag])
    tol = 1e-9
    for a, b in tree.query_pairs(tol):
        uf.union(a, b, np.eye(2, dtype=complex), np.zeros(4, int))
    # side identifications
    gens = bolza_generators()
    exps = [np.eye(4, dtype=int)[k % 4] * (1 if k < 4 else -1) for k in range(8)]
    centers = side_centers()
    on_side = [np.where(np.abs(np.abs(z_loc - c) - SIDE_RADIUS) < 1e-9)[0] for c in centers]
    boundary_pairs = []
    for k in range(8):
        # A_k maps side k+4 onto side k
        src = on_side[(k + 4) % 8]
        img = mobius(gens[k], z_loc[src])
        dist, idx = tree.query(np.c_[img.real, img.imag])
        if np.any(dist > 1e-8):
            raise ConfigurationError("side nodes do not match under the pairing")
        for s_, t_ in zip(src, idx):
            uf.union(s_, t_, gens[k], exps[k])
            boundary_pairs.append((k, int(s_), int(t_)))
    roots = np.array([uf.find(i) for i in range(nl)])
    masters, loc2glob = np.unique(roots, return_inverse=True)
    loc_g = uf.g.copy()
    loc_e = uf.e.copy()
    loc_g[masters] = np.eye(2)
    loc_e[masters] = 0
    z = z_loc[masters]
    weights = np.bincount(loc2glob, weights=w_loc, minlength=masters.size)
    # sanity: local positions reproduce g(z_master)
    chk = mobius(np.moveaxis(loc_g, 0, -1), z[loc2glob])
    if np.abs(chk - z_loc).max() > 1e-8:
        raise ConfigurationError("deck transformations inconsistent with node positions")
    return SurfaceMesh(
        genus=2, kind="bolza", h=VERTEX_RADIUS / (p * degree), z=z, weights=weights,
        rho=hyperbolic_rho(z), loc2glob=loc2glob, loc_g=loc_g, loc_exp=loc_e,
        z_loc=z_loc, w_loc=w_loc, rho_loc=rho_loc, dx_loc=dx, dy_loc=dy,
        side_pairings=gens, boundary_pairs=boundary_pairs, degree=degree, subdivisions=p)


# ---------------------------------------------------------------------------
# Scalar twisted sections and their operators
# ---------------------------------------------------------------------------

@dataclass
class TwistedSection:
    """Coefficients of a section of K^w (times a flat n-torsion line bundle).

    ``form_type`` is one of "0", "01", "10", "11"; the stored values are the
    coefficients of 1, dz-bar, dz and dz ^ dz-bar respectively, in the
    holomorphic frame dz^w, at the master nodes.
    """

    mesh: SurfaceMesh
    weight: float
    values: np.ndarray
    form_type: str = "0"
    twist: tuple | None = None
    order: int = 1

    def __post_init__(self):
        if self.form_type not in FORM_TYPES:
            raise TypeError(f"unknown form type {self.form_type!r}")
        if abs(2 * self.weight - round(2 * self.weight)) > 1e-12:
            raise ValueError("weight must be a half-integer")
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError("one value per master node expected")

    @property
    def biweight(self):
        p, q = _FORM_BIDEGREE[self.form_type]
        return self.weight + p, float(q)

    def like(self, values, form_type=None):
        return TwistedSection(self.mesh, self.weight, values,
                              self.form_type if form_type is None else form_type,
                              self.twist, self.order)

    def local(self):
        p, q = self.biweight
        return self.mesh.scatter(self.values, p, q, self.twist, self.order)

    def pointwise_norm2(self):
        p, q = self.biweight
        return np.abs(self.values) ** 2 * self.mesh.norm_factor(p, q)

    def norm(self):
        return float(np.sqrt(self.mesh.integrate(self.pointwise_norm2())))

    def boundary_mismatch(self):
        """Largest disagreement between local copies of the same master value.

        Local copies are produced by automorphy factors, so this checks the
        twisted-periodic identification of values on paired sides.
        """
        p, q = self.biweight
        loc = self.local()
        back = loc / self.mesh.factor(p, q, self.twist, self.order)
        return float(np.abs(back - self.values[self.mesh.loc2glob]).max())


def inner(s, t):
    """L^2 pairing <s, t>, linear in s."""
    if s.form_type != t.form_type or s.weight != t.weight:
        raise TypeError("sections of different types")
    p, q = s.biweight
    return complex(s.mesh.integrate(s.values * np.conj(t.values) * s.mesh.norm_factor(p, q)))


def _strong(mesh, local, p_out, q_out, twist, order):
    return mesh.gather(local, p_out, q_out, twist, order)


def dbar(s):
    """The d-bar operator: 0-forms -> (0,1)-forms, (1,0)-forms -> (1,1)-forms."""
    m = s.mesh
    if s.form_type == "0":
        out = m.dbar_local(s.local())
        return s.like(_strong(m, out, s.weight, 1, s.twist, s.order), "01")
    if s.form_type == "10":
        out = -m.dbar_local(s.local())          # d(a dz) = -(da/dz-bar) dz ^ dz-bar
        return s.like(_strong(m, out, s.weight + 1, 1, s.twist, s.order), "11")
    raise TypeError(f"d-bar is not defined on form type {s.form_type!r}")


def del_metric(s):
    """(1,0) part of the Chern connection of K^w with metric (2 / rho)^w."""
    m = s.mesh
    if s.form_type == "0":
        out = m.del_local(s.local(), s.weight)
        return s.like(_strong(m, out, s.weight + 1, 0, s.twist, s.order), "10")
    if s.form_type == "01":
        out = m.del_local(s.local(), s.weight)
        return s.like(_strong(m, out, s.weight + 1, 1, s.twist, s.order), "11")
    raise TypeError(f"del is not defined on form type {s.form_type!r}")


def _strong_matrix(mesh, form_type, w, which):
    """Sparse matrix of the strong d-bar or del on master values."""
    p, q = _FORM_BIDEGREE[form_type]
    key = ("strong", form_type, float(w), which)
    if key not in mesh._cache:
        P = mesh.scatter_matrix(w + p, q)
        if which == "dbar":
            sign = -1.0 if form_type == "10" else 1.0
            G = mesh.gather_matrix(w + p, q + 1)
            M = sign * (G @ mesh.d_local("zb") @ P)
        else:
            h = mesh.chern_local(w)
            G = mesh.gather_matrix(w + p + 1, q)
            M = G @ sp.diags(1.0 / h) @ mesh.d_local("z") @ sp.diags(h) @ P
        mesh._cache[key] = sp.csr_matrix(M)
    return mesh._cache[key]


def _mass(mesh, form_type, w):
    p, q = _FORM_BIDEGREE[form_type]
    return mesh.weights * mesh.norm_factor(w + p, q)


def dbar_adjoint(t):
    """Quadrature adjoint of :func:`dbar` (untwisted sections)."""
    src = {"01": "0", "11": "10"}.get(t.form_type)
    if src is None:
        raise TypeError("adjoint of d-bar acts on (0,1)- and (1,1)-forms")
    m = t.mesh
    A = _strong_matrix(m, src, t.weight, "dbar")
    vals = (A.conj().T @ (_mass(m, t.form_type, t.weight) * t.values)) / _mass(m, src, t.weight)
    return t.like(vals, src)


def del_adjoint(t):
    """Quadrature adjoint of :func:`del_metric` (untwisted sections)."""
    src = {"10": "0", "11": "01"}.get(t.form_type)
    if src is None:
        raise TypeError("adjoint of del acts on (1,0)- and (1,1)-forms")
    m = t.mesh
    A = _strong_matrix(m, src, t.weight, "del")
    vals = (A.conj().T @ (_mass(m, t.form_type, t.weight) * t.values)) / _mass(m, src, t.weight)
    return t.like(vals, src)


def lambda_contract(w):
    """Contraction with the Kahler form: Lambda(rho dx ^ dy) = 1.

    Since dz ^ dz-bar = -2i dx ^ dy, Lambda(c dz ^ dz-bar) = -2i c / rho.
    """
    if w.form_type != "11":
        raise TypeError("Lambda acts on (1,1)-forms")
    return w.like(-2j * w.values / w.mesh.rho, "0")


def lambda_inverse(s):
    if s.form_type != "0":
        raise TypeError("inverse of Lambda produces (1,1)-forms from 0-forms")
    return s.like(0.5j * s.values * s.mesh.rho, "11")


def area_form(mesh):
    """The area form rho dx ^ dy as a dz ^ dz-bar coefficient."""
    return TwistedSection(mesh, 0.0, 0.5j * mesh.rho, "11")


# ---------------------------------------------------------------------------
# Matrix-valued one-forms and the conjugate Hodge star
# ---------------------------------------------------------------------------

def metric_adjoint(A, H):
    """Adjoint of endomorphisms A (nodes, n, n) for hermitian metrics H."""
    return np.linalg.solve(H, np.conj(np.swapaxes(A, -1, -2)) @ H)


def _check_metric(H):
    herm = np.abs(H - np.conj(np.swapaxes(H, -1, -2))).max()
    if herm > 1e-10 * max(1.0, np.abs(H).max()):
        raise FloatingPointError("metric is not hermitian")
    if np.linalg.eigvalsh(H).min() <= 0:
        raise FloatingPointError("metric is not positive definite")


def hodge_star_bar(A, B, H):
    """Conjugate Hodge star of mu = A dz + B dz-bar.

    Returns the coefficients (A', B') of -i A* dz-bar + i B* dz, i.e.
    A' = i B* and B' = -i A*, adjoints taken with respect to H.
    """
    _check_metric(H)
    return 1j * metric_adjoint(B, H), -1j * metric_adjoint(A, H)


def one_form_norm2(mesh, A, B, H):
    """L^2 norm squared of A dz + B dz-bar with |dz|^2 = 2 / rho."""
    def tr(X):
        return np.real(np.einsum("nij,nji->n", X, metric_adjoint(X, H)))
    pw = (tr(A) + tr(B)) * (2.0 / mesh.rho)
    return float(mesh.integrate(pw))


# ---------------------------------------------------------------------------
# Laplacians, kernels and Green's operators for scalar sections
# ---------------------------------------------------------------------------

def broken_dbar_matrix(mesh, w):
    """Element-wise d-bar of weight-w 0-forms, evaluated at local nodes."""
    return mesh.broken_derivative("zb", w, 0.0)


def broken_del_matrix(mesh, w):
    key = ("bdel", float(w))
    if key not in mesh._cache:
        h = mesh.chern_local(w)
        mesh._cache[key] = sp.csr_matrix(
            sp.diags(1.0 / h) @ mesh.d_local("z") @ sp.diags(h) @ mesh.scatter_matrix(w, 0.0))
    return mesh._cache[key]


def galerkin_form(mesh, E, out_weight_norm):
    """E^H W E for a broken operator E with pointwise output norm factors."""
    W = sp.diags(mesh.w_loc * out_weight_norm)
    return sp.csc_matrix(E.conj().T @ W @ E)


def scalar_laplacian(mesh, w, which="dbar"):
    """Galerkin Laplacian dbar* dbar (or del* del) on weight-w 0-forms.

    Returns (stiffness, mass diagonal).
    """
    key = ("lap", which, float(w))
    if key not in mesh._cache:
        if which == "dbar":
            E = broken_dbar_matrix(mesh, w)
            nf = (2.0 / mesh.rho_loc) ** (w + 1)
        else:
            E = broken_del_matrix(mesh, w)
            nf = (2.0 / mesh.rho_loc) ** (w + 1)
        K = galerkin_form(mesh, E, nf)
        M = mesh.weights * mesh.norm_factor(w, 0)
        mesh._cache[key] = (K, M)
    return mesh._cache[key]


@dataclass
class KernelReport:
    dimension: int
    singular_values: np.ndarray      # normalized by the largest one
    threshold: float
    gap: float                       # first non-kernel / largest kernel value
    basis: np.ndarray | None = None


def detect_kernel(K, M, h, n_probe=12, want_basis=True, require_gap=10.0):
    """Numerical kernel of a hermitian positive semi-definite pencil (K, M).

    Singular values sqrt(eig) are normalized by the largest one; values below
    h^2 count as kernel.  A factor ``require_gap`` separation between the
    largest kernel value and the next one is demanded, else FloatingPointError.
    """
    n = K.shape[0]
    Md = sp.diags(M)
    k = min(n_probe, n - 2)
    if n <= 400:
        from scipy.linalg import eigh
        Kd = K.toarray() if sp.issparse(K) else K
        ev, vec = eigh(Kd, np.diag(M).astype(complex))
        top = ev[-1]
        ev, vec = ev[:k], vec[:, :k]
    else:
        top = spla.eigsh(K, k=1, M=Md, which="LA", return_eigenvectors=False)[0]
        shift = -1e-9 * top
        ev, vec = spla.eigsh(K, k=k, M=Md, sigma=shift, which="LM")
        order = np.argsort(ev)
        ev, vec = ev[order], vec[:, order]
    sv = np.sqrt(np.clip(ev, 0, None) / top)
    thr = h ** 2
    dim = int(np.sum(sv < thr))
    if dim == len(sv):
        raise FloatingPointError("kernel probe exhausted; increase n_probe")
    nxt = sv[dim]
    last = sv[dim - 1] if dim else 0.0
    gap = np.inf if last == 0 else nxt / last
    if dim and gap < require_gap:
        raise FloatingPointError(f"no spectral gap at the kernel threshold (gap {gap:.3g})")
    if dim == 0 and nxt < 2 * thr:
        raise FloatingPointError("smallest singular value too close to the threshold")
    basis = vec[:, :dim] if want_basis else None
    return KernelReport(dim, sv, thr, gap, basis)


def dbar_kernel(mesh, w, **kw):
    """Numerical kernel of d-bar on weight-w sections (holomorphic sections)."""
    K, M = scalar_laplacian(mesh, w, "dbar")
    return detect_kernel(K, M, mesh.h, **kw)


def bordered_lu(K, M, V=None):
    """Sparse LU solver for K u = r constrained orthogonal to span(V) in the M pairing."""
    n = K.shape[0]
    if V is None or V.shape[1] == 0:
        lu = spla.splu(sp.csc_matrix(K))
        return lu.solve
    C = sp.csc_matrix(M[:, None] * V)
    k = V.shape[1]
    A = sp.bmat([[K, C], [C.conj().T, None]], format="csc")
    lu = spla.splu(A)

    def solve(r):
        x = lu.solve(np.concatenate([r, np.zeros(k, dtype=complex)]).astype(complex))
        return x[:n]
    return solve


@dataclass
class GreenReport:
    residual: float
    kernel_dimension: int
    kernel_projection: float


def _laplacian_for(mesh, op, w):
    if op == "dbar_star_dbar":
        return scalar_laplacian(mesh, w, "dbar")
    if op == "dbar_dbar_star":
        # dbar dbar* on (1,1)-forms corresponds, through Lambda, to del* del
        return scalar_laplacian(mesh, w, "del")
    raise ValueError(f"unknown Laplacian {op!r}")


def green_solve(op, rhs, context=None, tol=None):
    """Solve Laplacian(u) = rhs orthogonally to the kernel.

    ``op`` is "dbar_star_dbar" (0-forms) or "dbar_dbar_star" ((1,1)-forms).
    With a ``context`` exposing ``green_solve(op, rhs)`` (Higgs data), the call
    is delegated.  Returns (solution, GreenReport).
    """
    if context is not None:
        return context.green_solve(op, rhs, tol=tol)
    mesh = rhs.mesh
    if op == "dbar_star_dbar" and rhs.form_type != "0":
        raise TypeError("dbar* dbar acts on 0-forms")
    if op == "dbar_dbar_star" and rhs.form_type != "11":
        raise TypeError("dbar dbar* acts on (1,1)-forms")
    tol = tol if tol is not None else (1e-10 if mesh.kind == "torus" else 1e-8)
    w = rhs.weight
    K, M = _laplacian_for(mesh, op, w)
    b = rhs.values if op == "dbar_star_dbar" else lambda_contract(rhs).values
    key = ("kernel", op, float(w))
    if key not in mesh._cache:
        mesh._cache[key] = detect_kernel(K, M, mesh.h)
    ker = mesh._cache[key]
    proj = 0.0
    if ker.dimension:
        V = ker.basis
        Vn = V / np.sqrt(np.real(np.einsum("ij,i,ij->j", V.conj(), M, V)))
        c = Vn.conj().T @ (M * b)
        proj = float(np.linalg.norm(c))
        b = b - Vn @ c
    key2 = ("lu", op, float(w))
    if key2 not in mesh._cache:
        mesh._cache[key2] = bordered_lu(K, M, ker.basis if ker.dimension else None)
    u = mesh._cache[key2](M * b)
    r = K @ u - M * b
    res = float(np.sqrt(np.sum(np.abs(r) ** 2 / M)) / max(1.0, np.sqrt(np.sum(M * np.abs(b) ** 2))))
    if not np.isfinite(res) or res > tol:
        raise ConvergenceError("Green solve did not reach tolerance", {"residual": res})
    out = rhs.like(u, "0")
    if op == "dbar_dbar_star":
        out = lambda_inverse(out)
    return out, GreenReport(res, ker.dimension, proj)


# ---------------------------------------------------------------------------
# Smooth test sections
# ---------------------------------------------------------------------------

def canonical_holomorphic_basis(mesh, w):
    """Basis of holomorphic weight-w sections normalized by moment functionals.

    The basis B_j satisfies sum_m weights_m B_j(z_m) conj(z_m)^k = delta_jk,
    which fixes it independently of the resolution (up to discretization).
    """
    key = ("holo", float(w))
    if key not in mesh._cache:
        rep = dbar_kernel(mesh, w, want_basis=True)
        V = rep.basis
        d = V.shape[1]
        C = np.array([[np.sum(mesh.weights * V[:, j] * np.conj(mesh.z) ** k) for j in range(d)]
                      for k in range(d)])
        mesh._cache[key] = V @ np.linalg.inv(C)
    return mesh._cache[key]


def smooth_section(mesh, p, q, variant=0):
    """Smooth automorphic field of integer bi-weight (p, q) at master nodes.

    Built as omega_a^alpha conj(omega_b)^beta rho^c from holomorphic 1-forms
    omega and the background density rho; ``variant`` selects the pair (a, b).
    On the torus plane waves are returned instead.
    """
    if mesh.genus == 1:
        x, y = mesh.z.real, mesh.z.imag
        k = variant + 1
        return np.exp(2j * np.pi * (k * x - (variant % 2) * y)) + 0.5 * np.cos(2 * np.pi * y)
    om = canonical_holomorphic_basis(mesh, 1)
    a, b = om[:, variant % om.shape[1]], om[:, (variant + 1) % om.shape[1]]
    m = max(0, -int(p), -int(q))
    alpha, beta, c = int(p) + m, int(q) + m, -m
    return a ** alpha * np.conj(b) ** beta * mesh.rho ** c
