"""Catalog of explicit hyperbolic model systems.

Five models, all with an evaluable flow, exact derivative cocycle, flat
Euclidean chart metric, and (where a lattice exists) closed-form reduction:

``CatSuspension``
    Constant-roof suspension of a hyperbolic toral automorphism (default
    ``[[2, 1], [1, 1]]``).  Quotiented; the roof direction carries exponent 0.
``BorelSmale``
    Suspension of a diagonal automorphism of a product of two Heisenberg
    groups.  The automorphism multiplies the ring coordinates of Q(sqrt 5) by
    powers of the quadratic unit ``lam``; the ring lattice realises the
    quotient, so reduction uses the (polarised) Heisenberg group law.
``BorelSmalePerturbed``
    Abelianised toral variant of the above with a small shear on the
    slow-fiber torus, applied at roof crossings.  No exact exponents are
    declared; everything about it is measured.
``ASL2Model``
    ASL(2, R) = SL(2, R) x| R^2 with the diagonal flow, chart-local (no
    lattice configured).
``SL3Model``
    SL(3, R) with a split Cartan flow, chart-local.

Chart conventions
-----------------
Linear models act diagonally on a fixed global chart whose axes are weight
vectors; the chart metric is flat Euclidean.  Chart-local models store a
point as Lie-algebra coordinates relative to the identity plus a flow clock,
so the derivative cocycle is the diagonal weight action there as well.
Leaves are orbits of the corresponding (uni potent) subgroups acting on the
left; leaf parameters are matrix entries of the unipotent factor (for matrix
groups) or polarised group coordinates (for the Heisenberg pair).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidParams, NonFinite, Unsupported

SQRT5 = math.sqrt(5.0)
PHI = (1.0 + SQRT5) / 2.0
PHI_BAR = (1.0 - SQRT5) / 2.0
#: Default base unit for the Heisenberg-pair automorphism: (3+sqrt5)/2 = phi^2,
#: the fundamental totally positive unit of Z[phi].
LAMBDA_UNIT = (3.0 + SQRT5) / 2.0

#: Ring lattice of Z[phi] under the two real embeddings, as column basis.
RING_BASIS = np.array([[1.0, PHI], [1.0, PHI_BAR]])
RING_BASIS_INV = np.linalg.inv(RING_BASIS)

KINDS = ("CatSuspension", "BorelSmale", "BorelSmalePerturbed", "ASL2Model", "SL3Model")

LEAF_KINDS = ("Stable", "Unstable", "StrongUnstable", "CenterStable")


@dataclass(frozen=True)
class SystemSpec:
    """Kind tag plus kind-specific parameters."""

    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class Point:
    """A phase-space point in the model's fixed global chart."""

    coords: np.ndarray
    reduced: bool = False

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if not np.all(np.isfinite(self.coords)):
            raise NonFinite("point has non-finite coordinates")

    def copy(self) -> "Point":
        return Point(self.coords.copy(), self.reduced)


@dataclass(frozen=True)
class Block:
    """One spectral block: growth rate and an orthonormal chart basis."""

    rate: float
    basis: np.ndarray  # (dim, k), columns orthonormal


@dataclass
class System:
    """An instantiated model.

    ``flow_dim_split`` lists the (stable, neutral, unstable, strong-unstable)
    block dimensions; ``exact_exponents`` is sorted descending when present.
    """

    kind: str
    dim: int
    flow_dim_split: tuple
    exact_exponents: list | None
    metric: str
    spec: SystemSpec
    model: object


# ---------------------------------------------------------------------------
# small helpers


def _frac(x):
    return x - np.floor(x)


def _axis(dim, i):
    e = np.zeros(dim)
    e[i] = 1.0
    return e


def ring_reduce(pair: np.ndarray) -> tuple:
    """Reduce a 2-vector modulo the Z[phi] ring lattice.

    Returns (reduced pair, lattice pair removed)."""
    n = RING_BASIS_INV @ pair
    n_int = np.floor(n)
    red = RING_BASIS @ (n - n_int)
    return red, RING_BASIS @ n_int


# ---------------------------------------------------------------------------
# plain Heisenberg utilities (polarised coordinates, integer lattice)


def heisenberg_mult(l, r):
    """Polarised Heisenberg group law: z picks up l_x * r_y."""
    lx, ly, lz = l
    rx, ry, rz = r
    return np.array([lx + rx, ly + ry, lz + rz + lx * ry])


def heisenberg_inverse(g):
    x, y, z = g
    return np.array([-x, -y, -z + x * y])


def heisenberg_reduce(coords) -> np.ndarray:
    """Canonical representative of a point of H(R)/H(Z), entries in [0, 1).

    Right-multiplies by integer-lattice elements: first the x generator, then
    y (which shifts z by x*eta through the group law), then the centre.
    """
    x, y, z = (float(c) for c in coords)
    x_red = x - math.floor(x)
    y_shift = -math.floor(y)
    y_red = y + y_shift
    z = z + x_red * y_shift
    z_red = z - math.floor(z)
    return np.array([x_red, y_red, z_red])


# ---------------------------------------------------------------------------
# CatSuspension


class _CatSuspension:
    kind = "CatSuspension"
    quotiented = True
    chart_bound = 1e12
    qni_order = None

    def __init__(self, matrix):
        A = np.asarray(matrix, dtype=float)
        if A.shape != (2, 2) or not np.allclose(A, np.round(A)):
            raise InvalidParams("cat map matrix must be 2x2 integer")
        if abs(round(np.linalg.det(A)) - 1) > 0:
            raise InvalidParams("cat map matrix must have determinant 1")
        if np.trace(A) <= 2:
            raise InvalidParams("cat map matrix must be hyperbolic with positive spectrum")
        self.A = A
        evals, evecs = np.linalg.eig(A)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        self.mu = float(evals[0])
        self.log_mu = math.log(self.mu)
        self._evals = evals
        self._V = evecs / np.linalg.norm(evecs, axis=0)
        self._Vinv = np.linalg.inv(self._V)
        self.dim = 3
        self.theta_index = 2
        self.weights = np.array([self.log_mu, -self.log_mu, 0.0])  # per eigendirection
        e_plus = np.concatenate([self._V[:, 0], [0.0]])
        e_minus = np.concatenate([self._V[:, 1], [0.0]])
        e_theta = _axis(3, 2)
        self.blocks = [
            Block(self.log_mu, e_plus.reshape(3, 1)),
            Block(0.0, e_theta.reshape(3, 1)),
            Block(-self.log_mu, e_minus.reshape(3, 1)),
        ]
        self.split = (1, 1, 1, 1)
        self.exact_exponents = [self.log_mu, 0.0, -self.log_mu]
        self.rate_top = self.log_mu
        self.rate_second = None
        self.rate_slow_stable = self.log_mu

    def power(self, t):
        return (self._V * self._evals**t) @ self._Vinv

    def flow(self, c, t):
        out = c.copy()
        out[:2] = self.power(t) @ c[:2]
        out[2] += t
        return out

    def dflow(self, c, t):
        D = np.eye(3)
        D[:2, :2] = self.power(t)
        return D

    def reduce(self, c):
        theta = _frac(c[2])
        # lattice at height theta is A^theta . Z^2
        w = self.power(-theta) @ c[:2]
        w = w - np.floor(w)
        out = np.empty(3)
        out[:2] = self.power(theta) @ w
        out[2] = theta
        return out

    # leaves -----------------------------------------------------------
    def leaf_dirs(self, kind):
        if kind == "Unstable" or kind == "StrongUnstable":
            return self.blocks[0].basis
        if kind == "Stable":
            return self.blocks[2].basis
        if kind == "CenterStable":
            return np.column_stack([self.blocks[2].basis, self.blocks[1].basis])
        raise InvalidParams(f"unknown leaf kind {kind!r}")

    def leaf_translate(self, c, kind, params):
        params = np.atleast_1d(np.asarray(params, dtype=float))
        return c + self.leaf_dirs(kind) @ params

    def leaf_point_from_params(self, c, kind, params):
        return self.leaf_translate(c, kind, params)

    def cs_u_factorize(self, x, xp):
        """Solve w, (c, dtheta) with  xp + w e+ = c e- + g_dtheta(x)."""
        dtheta = xp[2] - x[2]
        rhs = (self.power(dtheta) @ x[:2]) - xp[:2]
        M = np.column_stack([self._V[:, 0], -self._V[:, 1]])
        sol = np.linalg.solve(M, rhs)
        w = sol[:1]
        cs = np.array([sol[1], dtheta])
        return w, cs

    def unstable_shift(self, c, u):
        out = c.copy()
        out[:2] = c[:2] + u * self._V[:, 0]
        return out


# ---------------------------------------------------------------------------
# Heisenberg-pair suspension (and its abelianised perturbed variant)

# chart coordinate order: x1 x2 y1 y2 z1 z2 theta
_X1, _X2, _Y1, _Y2, _Z1, _Z2, _TH = range(7)
_COPY1 = (_X1, _Y1, _Z1)
_COPY2 = (_X2, _Y2, _Z2)


def _pair_mult(l, r):
    """Product in N x N, polarised coordinates, on 6-vectors."""
    out = np.empty(6)
    for (ix, iy, iz) in (_COPY1, _COPY2):
        out[ix] = l[ix] + r[ix]
        out[iy] = l[iy] + r[iy]
        out[iz] = l[iz] + r[iz] + l[ix] * r[iy]
    return out


def _pair_inverse(g):
    out = np.empty(6)
    for (ix, iy, iz) in (_COPY1, _COPY2):
        out[ix] = -g[ix]
        out[iy] = -g[iy]
        out[iz] = -g[iz] + g[ix] * g[iy]
    return out


class _NilPairSuspension:
    kind = "BorelSmale"
    quotiented = True
    chart_bound = 1e300

    def __init__(self, a, b, lam):
        if int(a) != a or int(b) != b or a == 0 or b == 0:
            raise InvalidParams("weights a, b must be nonzero integers")
        if a == -b:
            raise InvalidParams("a = -b collapses the centre weight to zero")
        if lam <= 1.0:
            raise InvalidParams("base unit lam must exceed 1")
        self.a, self.b, self.lam = int(a), int(b), float(lam)
        self.log_lam = math.log(lam)
        w = np.empty(7)
        w[_X1], w[_X2] = a, -a
        w[_Y1], w[_Y2] = b, -b
        w[_Z1], w[_Z2] = a + b, -(a + b)
        w[_TH] = 0.0
        self.weights = w  # integer weights per chart axis
        self.rates = w * self.log_lam
        self.dim = 7
        self.theta_index = _TH
        order = np.argsort(w[:7])[::-1]
        groups = {}
        for i in order:
            groups.setdefault(w[i], []).append(i)
        self.blocks = [
            Block(wt * self.log_lam, np.column_stack([_axis(7, i) for i in idxs]))
            for wt, idxs in sorted(groups.items(), reverse=True)
        ]
        self.exact_exponents = sorted((float(r) for r in self.rates), reverse=True)
        pos = sorted({wt for wt in w[:6] if wt > 0}, reverse=True)
        neg = sorted({-wt for wt in w[:6] if wt < 0})
        self.rate_top = pos[0] * self.log_lam
        self.rate_second = pos[1] * self.log_lam if len(pos) > 1 else None
        self.rate_slow_stable = neg[0] * self.log_lam
        n_u = int(np.sum(w[:6] > 0))
        n_s = int(np.sum(w[:6] < 0))
        n_uu = int(np.sum(w[:6] == max(w[:6])))
        self.split = (n_s, 1, n_u, n_uu)
        self.qni_order = 2
        self._unstable_idx = [i for i in range(6) if w[i] > 0]
        self._stable_idx = [i for i in range(6) if w[i] < 0]

    # flow -------------------------------------------------------------
    def flow(self, c, t):
        out = c.copy()
        out[:6] = c[:6] * np.exp(self.rates[:6] * t)
        out[_TH] += t
        return out

    def dflow(self, c, t):
        d = np.exp(self.rates * t)
        d[_TH] = 1.0
        return np.diag(d)

    # quotient ----------------------------------------------------------
    def _alpha(self, v6, t):
        return v6 * np.exp(self.rates[:6] * t)

    def _gamma0_reduce(self, v6):
        v = v6.copy()
        x_red, _ = ring_reduce(v[[_X1, _X2]])
        v[[_X1, _X2]] = x_red
        y_pair = v[[_Y1, _Y2]]
        n = RING_BASIS_INV @ y_pair
        n_int = np.floor(n)
        eta = -RING_BASIS @ n_int  # lattice pair added to y
        v[[_Y1, _Y2]] = RING_BASIS @ (n - n_int)
        v[_Z1] += v[_X1] * eta[0]
        v[_Z2] += v[_X2] * eta[1]
        z_red, _ = ring_reduce(v[[_Z1, _Z2]])
        v[[_Z1, _Z2]] = z_red
        return v

    def reduce(self, c):
        theta = _frac(c[_TH])
        w = self._alpha(c[:6], -theta)
        w = self._gamma0_reduce(w)
        out = np.empty(7)
        out[:6] = self._alpha(w, theta)
        out[_TH] = theta
        return out

    # leaves -------------------------------------------------------------
    def _kind_indices(self, kind):
        w = self.weights
        top = max(w[:6])
        if kind == "StrongUnstable":
            return [i for i in range(6) if w[i] == top]
        if kind == "Unstable":
            return self._unstable_idx
        if kind == "Stable":
            return self._stable_idx
        if kind == "CenterStable":
            return self._stable_idx  # theta handled separately
        raise InvalidParams(f"unknown leaf kind {kind!r}")

    def leaf_dirs(self, kind):
        idxs = self._kind_indices(kind)
        cols = [_axis(7, i) for i in idxs]
        if kind == "CenterStable":
            cols.append(_axis(7, _TH))
        return np.column_stack(cols)

    def leaf_translate(self, c, kind, params):
        """Left-translate by the subgroup element with the given coordinates."""
        params = np.atleast_1d(np.asarray(params, dtype=float))
        idxs = self._kind_indices(kind)
        if kind == "CenterStable":
            base = self.flow(c, params[-1])
            params = params[:-1]
        else:
            base = c.copy()
        l = np.zeros(6)
        l[idxs] = params
        out = base.copy()
        out[:6] = _pair_mult(l, base[:6])
        return out

    def cs_u_factorize(self, x, xp):
        """Closed-form w,(cs,dtheta):  w . xp = cs . g_dtheta(x) in the group.

        Requires the canonical sign pattern (unstable = x1, y2, z1)."""
        w = self.weights
        if not (w[_X1] > 0 and w[_Y2] > 0 and w[_Z1] > 0):
            raise Unsupported("closed-form projection requires a>0, b<0, a+b>0")
        dtheta = xp[_TH] - x[_TH]
        xd = self.flow(x, dtheta)[:6]
        v = xp[:6]
        w_x1 = xd[_X1] - v[_X1]
        c_y1 = v[_Y1] - xd[_Y1]
        w_z1 = xd[_Z1] - v[_Z1] - w_x1 * v[_Y1]
        c_x2 = v[_X2] - xd[_X2]
        w_y2 = xd[_Y2] - v[_Y2]
        c_z2 = xd[_Z2] - v[_Z2] - c_x2 * xd[_Y2]
        # unstable params ordered per _kind_indices("Unstable")
        w_params = {_X1: w_x1, _Y2: w_y2, _Z1: w_z1}
        cs_params = {_X2: c_x2, _Y1: c_y1, _Z2: c_z2}
        u = np.array([w_params[i] for i in self._unstable_idx])
        cs = np.array([cs_params[i] for i in self._stable_idx] + [dtheta])
        return u, cs

    def unstable_shift(self, c, u):
        top = [i for i in range(6) if self.weights[i] == max(self.weights[:6])]
        l = np.zeros(6)
        l[top[0]] = u
        out = c.copy()
        out[:6] = _pair_mult(l, c[:6])
        return out


class _ToralPerturbedSuspension:
    """Abelianised variant with lattice-periodic shears on the torus fibers.

    Each sheared pair moves in its ring-lattice coordinates,
    ``n1 += eps * sin(2 pi n2)``, applied at upward roof crossings (inverse
    at downward crossings).  Between crossings the flow is the exact diagonal
    weight action, so the group law holds to round-off.  Both the slow pair
    and the second pair are sheared: a slow-fiber-only perturbation leaves
    the whole second-line transfer machinery exactly trivial, which would
    make every measured check of it vacuous.
    """

    kind = "BorelSmalePerturbed"
    quotiented = True
    chart_bound = 1e300
    exact_exponents = None

    def __init__(self, a, b, lam, eps_pert):
        base = _NilPairSuspension(a, b, lam)
        if eps_pert < 0:
            raise InvalidParams("perturbation amplitude must be nonnegative")
        if eps_pert >= 1.0 / (4.0 * math.pi):
            raise InvalidParams("perturbation too large: requires eps_pert < 1/(4 pi)")
        self._base = base
        self.a, self.b, self.lam = base.a, base.b, base.lam
        self.log_lam = base.log_lam
        self.eps = float(eps_pert)
        self.weights = base.weights
        self.rates = base.rates
        self.dim = 7
        self.theta_index = _TH
        self.blocks = base.blocks  # reference axes only; true splitting is measured
        self.split = base.split
        self.rate_top = base.rate_top
        self.rate_second = base.rate_second
        self.rate_slow_stable = base.rate_slow_stable
        self.qni_order = 2
        self._unstable_idx = base._unstable_idx
        self._stable_idx = base._stable_idx
        self._sheared_pairs = ((_Z1, _Z2), (_Y1, _Y2))
        self._check_fiber_invertible()

    def _check_fiber_invertible(self):
        grid = np.linspace(0.0, 1.0, 64, endpoint=False)
        dets = np.ones_like(grid)  # shear has unit determinant pointwise
        jac_off = 2.0 * math.pi * self.eps * np.cos(2.0 * math.pi * grid)
        if np.min(np.abs(dets)) < 0.5 or not np.all(np.isfinite(jac_off)):
            raise InvalidParams("perturbed fiber map is not safely invertible")

    # fiber shear in ring-lattice coordinates of the z-pair -------------
    def _shear(self, z_pair, sign):
        n = RING_BASIS_INV @ z_pair
        n = n.copy()
        n[0] += sign * self.eps * math.sin(2.0 * math.pi * n[1])
        return RING_BASIS @ n

    def _shear_jac(self, z_pair, sign):
        n = RING_BASIS_INV @ z_pair
        J = np.eye(2)
        J[0, 1] = sign * self.eps * 2.0 * math.pi * math.cos(2.0 * math.pi * n[1])
        return RING_BASIS @ J @ RING_BASIS_INV

    def _crossings(self, theta0, t):
        """Integer heights crossed by [theta0, theta0+t], ordered along the flow.

        Upward motion crosses k when theta passes k from below; downward
        motion crosses k when leaving [k, k+1) through k, so forward and
        backward flows invert each other exactly."""
        if t > 0:
            lo, hi = math.floor(theta0) + 1, math.floor(theta0 + t)
            return list(range(lo, hi + 1)), +1
        if t < 0:
            hi, lo = math.floor(theta0), math.floor(theta0 + t) + 1
            return list(range(hi, lo - 1, -1)), -1
        return [], +1

    def _flow_with_jacobian(self, c, t, want_jac):
        rates = self.rates[:6]
        v = c[:6].copy()
        theta0 = c[_TH]
        ks, sign = self._crossings(theta0, t)
        J = None
        if want_jac:
            J = np.zeros((6, 7))
            J[:, :6] = np.eye(6)

        def scale(duration, dtheta0_coeff):
            nonlocal v, J
            E = np.exp(rates * duration)
            v = E * v
            if want_jac:
                J = E[:, None] * J
                if dtheta0_coeff != 0.0:
                    J[:, 6] += dtheta0_coeff * rates * v

        def shear_step():
            nonlocal v, J
            for (i, j) in self._sheared_pairs:
                pre = v[[i, j]].copy()
                v[[i, j]] = self._shear(pre, sign)
                if want_jac:
                    Jz = self._shear_jac(pre, sign)
                    J[[i, j], :] = Jz @ J[[i, j], :]

        if not ks:
            scale(t, 0.0)
        else:
            scale(ks[0] - theta0, -1.0)
            shear_step()
            for k in ks[1:]:
                scale(float(sign), 0.0)
                shear_step()
            scale(theta0 + t - ks[-1], +1.0)
        out = np.empty(7)
        out[:6] = v
        out[_TH] = theta0 + t
        if not np.all(np.isfinite(out)):
            raise NonFinite("flow overflow")
        if want_jac:
            D = np.zeros((7, 7))
            D[:6, :] = J
            D[_TH, _TH] = 1.0
            return out, D
        return out, None

    def flow(self, c, t):
        out, _ = self._flow_with_jacobian(c, float(t), False)
        return out

    def dflow(self, c, t):
        _, D = self._flow_with_jacobian(c, float(t), True)
        return D

    def reduce(self, c):
        theta = _frac(c[_TH])
        w = c[:6] * np.exp(self.rates[:6] * -theta)
        out_pairs = np.empty(6)
        for (i, j) in ((_X1, _X2), (_Y1, _Y2), (_Z1, _Z2)):
            red, _ = ring_reduce(w[[i, j]])
            out_pairs[[i, j]] = red
        out = np.empty(7)
        out[:6] = out_pairs * np.exp(self.rates[:6] * theta)
        out[_TH] = theta
        return out

    # leaves: linear in the x/y pairs, curved in the z pair --------------
    def _kind_indices(self, kind):
        return _NilPairSuspension._kind_indices(self, kind)

    def leaf_dirs(self, kind):
        idxs = self._kind_indices(kind)
        cols = [_axis(7, i) for i in idxs]
        if kind == "CenterStable":
            cols.append(_axis(7, _TH))
        return np.column_stack(cols)

    def leaf_translate(self, c, kind, params):
        """Only the fast block is a straight line here; other leaves are
        curved in the fiber pair and must go through leaf charts."""
        if kind != "StrongUnstable":
            raise Unsupported(
                "perturbed leaves are curved; build a leaf chart instead"
            )
        params = np.atleast_1d(np.asarray(params, dtype=float))
        idxs = self._kind_indices(kind)
        out = c.copy()
        out[idxs] += params
        return out

    def unstable_shift(self, c, u):
        top = [i for i in range(6) if self.weights[i] == max(self.weights[:6])]
        out = c.copy()
        out[top[0]] += u
        return out


# ---------------------------------------------------------------------------
# chart-local homogeneous models (matrix groups)


def _logm_posreal(g):
    """Principal log of a real matrix with positive real spectrum.

    Eigen-based fast path; falls back to scipy.linalg.logm near defective
    matrices."""
    w, V = np.linalg.eig(g)
    if np.min(np.abs(w.real)) > 1e-12 and np.max(np.abs(w.imag)) < 1e-12 and np.min(w.real) > 0:
        cond = np.linalg.cond(V)
        if cond < 1e8:
            L = (V * np.log(w.real)) @ np.linalg.inv(V)
            if np.max(np.abs(L.imag)) < 1e-9:
                return L.real
    L = scipy.linalg.logm(g)
    if np.max(np.abs(np.asarray(L).imag)) > 1e-8:
        raise NonFinite("matrix log left the real chart")
    return np.asarray(L).real


class _MatrixGroupModel:
    """Common machinery for ASL2Model and SL3Model.

    Points are stored as (xi, sigma): Lie-algebra coordinates in a fixed
    weight basis orthogonal to the flow generator, plus the flow clock sigma.
    The flow is the diagonal adjoint action on xi together with the clock
    shift, so the chart cocycle is exact.
    """

    quotiented = False

    def __init__(self):
        self._ad_basis = None

    # subclasses define: n (matrix size), basis (list of matrices), rates,
    # H_flow, theta_index (clock slot), perm (weight-sorting permutation)

    def flow(self, c, t):
        out = c * np.exp(self.rates * t)
        out[self.theta_index] = c[self.theta_index] + t
        if np.max(np.abs(out)) > self.chart_bound:
            raise NonFinite("orbit left the configured chart")
        return out

    def dflow(self, c, t):
        d = np.exp(self.rates * t)
        d[self.theta_index] = 1.0
        return np.diag(d)

    def reduce(self, c):
        raise Unsupported(f"{self.kind} has no lattice configured")

    # chart <-> group element ------------------------------------------
    def matrix_from_coords(self, c):
        xi = sum(c[i] * B for i, B in enumerate(self.basis) if i != self.theta_index)
        # the flow generator is diagonal, so its exponential is closed form
        cartan = np.diag(np.exp(c[self.theta_index] * np.diag(self.H_flow)))
        return scipy.linalg.expm(xi) @ cartan

    def coords_from_matrix(self, g, sigma_guess=0.0):
        """Invert matrix_from_coords; 1-d secant solve on the clock."""
        h2 = float(np.sum(self.H_flow * self.H_flow))
        hdiag = np.diag(self.H_flow)

        def cartan_residual(sigma):
            m = g @ np.diag(np.exp(-sigma * hdiag))
            L = _logm_posreal(m)
            return float(np.sum(L * self.H_flow)) / h2, L

        s0, s1 = sigma_guess, sigma_guess + 0.1
        r0, _ = cartan_residual(s0)
        for _ in range(60):
            r1, L1 = cartan_residual(s1)
            if abs(r1) < 1e-13:
                break
            if r1 == r0:
                break
            s0, s1, r0 = s1, s1 - r1 * (s1 - s0) / (r1 - r0), r1
        else:
            raise NonFinite("clock solve did not converge")
        coords = np.empty(self.dim)
        for i, B in enumerate(self.basis):
            if i == self.theta_index:
                continue
            coords[i] = float(np.sum(L1 * B)) / float(np.sum(B * B))
        coords[self.theta_index] = s1
        # verify the remainder lies in the spanned chart
        rec = sum(coords[i] * B for i, B in enumerate(self.basis) if i != self.theta_index)
        if np.max(np.abs(rec - L1)) > 1e-8:
            raise NonFinite("matrix log left the chart span")
        return coords

    # leaves --------------------------------------------------------------
    def _entry_slots(self, kind):
        """Matrix-entry slots (i, j) parameterising the leaf, weight-descending."""
        if kind == "StrongUnstable":
            return self.uu_slots
        if kind == "Unstable":
            return self.u_slots
        if kind in ("Stable", "CenterStable"):
            return self.s_slots
        raise InvalidParams(f"unknown leaf kind {kind!r}")

    def unipotent(self, kind, params):
        n = np.eye(self.n)
        for p, (i, j) in zip(params, self._entry_slots(kind)):
            n[i, j] += p
        return n

    def leaf_translate(self, c, kind, params):
        return self.leaf_evaluator(c, kind)(params)

    def leaf_evaluator(self, c, kind):
        """Closure over the (hoisted) base group element."""
        g = self.matrix_from_coords(c)
        sigma0 = c[self.theta_index]

        def evaluate(params):
            params = np.atleast_1d(np.asarray(params, dtype=float))
            if kind == "CenterStable":
                extra = params[len(self.s_slots):]
                n = self.unipotent("Stable", params[: len(self.s_slots)])
                z = n @ self._cartan_matrix(extra) @ g
            else:
                z = self.unipotent(kind, params) @ g
            return self.coords_from_matrix(z, sigma_guess=sigma0)

        return evaluate

    def _cartan_matrix(self, extra):
        h = extra[0] * self.H_flow
        if len(extra) > 1:
            h = h + extra[1] * self.H_neutral
        return np.diag(np.exp(np.diag(h)))  # both generators are diagonal

    def leaf_dirs(self, kind):
        """First-order chart directions of the leaf parameters at any point."""
        cols = []
        for (i, j) in self._entry_slots(kind):
            E = np.zeros((self.n, self.n))
            E[i, j] = 1.0
            for k, B in enumerate(self.basis):
                if B is not None and np.allclose(B, E):
                    cols.append(_axis(self.dim, k))
                    break
        if kind == "CenterStable":
            cols.append(_axis(self.dim, self.theta_index))
            if hasattr(self, "H_neutral_index"):
                cols.append(_axis(self.dim, self.H_neutral_index))
        return np.column_stack(cols)

    def cs_u_factorize(self, x, xp):
        """Weight-sorted LU split  g(x) g(xp)^-1 = (lower . cartan) (unit upper)."""
        P = np.eye(self.n)[self.perm]
        M = self.matrix_from_coords(x) @ np.linalg.inv(self.matrix_from_coords(xp))
        Mp = P @ M @ P.T
        n = self.n
        L = np.zeros((n, n))
        U = np.eye(n)
        for i in range(n):
            for j in range(i, n):
                L[j, i] = Mp[j, i] - L[j, :i] @ U[:i, i]
            if abs(L[i, i]) < 1e-14:
                raise NonFinite("projection factorisation is singular")
            for j in range(i + 1, n):
                U[i, j] = (Mp[i, j] - L[i, :i] @ U[:i, j]) / L[i, i]
        Uq = P.T @ U @ P
        u_params = np.array([Uq[i, j] for (i, j) in self.u_slots])
        Lq = P.T @ L @ P
        cs_info = (Lq, Uq)
        return u_params, cs_info


class _ASL2Model(_MatrixGroupModel):
    kind = "ASL2Model"
    chart_bound = 1e8
    qni_order = 1

    def __init__(self):
        super().__init__()
        self.n = 3

        def unit(i, j):
            m = np.zeros((3, 3))
            m[i, j] = 1.0
            return m

        # coords: (b, x, sigma, y, c) with weights (2, 1, 0, -1, -2)
        self.basis = [unit(0, 1), unit(0, 2), None, unit(1, 2), unit(1, 0)]
        self.H_flow = np.diag([1.0, -1.0, 0.0])
        self.theta_index = 2
        self.rates = np.array([2.0, 1.0, 0.0, -1.0, -2.0])
        self.dim = 5
        self.blocks = [Block(self.rates[i], _axis(5, i).reshape(5, 1)) for i in (0, 1, 2, 3, 4)]
        self.exact_exponents = [2.0, 1.0, 0.0, -1.0, -2.0]
        self.split = (2, 1, 2, 1)
        self.rate_top = 2.0
        self.rate_second = 1.0
        self.rate_slow_stable = 1.0
        self.uu_slots = [(0, 1)]
        self.u_slots = [(0, 1), (0, 2)]
        self.s_slots = [(1, 2), (1, 0)]  # weights -1, -2
        self.perm = [0, 2, 1]  # weight-descending vertex order
        self.weights = self.rates

    def unstable_shift(self, c, u):
        return self.leaf_translate(c, "StrongUnstable", [u])


class _SL3Model(_MatrixGroupModel):
    kind = "SL3Model"
    chart_bound = 1e8
    qni_order = 1

    def __init__(self):
        super().__init__()
        self.n = 3

        def unit(i, j):
            m = np.zeros((3, 3))
            m[i, j] = 1.0
            return m

        # coords: (z, y, x, h_neutral, sigma, s1, s3, s2)
        # weights (5, 4, 1, 0, 0, -1, -4, -5) under H_flow = diag(2, 1, -3)
        hb = np.diag([4.0, -5.0, 1.0])
        hb = hb / np.linalg.norm(hb)
        self.basis = [
            unit(0, 2),
            unit(1, 2),
            unit(0, 1),
            hb,
            None,
            unit(1, 0),
            unit(2, 1),
            unit(2, 0),
        ]
        self.H_flow = np.diag([2.0, 1.0, -3.0])
        self.theta_index = 4
        self.H_neutral_index = 3
        self.H_neutral = hb
        self.rates = np.array([5.0, 4.0, 1.0, 0.0, 0.0, -1.0, -4.0, -5.0])
        self.dim = 8
        self.blocks = [
            Block(5.0, _axis(8, 0).reshape(8, 1)),
            Block(4.0, _axis(8, 1).reshape(8, 1)),
            Block(1.0, _axis(8, 2).reshape(8, 1)),
            Block(0.0, np.column_stack([_axis(8, 3), _axis(8, 4)])),
            Block(-1.0, _axis(8, 5).reshape(8, 1)),
            Block(-4.0, _axis(8, 6).reshape(8, 1)),
            Block(-5.0, _axis(8, 7).reshape(8, 1)),
        ]
        self.exact_exponents = [5.0, 4.0, 1.0, 0.0, 0.0, -1.0, -4.0, -5.0]
        self.split = (3, 2, 3, 1)
        self.rate_top = 5.0
        self.rate_second = 4.0
        self.rate_slow_stable = 1.0
        self.uu_slots = [(0, 2)]
        self.u_slots = [(0, 2), (1, 2), (0, 1)]  # weights 5, 4, 1
        self.s_slots = [(1, 0), (2, 1), (2, 0)]  # weights -1, -4, -5
        self.perm = [0, 1, 2]
        self.weights = self.rates

    def unstable_shift(self, c, u):
        return self.leaf_translate(c, "StrongUnstable", [u])


# ---------------------------------------------------------------------------
# public constructors and operations


def _build_model(spec: SystemSpec):
    p = dict(spec.params)
    if spec.kind == "CatSuspension":
        matrix = p.pop("matrix", ((2, 1), (1, 1)))
        model = _CatSuspension(matrix)
    elif spec.kind == "BorelSmale":
        model = _NilPairSuspension(p.pop("a", 3), p.pop("b", -2), p.pop("lam", LAMBDA_UNIT))
    elif spec.kind == "BorelSmalePerturbed":
        model = _ToralPerturbedSuspension(
            p.pop("a", 3), p.pop("b", -2), p.pop("lam", LAMBDA_UNIT), p.pop("eps_pert", 0.01)
        )
    elif spec.kind == "ASL2Model":
        model = _ASL2Model()
    elif spec.kind == "SL3Model":
        model = _SL3Model()
    else:
        raise InvalidParams(f"unknown system kind {spec.kind!r}")
    if p:
        raise InvalidParams(f"unknown parameters for {spec.kind}: {sorted(p)}")
    return model


def make_system(spec: SystemSpec) -> System:
    """Instantiate a system; exact exponents are populated for linear models."""
    model = _build_model(spec)
    exact = getattr(model, "exact_exponents", None)
    exact = None if exact is None else sorted((float(e) for e in exact), reverse=True)
    return System(
        kind=spec.kind,
        dim=model.dim,
        flow_dim_split=tuple(model.split),
        exact_exponents=exact,
        metric="flat",
        spec=spec,
        model=model,
    )


def _check_finite(arr, what="input"):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} is not finite")


def flow(system: System, x: Point, t: float, reduce: bool = True) -> Point:
    """Evaluate g_t(x).  Quotiented models return the lattice-reduced point."""
    _check_finite(x.coords)
    if not math.isfinite(t):
        raise NonFinite("time is not finite")
    c = system.model.flow(x.coords, float(t))
    _check_finite(c, "flow image")
    if reduce and system.model.quotiented:
        return Point(system.model.reduce(c), reduced=True)
    return Point(c, reduced=False)


def tangent_flow(system: System, x: Point, t: float) -> np.ndarray:
    """Derivative cocycle Dg_t at x in the global chart."""
    _check_finite(x.coords)
    D = system.model.dflow(x.coords, float(t))
    _check_finite(D, "tangent flow")
    return D


def lattice_reduce(system: System, x: Point) -> Point:
    """Canonical fundamental-domain representative of the coset of x."""
    if not system.model.quotiented:
        raise Unsupported(f"{system.kind} operates on a local chart; no lattice is configured")
    return Point(system.model.reduce(x.coords), reduced=True)


def dist(system: System, p: Point, q: Point) -> float:
    """Flat chart distance."""
    return float(np.linalg.norm(p.coords - q.coords))


def leaf_translate(system: System, x: Point, kind: str, params) -> Point:
    """Point on the `kind` leaf of x with the given leaf parameters."""
    m = system.model
    if hasattr(m, "leaf_translate"):
        return Point(m.leaf_translate(x.coords, kind, params))
    params = np.atleast_1d(np.asarray(params, dtype=float))
    return Point(x.coords + m.leaf_dirs(kind) @ params)


def stable_translate(system, x, params):
    return leaf_translate(system, x, "Stable", params)


def unstable_translate(system, x, params):
    return leaf_translate(system, x, "Unstable", params)


def strong_unstable_translate(system, x, params):
    return leaf_translate(system, x, "StrongUnstable", params)


def center_stable_translate(system, x, params):
    return leaf_translate(system, x, "CenterStable", params)


def unstable_shift(system: System, x: Point, u: float) -> Point:
    """One-parameter strong-unstable translation (leaf parameter u)."""
    return Point(system.model.unstable_shift(x.coords, float(u)))


def leaf_dimension(system: System, kind: str) -> int:
    return system.model.leaf_dirs(kind).shape[1]


def origin(system: System) -> Point:
    return Point(np.zeros(system.dim))


def random_point(system: System, rng) -> Point:
    """Seeded generic point (reduced on quotient models, small on local charts)."""
    c = rng.uniform(0.0, 1.0, size=system.dim)
    if system.model.quotiented:
        return Point(system.model.reduce(c), reduced=True)
    return Point(0.2 * (c - 0.5))


