"""Local leaf charts, projections between leaves, dynamical quadrilaterals.

A leaf chart maps leaf parameters to ambient chart coordinates.  For the
linear group models the evaluator is exact group arithmetic (affine in the
polarised Heisenberg coordinates, matrix-entry unipotents for the Lie
groups); the perturbed model builds its curved slow-fiber leaf by iterating
a graph transform on polynomial jets.  The chart also carries a truncated
polynomial with a certified remainder bound, which is what grid-based
consumers (local Hausdorff distance) sample.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import systems as sysmod
from .errors import (
    DegenerateFit,
    EmptyIntersection,
    InvalidParams,
    NoConvergence,
    NoIntersection,
)
from .systems import Point, System


# ---------------------------------------------------------------------------
# multivariate polynomial with vector coefficients


@dataclass
class PolyMap:
    """Sum of coeff * prod(params**exps) terms mapping R^p -> R^n."""

    param_dim: int
    out_dim: int
    terms: dict  # tuple(exponents) -> ndarray(out_dim)

    def evaluate(self, params):
        params = np.atleast_1d(np.asarray(params, dtype=float))
        out = np.zeros(self.out_dim)
        for exps, vec in self.terms.items():
            mono = 1.0
            for p, e in zip(params, exps):
                if e:
                    mono *= p**e
            out += mono * vec
        return out

    def degree(self):
        return max((sum(e) for e in self.terms), default=0)

    @staticmethod
    def fit(evaluator, param_dim, out_dim, order, radius, n_grid=5):
        """Least-squares polynomial fit of an exact evaluator.

        Full box grid in low parameter dimension, a fixed seeded sample above
        it (evaluator calls dominate the cost there)."""
        exps = [
            e
            for e in itertools.product(range(order + 1), repeat=param_dim)
            if sum(e) <= order
        ]
        if n_grid**param_dim <= 4 * max(len(exps), 32):
            axes = [np.linspace(-radius, radius, n_grid)] * param_dim
            pts = np.array(list(itertools.product(*axes)))
        else:
            gen = np.random.Generator(np.random.Philox(20240301))
            n_pts = max(3 * len(exps), 120)
            pts = radius * (2.0 * gen.random((n_pts, param_dim)) - 1.0)
        A = np.empty((len(pts), len(exps)))
        for j, e in enumerate(exps):
            A[:, j] = np.prod(pts**np.array(e), axis=1)
        Y = np.array([evaluator(p) for p in pts])
        coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
        terms = {tuple(e): coef[j] for j, e in enumerate(exps)}
        return PolyMap(param_dim, out_dim, terms)


@dataclass
class LeafChart:
    """Parameterised local leaf through `base`.

    ``evaluate`` is the authoritative chart map; ``coeffs`` is its polynomial
    truncation at ``order`` with sup error ``remainder_bound`` inside
    ``radius``.
    """

    base: Point
    leaf_kind: str
    order: int
    coeffs: PolyMap
    radius: float
    remainder_bound: float
    evaluator: object = field(repr=False, default=None)
    #: accuracy of `evaluate` itself: 0 for exact group evaluators, the
    #: polynomial remainder when the polynomial is all there is
    evaluator_error: float = 0.0

    @property
    def param_dim(self):
        return self.coeffs.param_dim

    def evaluate(self, params):
        if self.evaluator is not None:
            return self.evaluator(np.atleast_1d(np.asarray(params, dtype=float)))
        return self.coeffs.evaluate(params)

    def evaluate_poly(self, params):
        return self.coeffs.evaluate(params)

    def jacobian(self, params, h=1e-6):
        params = np.atleast_1d(np.asarray(params, dtype=float))
        J = np.empty((self.coeffs.out_dim, self.param_dim))
        for j in range(self.param_dim):
            dp = params.copy()
            dm = params.copy()
            dp[j] += h
            dm[j] -= h
            J[:, j] = (self.evaluate(dp) - self.evaluate(dm)) / (2.0 * h)
        return J


# ---------------------------------------------------------------------------
# series helpers for the graph transform (one variable, zero constant term)


def _ser_mul(a, b, order):
    """Product of two series with zero constant term (coeffs indexed from power 1)."""
    out = np.zeros(order)
    for i, ai in enumerate(a, start=1):
        if ai == 0.0:
            continue
        for j, bj in enumerate(b, start=1):
            if i + j <= order:
                out[i + j - 1] += ai * bj
    return out


def _ser_compose(outer, inner, order):
    """outer(inner(s)) for series with zero constant term, coeffs from power 1."""
    result = np.zeros(order)
    current = None
    for k, ck in enumerate(outer, start=1):
        current = inner[:order].copy() if current is None else _ser_mul(current, inner, order)
        if ck != 0.0:
            result += ck * current
    return result


def _ser_invert(a, order):
    """Series inverse of s' = a1 s + a2 s^2 + ... (a1 != 0)."""
    if abs(a[0]) < 1e-14:
        raise NoConvergence("series not invertible")
    b = np.zeros(order)
    b[0] = 1.0 / a[0]
    for n in range(2, order + 1):
        acc = 0.0
        # coefficient of s'^n in sum_k a_k * (b(s'))^k must vanish
        comp = _ser_compose(a, b, order)
        acc = comp[n - 1]
        b[n - 1] -= acc / a[0]
    return b


# ---------------------------------------------------------------------------
# perturbed slow-fiber graph transform


def _fiber_leaf_series(model, pair_vals, theta, rates, unstable, order, iters=80):
    """Graph-transform jet of the (un)stable curve of a sheared fiber pair.

    The unit-time return map at section height theta scales to the crossing,
    shears, then scales the rest: F = D^theta . S . D^(1-theta) on the pair
    (values in embedding order, diagonal rates `rates`).  The curve through p
    is a graph over the expanding slot (unstable case) or the contracting
    slot (stable case); transverse coefficients from power 1 up to `order`
    are iterated to their fixed point.
    """
    eps = model.eps
    Binv = sysmod.RING_BASIS_INV
    B = sysmod.RING_BASIS
    theta = float(theta)
    rates = np.asarray(rates, dtype=float)

    def scale_vec(z, duration):
        return z * np.exp(rates * duration)

    def fmap(z, sign):
        if sign > 0:
            return scale_vec(model._shear(scale_vec(z, 1.0 - theta), +1), theta)
        return scale_vec(model._shear(scale_vec(z, -theta), -1), -(1.0 - theta))

    sign = +1 if unstable else -1
    expand_slot = int(np.argmax(rates))
    graph_axis = expand_slot if unstable else 1 - expand_slot
    trans_axis = 1 - graph_axis

    # backward orbit of the base point under the section map, kept bounded by
    # reduction with the height-theta lattice D^theta . Lambda (the plain
    # ring lattice would shift the crossing phases)
    def reduce_at_height(z):
        w = Binv @ scale_vec(z, -theta)
        return scale_vec(B @ (w - np.floor(w)), theta)

    orbit = [np.asarray(pair_vals, dtype=float)]
    for _ in range(iters):
        orbit.append(reduce_at_height(fmap(orbit[-1], -sign)))

    def scale_series(c, base, duration):
        g = np.exp(rates * duration)
        return [c[0] * g[0], c[1] * g[1]], scale_vec(base, duration)

    def shear_series(c, base, shear_sign):
        # shear in lattice coordinates: n1 += sgn * eps * sin(2 pi n2)
        n_base = Binv @ base
        n1 = Binv[0, 0] * c[0] + Binv[0, 1] * c[1]
        n2 = Binv[1, 0] * c[0] + Binv[1, 1] * c[1]
        phase = 2.0 * math.pi * n_base[1]
        scaled = 2.0 * math.pi * n2
        series = np.zeros(order)
        pw = None
        for k in range(1, order + 1):
            deriv = math.sin(phase + 0.5 * math.pi * k)  # k-th derivative of sin
            pw = scaled.copy() if pw is None else _ser_mul(pw, scaled, order)
            series += deriv / math.factorial(k) * pw
        n1 = n1 + shear_sign * eps * series
        out = [B[0, 0] * n1 + B[0, 1] * n2, B[1, 0] * n1 + B[1, 1] * n2]
        return out, model._shear(base, shear_sign)

    def push(h_prev, q):
        """Image jet at fmap(q) of the curve q + graph(h_prev)."""
        c = [np.zeros(order), np.zeros(order)]
        c[graph_axis][0] = 1.0
        c[trans_axis][:] = h_prev
        base = q.copy()
        if sign > 0:
            c, base = scale_series(c, base, 1.0 - theta)
            c, base = shear_series(c, base, +1)
            c, base = scale_series(c, base, theta)
        else:
            c, base = scale_series(c, base, -theta)
            c, base = shear_series(c, base, -1)
            c, base = scale_series(c, base, -(1.0 - theta))
        u, v = c[graph_axis], c[trans_axis]
        return _ser_compose(v, _ser_invert(u, order), order)

    h = np.zeros(order)
    for k in range(iters, 0, -1):
        h = push(h, orbit[k])
        if not np.all(np.isfinite(h)):
            raise NoConvergence("graph transform diverged")
    return h, graph_axis, trans_axis


# ---------------------------------------------------------------------------
# chart construction


def _orthonormalize_params(evaluator, pdim, h=1e-6):
    """Wrap an evaluator so its first-order term is an isometric injection."""
    J = np.empty((len(evaluator(np.zeros(pdim))), pdim))
    for j in range(pdim):
        dp = np.zeros(pdim)
        dp[j] = h
        J[:, j] = (evaluator(dp) - evaluator(-dp)) / (2.0 * h)
    _, R = np.linalg.qr(J)
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0.0] = 1.0
    R = R * sgn[:, None]
    if np.max(np.abs(R - np.eye(pdim))) < 1e-9:
        return evaluator
    Rinv = np.linalg.inv(R)

    def wrapped(params):
        return evaluator(Rinv @ np.atleast_1d(np.asarray(params, dtype=float)))

    return wrapped


def _linear_chart(system, x, kind, order):
    model = system.model

    if hasattr(model, "leaf_evaluator"):
        evaluator = model.leaf_evaluator(x.coords, kind)
    else:
        def evaluator(params):
            return sysmod.leaf_translate(system, x, kind, params).coords

    pdim = sysmod.leaf_dimension(system, kind)
    evaluator = _orthonormalize_params(evaluator, pdim)
    radius = _default_radius(system)
    if system.kind in ("BorelSmale", "CatSuspension") and kind != "CenterStable":
        # left translation is affine in polarised/flat coordinates: exact
        zero = evaluator(np.zeros(pdim))
        terms = {tuple([0] * pdim): zero}
        for j in range(pdim):
            e = np.zeros(pdim, dtype=int)
            e[j] = 1
            unit = evaluator(np.eye(pdim)[j]) - zero
            terms[tuple(e)] = unit
        poly = PolyMap(pdim, system.dim, terms)
        rem = _validate_remainder(evaluator, poly, radius)
        return LeafChart(x.copy(), kind, max(order, 1), poly, radius, rem, evaluator, 0.0)
    poly = PolyMap.fit(evaluator, pdim, system.dim, max(order, 1), radius)
    rem = _validate_remainder(evaluator, poly, radius)
    return LeafChart(x.copy(), kind, max(order, 1), poly, radius, rem, evaluator, 0.0)


def _validate_remainder(evaluator, poly, radius, n=7):
    if n**poly.param_dim <= 400:
        pts = [
            np.array(p)
            for p in itertools.product(*[np.linspace(-radius, radius, n)] * poly.param_dim)
        ]
    else:
        gen = np.random.Generator(np.random.Philox(20240302))
        pts = radius * (2.0 * gen.random((80, poly.param_dim)) - 1.0)
    worst = 0.0
    for p in pts:
        worst = max(worst, float(np.linalg.norm(evaluator(p) - poly.evaluate(p))))
    return 0.0 if worst < 1e-13 else worst


def _default_radius(system):
    return 0.25 if system.model.quotiented else 0.2


def _perturbed_chart(system, x, kind, order):
    """Product chart: linear fast-pair axes plus one jet curve per sheared pair."""
    model = system.model
    pdim = sysmod.leaf_dimension(system, kind)
    radius = _default_radius(system)
    want_unstable = kind in ("Unstable", "StrongUnstable")
    theta = x.coords[6] - math.floor(x.coords[6])
    idxs = model._kind_indices(kind)

    # map chart index -> (pair, slot) for the sheared pairs
    pair_of = {}
    for pair in model._sheared_pairs:
        for slot, i in enumerate(pair):
            pair_of[i] = (pair, slot)

    curves = {}  # chart index of the graph coordinate -> (coeffs, trans chart index)
    jet_error = 0.0
    if kind != "StrongUnstable":
        for pair in model._sheared_pairs:
            hit = [i for i in idxs if i in pair]
            if not hit:
                continue
            rates = model.rates[list(pair)]
            vals = x.coords[list(pair)]
            coeffs, g_ax, t_ax = _fiber_leaf_series(
                model, vals, theta, rates, want_unstable, order
            )
            hi, _, _ = _fiber_leaf_series(
                model, vals, theta, rates, want_unstable, order + 2
            )
            grid = np.linspace(-radius, radius, 17)
            diff = max(
                abs(
                    np.polyval(np.append(hi[::-1], 0.0), s)
                    - np.polyval(np.append(coeffs[::-1], 0.0), s)
                )
                for s in grid
            )
            jet_error = max(jet_error, 2.0 * float(diff))
            curves[pair[g_ax]] = (coeffs, pair[t_ax])

    def evaluator(params):
        params = np.atleast_1d(np.asarray(params, dtype=float))
        out = x.coords.copy()
        if kind == "CenterStable":
            dtheta = params[-1]
            p_main = params[:-1]
        else:
            dtheta = 0.0
            p_main = params
        for val, i in zip(p_main, idxs):
            if i in curves:
                coeffs, j = curves[i]
                out[i] += val
                out[j] += np.polyval(np.append(coeffs[::-1], 0.0), val)
            else:
                out[i] += val
        if dtheta != 0.0:
            out = model.flow(out, dtheta)
        return out

    evaluator = _orthonormalize_params(evaluator, pdim)
    poly = PolyMap.fit(evaluator, pdim, system.dim, max(order, 1), radius)
    rem = max(_validate_remainder(evaluator, poly, radius), jet_error)
    return LeafChart(
        x.copy(), kind, max(order, 1), poly, radius, rem, evaluator, jet_error
    )


def leaf_chart(system: System, x: Point, kind: str, order: int = 3) -> LeafChart:
    """Local chart of the leaf of `kind` through x."""
    if kind not in sysmod.LEAF_KINDS:
        raise InvalidParams(f"unknown leaf kind {kind!r}")
    if order == 0:
        pdim = sysmod.leaf_dimension(system, kind)
        poly = PolyMap(pdim, system.dim, {tuple([0] * pdim): x.coords.copy()})
        radius = _default_radius(system)
        # crude leaf-diameter bound inside the radius
        try:
            probe = sysmod.leaf_translate(system, x, kind, radius * np.ones(pdim) / math.sqrt(pdim))
            rem = float(np.linalg.norm(probe.coords - x.coords))
        except Exception:
            rem = radius * math.sqrt(pdim)
        return LeafChart(x.copy(), kind, 0, poly, radius, rem, None, rem)
    if system.kind == "BorelSmalePerturbed":
        return _perturbed_chart(system, x, kind, order)
    return _linear_chart(system, x, kind, order)


# ---------------------------------------------------------------------------
# halfway points and the stable projection


def halfway_points(system: System, q: Point, q_prime: Point, ell: float):
    """Flow both points to the middle of the excursion window."""
    return (
        sysmod.flow(system, q, ell / 2.0, reduce=False),
        sysmod.flow(system, q_prime, ell / 2.0, reduce=False),
    )


def stable_projection(system: System, x: Point, target: LeafChart, tol: float = 1e-10,
                      max_iter: int = 50, return_params: bool = False):
    """Point z on the target unstable chart lying on the center-stable leaf of x.

    Damped Newton with step halving on the coupled chart system."""
    if tol < target.evaluator_error:
        raise NoIntersection(
            f"tolerance {tol:g} finer than chart accuracy {target.evaluator_error:g}"
        )
    cs = leaf_chart(system, x, "CenterStable", order=max(target.order, 2))
    p_cs = cs.param_dim
    p_u = target.param_dim
    if p_cs + p_u != system.dim:
        raise NoIntersection("chart parameter counts do not span the ambient space")

    def residual(v):
        return cs.evaluate(v[:p_cs]) - target.evaluate(v[p_cs:])

    v = np.zeros(p_cs + p_u)
    # initial guess: linear solve on the first-order system
    J = np.column_stack([cs.jacobian(np.zeros(p_cs)), -target.jacobian(np.zeros(p_u))])
    try:
        v = np.linalg.solve(J, -(cs.evaluate(np.zeros(p_cs)) - target.evaluate(np.zeros(p_u))))
    except np.linalg.LinAlgError:
        v = np.zeros(p_cs + p_u)
    r = residual(v)
    for _ in range(max_iter):
        nr = float(np.linalg.norm(r))
        if nr < tol:
            break
        J = np.column_stack([cs.jacobian(v[:p_cs]), -target.jacobian(v[p_cs:])])
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise NoIntersection("singular Newton system")
        lam = 1.0
        for _ in range(30):
            cand = v + lam * step
            rc = residual(cand)
            if np.linalg.norm(rc) < nr:
                v, r = cand, rc
                break
            lam *= 0.5
        else:
            raise NoIntersection(f"Newton stalled at residual {nr:g} > tol {tol:g}")
    else:
        if float(np.linalg.norm(r)) >= tol:
            raise NoIntersection(f"no convergence within {max_iter} iterations")
    z = Point(target.evaluate(v[p_cs:]))
    if return_params:
        return z, v[p_cs:], v[:p_cs]
    return z


# ---------------------------------------------------------------------------
# local Hausdorff distance


def _chart_cloud(chart, center, omega, mesh):
    """Chart samples inside the ball, gridded over a window matched to it."""
    p0 = np.zeros(chart.param_dim)
    # recenter the parameter window on the chart point nearest the ball center
    J = chart.jacobian(p0)
    sol, *_ = np.linalg.lstsq(J, center - chart.evaluate_poly(p0), rcond=None)
    p0 = np.clip(sol, -chart.radius, chart.radius)
    half = min(chart.radius, 2.0 * omega)
    axes = [np.linspace(c - half, c + half, mesh) for c in p0]
    pts = np.array(
        [chart.evaluate_poly(np.array(p)) for p in itertools.product(*axes)]
    )
    inside = np.linalg.norm(pts - center, axis=1) <= omega
    return pts[inside]


def local_hausdorff(system: System, p: Point, X: LeafChart, Y: LeafChart,
                    omega: float = 0.1, mesh: int = 64, max_refine: int = 3) -> float:
    """Hausdorff distance between the omega-balls of two charts around p."""
    center = p.coords
    prev = None
    for refine in range(max_refine + 1):
        m = mesh * (2**refine)
        cx = _chart_cloud(X, center, omega, m)
        cy = _chart_cloud(Y, center, omega, m)
        if len(cx) == 0 or len(cy) == 0:
            raise EmptyIntersection("a chart misses the ball")
        tx, ty = cKDTree(cx), cKDTree(cy)
        d_xy = float(np.max(ty.query(cx)[0]))
        d_yx = float(np.max(tx.query(cy)[0]))
        val = max(d_xy, d_yx)
        if prev is not None and abs(val - prev) <= 1e-3 * max(val, 1e-300):
            return val
        prev = val
    return prev


# ---------------------------------------------------------------------------
# dynamical quadrilaterals and the non-integrability exponent

SCALE_WINDOW = (0.5, 2.0)


@dataclass
class Quadrilateral:
    x: Point
    x_prime: Point
    u_x: Point
    proj: Point
    p_uu: np.ndarray
    p_u: np.ndarray
    dist_xx: float
    dist_xux: float
    ratio: float
    in_window: bool
    leaf_params: np.ndarray


def _uu_param_mask(system):
    """Boolean mask over unstable leaf params marking the fast block."""
    model = system.model
    if system.kind in ("BorelSmale", "BorelSmalePerturbed"):
        idxs = model._kind_indices("Unstable")
        top = max(model.weights[i] for i in idxs)
        return np.array([model.weights[i] == top for i in idxs])
    if system.kind in ("ASL2Model", "SL3Model"):
        return np.array([slot in model.uu_slots for slot in model.u_slots])
    # one-dimensional unstable: the whole thing is the fast block
    return np.array([True] * sysmod.leaf_dimension(system, "Unstable"))


def build_quadrilateral(system: System, x: Point, s_disp, u_disp,
                        tol: float = 1e-11) -> Quadrilateral:
    """Four points of the leaf configuration plus the projection split."""
    s_disp = np.atleast_1d(np.asarray(s_disp, dtype=float))
    u_disp = np.atleast_1d(np.asarray(u_disp, dtype=float))
    x_prime = sysmod.stable_translate(system, x, s_disp)
    u_x = sysmod.strong_unstable_translate(system, x, u_disp)
    model = system.model
    if hasattr(model, "cs_u_factorize"):
        params, _ = model.cs_u_factorize(u_x.coords, x_prime.coords)
        proj = sysmod.unstable_translate(system, x_prime, params)
    else:
        target = leaf_chart(system, x_prime, "Unstable", order=3)
        proj, params, _ = stable_projection(system, u_x, target, tol=tol, return_params=True)
    mask = _uu_param_mask(system)
    p_uu = np.where(mask, params, 0.0)
    p_u = np.where(mask, 0.0, params)
    d_xx = sysmod.dist(system, x, x_prime)
    d_xux = sysmod.dist(system, x, u_x)
    ratio = d_xux / d_xx if d_xx > 0 else math.inf
    in_window = SCALE_WINDOW[0] < ratio < SCALE_WINDOW[1]
    return Quadrilateral(
        x=x.copy(),
        x_prime=x_prime,
        u_x=u_x,
        proj=proj,
        p_uu=p_uu,
        p_u=p_u,
        dist_xx=d_xx,
        dist_xux=d_xux,
        ratio=ratio,
        in_window=in_window,
        leaf_params=params,
    )


@dataclass
class QniEstimate:
    alpha_hat: float
    C_hat: float
    r2: float
    scale_range: tuple
    quads: list


@dataclass(frozen=True)
class QniDirections:
    """Unit stable direction, unit fast-unstable direction, fixed fast scale."""

    s_dir: tuple
    u_dir: tuple
    u_scale: float = 0.01


def qni_exponent(system: System, x: Point, directions: QniDirections,
                 scales) -> QniEstimate:
    """Fit log ||p_u|| against log dist(x, x') over a geometric scale grid.

    The fast-unstable displacement is held fixed at directions.u_scale while
    the stable displacement runs over the scales, so a bilinear transverse
    component shows slope one.
    """
    scales = np.asarray(list(scales), dtype=float)
    if len(scales) < 6:
        raise InvalidParams("need at least 6 scales")
    logs = np.log(scales)
    if logs.max() - logs.min() < 2.0 * math.log(10.0) - 1e-9:
        raise DegenerateFit("scale grid spans fewer than 2 decades")
    if np.std(logs) < 1e-12:
        raise DegenerateFit("scales all equal: rank-deficient regression")
    s_dir = np.asarray(directions.s_dir, dtype=float)
    u_dir = np.asarray(directions.u_dir, dtype=float)
    quads = []
    dists = []
    pnorms = []
    for d in scales:
        quad = build_quadrilateral(system, x, d * s_dir, directions.u_scale * u_dir)
        quads.append(quad)
        dists.append(quad.dist_xx)
        pnorms.append(float(np.linalg.norm(quad.p_u)))
    pnorms = np.array(pnorms)
    if np.all(pnorms < 1e-14):
        raise DegenerateFit("transverse component vanishes along these directions")
    ld = np.log(np.array(dists))
    lp = np.log(np.maximum(pnorms, 1e-300))
    A = np.column_stack([ld, np.ones_like(ld)])
    coef, res, *_ = np.linalg.lstsq(A, lp, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((lp - pred) ** 2))
    ss_tot = float(np.sum((lp - lp.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return QniEstimate(
        alpha_hat=float(coef[0]),
        C_hat=float(math.exp(coef[1])),
        r2=r2,
        scale_range=(float(np.min(dists)), float(np.max(dists))),
        quads=quads,
    )
