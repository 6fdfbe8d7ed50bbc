"""Empirical leafwise measures, Wasserstein distance, equidistribution
and correlation diagnostics on the quotiented models.

Test functions live on the suspension quotient through the section chart
(the fiber coordinate pulled back to the roof-zero section), so they are
genuinely deck-invariant.  Equidistribution tests carry a roof bump that
makes them continuous across the gluing; the leafwise tests used for the
correlation law drop the bump so each one is a single frequency along the
fast leaf, which is what makes exact pair integrals possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import systems as sysmod
from .errors import EmptyBox, InvalidParams, Unsupported
from .systems import Point, System


# ---------------------------------------------------------------------------
# empirical measures and the 1-d Wasserstein distance


@dataclass
class EmpiricalMeasure:
    """Weighted samples on a leaf parameter; positions sorted ascending."""

    samples: list  # [(position, weight)]
    total: float

    @staticmethod
    def from_arrays(positions, weights):
        positions = np.asarray(positions, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if np.any(weights < 0):
            raise InvalidParams("weights must be nonnegative")
        total = float(weights.sum())
        if total <= 0:
            raise InvalidParams("total weight must be positive")
        order = np.argsort(positions)
        return EmpiricalMeasure(
            samples=[(float(p), float(w)) for p, w in zip(positions[order], weights[order])],
            total=total,
        )

    @property
    def positions(self):
        return np.array([p for p, _ in self.samples])

    @property
    def weights(self):
        return np.array([w for _, w in self.samples])

    @property
    def support(self):
        ps = self.positions
        return float(ps.min()), float(ps.max())


def wasserstein_1d(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure) -> float:
    """L1 distance between normalised cumulative functions (exact in 1-d)."""
    p1, w1 = mu1.positions, mu1.weights / mu1.total
    p2, w2 = mu2.positions, mu2.weights / mu2.total
    grid = np.concatenate([p1, p2])
    order = np.argsort(grid, kind="mergesort")
    grid = grid[order]
    deltas = np.diff(grid)
    cdf1 = np.cumsum(np.concatenate([w1, np.zeros_like(w2)])[order])
    cdf2 = np.cumsum(np.concatenate([np.zeros_like(w1), w2])[order])
    return float(np.sum(np.abs(cdf1[:-1] - cdf2[:-1]) * deltas))


def _orbit_sample_coords(system, x, times, dt):
    """Reduced orbit samples; vectorised for the toral suspension."""
    model = system.model
    if system.kind == "CatSuspension":
        red = model.reduce(x.coords)
        theta0 = red[2]
        u = model.power(-theta0) @ red[:2]
        n_units = int(math.floor(theta0 + times[-1])) + 1
        A = model.A
        U = np.empty((n_units + 1, 2))
        U[0] = u - np.floor(u)
        for n in range(n_units):
            u = A @ u
            u -= np.floor(u)
            U[n + 1] = u
        tt = theta0 + times
        n_k = np.floor(tt).astype(int)
        th_k = tt - n_k
        W = model._Vinv @ U[n_k].T  # eigen components of the section points
        W = W * model._evals[:2, None] ** th_k[None, :]
        V = (model._V @ W).T
        out = np.empty((len(times), 3))
        out[:, :2] = V
        out[:, 2] = th_k
        return out
    pts = np.empty((len(times), system.dim))
    y = x.copy()
    prev = 0.0
    for i, t in enumerate(times):
        y = sysmod.flow(system, y, t - prev)
        prev = t
        pts[i] = y.coords
    return pts


def _cat_folded_displacements(model, base, x, times):
    """Chart displacements from base of the deck representative nearest it.

    Working in section coordinates keeps the conditioning cell seam-free."""
    red = model.reduce(x.coords)
    theta0 = red[2]
    u = model.power(-theta0) @ red[:2]
    n_units = int(math.floor(theta0 + times[-1])) + 1
    A = model.A
    U = np.empty((n_units + 1, 2))
    U[0] = u - np.floor(u)
    for n in range(n_units):
        u = A @ u
        u -= np.floor(u)
        U[n + 1] = u
    tt = theta0 + times
    n_k = np.floor(tt).astype(int)
    th_k = tt - n_k

    theta_b = base[2]
    w_b = model.power(-theta_b) @ base[:2]
    dw = U[n_k] - w_b
    dw -= np.round(dw)
    dth = th_k - theta_b
    dth -= np.round(dth)
    theta_near = theta_b + dth
    # v-coordinates of the folded representative at its own height
    W = model._Vinv @ (w_b[:, None] + dw.T)
    W = W * model._evals[:2, None] ** theta_near[None, :]
    v_near = (model._V @ W).T
    rel = np.empty((len(times), 3))
    rel[:, :2] = v_near - base[:2]
    rel[:, 2] = dth
    return rel


def empirical_leaf_measure(system: System, x: Point, n_samples: int, window,
                           seed: int = 0, T_orbit: float | None = None,
                           dt: float = 0.4, box_level: int = 1,
                           bins: int = 6) -> EmpiricalMeasure:
    """Uniform positions on the leaf window, weights from box conditioning.

    A long orbit is histogrammed inside a cell that is a product of the leaf
    window with a dyadic transverse box (equal slab volumes along the
    parameter); the visit profile reweights the uniform draw."""
    if not system.model.quotiented:
        raise Unsupported("leaf measures need a quotiented model")
    lo, hi = (float(window[0]), float(window[1]))
    if hi < lo:
        raise InvalidParams("window must be ordered")
    gen = rngmod.derive(seed, "leaf_measure")
    if hi == lo:
        return EmpiricalMeasure(samples=[(lo, 1.0)], total=1.0)
    positions = np.sort(gen.uniform(lo, hi, size=n_samples))

    if T_orbit is None:
        T_orbit = 1.0e6 if system.kind == "CatSuspension" else 1.0e5
    e_leaf = system.model.leaf_dirs("StrongUnstable")[:, 0]
    base = sysmod.lattice_reduce(system, x).coords
    side = 2.0 ** (-box_level)

    times = np.arange(dt, T_orbit, dt)
    if system.kind == "CatSuspension":
        rel = _cat_folded_displacements(system.model, base, x, times)
    else:
        pts = _orbit_sample_coords(system, x, times, dt)
        rel = pts - base
    params = rel @ e_leaf
    trans = rel - np.outer(params, e_leaf)
    inside = (params >= lo) & (params < hi) & (np.max(np.abs(trans), axis=1) <= 0.5 * side)
    frac = (params[inside] - lo) / (hi - lo)
    idx = np.minimum((frac * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(float)
    if counts.sum() == 0:
        raise EmptyBox("orbit never visited the conditioning box")
    density = counts / counts.mean()
    idx = np.minimum(((positions - lo) / (hi - lo) * bins).astype(int), bins - 1)
    weights = density[idx]
    return EmpiricalMeasure.from_arrays(positions, weights)


# ---------------------------------------------------------------------------
# invariant test functions


@dataclass(frozen=True)
class TestFunction:
    name: str
    lip: float
    reference: float  # closed-form invariant (Haar) integral
    freq: tuple | None  # pair-frequency data for exact leaf integrals
    bump: bool

    def __call__(self, system, point: Point) -> float:
        return _evaluate_test(self, system, point)


def _section_coords(system, point):
    """Fiber coordinates pulled back to the roof-zero section, plus theta."""
    model = system.model
    c = model.reduce(point.coords)
    theta = c[model.theta_index]
    if system.kind == "CatSuspension":
        v0 = model.power(-theta) @ c[:2]
        return np.asarray(v0), theta
    # pair models: ring-lattice coordinates of the three pairs at section level
    w = c[:6] * np.exp(model.rates[:6] * -theta)
    n = np.empty(6)
    for k, (i, j) in enumerate(((0, 1), (2, 3), (4, 5))):
        n[2 * k : 2 * k + 2] = sysmod.RING_BASIS_INV @ w[[i, j]]
    return n, theta


def _bump(theta):
    return 0.5 * (1.0 - math.cos(2.0 * math.pi * theta))


def _evaluate_test(tf, system, point):
    if tf.name == "const":
        return 1.0
    coords, theta = _section_coords(system, point)
    kind, k, phase = tf.freq
    val = math.sin(2.0 * math.pi * (float(np.dot(k, coords))) + phase)
    if tf.bump:
        val *= _bump(theta)
    return val / tf.lip if tf.lip != 1.0 else val


def equidistribution_tests(system: System):
    """Five bump-weighted trigonometric tests plus the constant."""
    if system.kind == "CatSuspension":
        ks = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1)]
    elif system.kind in ("BorelSmale", "BorelSmalePerturbed"):
        ks = [
            (1, 0, 0, 0, 0, 0),
            (0, 1, 0, 0, 0, 0),
            (0, 0, 1, 0, 0, 0),
            (1, 0, 1, 0, 0, 0),
            (0, 1, 0, 1, 0, 0),
        ]
    else:
        raise Unsupported("equidistribution tests need a quotiented model")
    tests = [TestFunction("const", 1.0, 1.0, None, False)]
    for i, k in enumerate(ks):
        tests.append(
            TestFunction(f"sin{i}_{'_'.join(str(a) for a in k)}", 1.0, 0.0,
                         ("sin", tuple(k), 0.0), True)
        )
    return tests


def leafwise_test(system: System, normalised: bool = True) -> TestFunction:
    """Single-frequency test for the correlation law; Lipschitz-normalised."""
    if system.kind == "CatSuspension":
        k = (1, 0)
    elif system.kind in ("BorelSmale", "BorelSmalePerturbed"):
        k = (1, 0, 0, 0, 0, 0)
    else:
        raise Unsupported("leafwise tests need a quotiented model")
    lip = 2.0 * math.pi if normalised else 1.0
    return TestFunction("leafwise_sin", lip, 0.0, ("sin", k, 0.0), False)


# ---------------------------------------------------------------------------
# Birkhoff equidistribution


@dataclass
class EquidistributionReport:
    test_values: list  # [(name, birkhoff average, reference integral)]
    discrepancy_curve: list  # [(T', sup discrepancy)]
    T_final: float


def _section_samples_vectorized(system, x, times):
    """(section coordinates, roof coordinates) at the sample times (toral path)."""
    model = system.model
    red = model.reduce(x.coords)
    theta0 = red[2]
    u = model.power(-theta0) @ red[:2]
    n_units = int(math.floor(theta0 + times[-1])) + 1
    A = model.A
    U = np.empty((n_units + 1, 2))
    U[0] = u - np.floor(u)
    for n in range(n_units):
        u = A @ u
        u -= np.floor(u)
        U[n + 1] = u
    tt = theta0 + times
    n_k = np.floor(tt).astype(int)
    return U[n_k], tt - n_k


def _eval_tests_batch(tests, sections, thetas):
    cols = []
    bump = 0.5 * (1.0 - np.cos(2.0 * math.pi * thetas))
    for tf in tests:
        if tf.name == "const":
            cols.append(np.ones(len(thetas)))
            continue
        _, k, phase = tf.freq
        vals = np.sin(2.0 * math.pi * (sections @ np.asarray(k, dtype=float)) + phase)
        if tf.bump:
            vals = vals * bump
        cols.append(vals / tf.lip if tf.lip != 1.0 else vals)
    return np.column_stack(cols)


def birkhoff_equidistribution(system: System, x: Point, tests, T: float,
                              dt: float = 0.5, reference: str = "haar") -> EquidistributionReport:
    """Time averages along the orbit of x against the invariant integrals."""
    if not system.model.quotiented:
        raise Unsupported("equidistribution diagnostics need a quotiented model")
    if reference != "haar":
        raise InvalidParams(f"unknown reference measure {reference!r}")
    steps = int(round(T / dt))
    times = np.arange(1, steps + 1) * dt
    refs = np.array([tf.reference for tf in tests])
    if system.kind == "CatSuspension":
        sections, thetas = _section_samples_vectorized(system, x, times)
        vals = _eval_tests_batch(tests, sections, thetas)
        cums = np.cumsum(vals, axis=0)
        curve = []
        for k in range(1, 11):
            n = int(round(steps * k / 10.0))
            avg = cums[n - 1] / n
            curve.append((n * dt, float(np.max(np.abs(avg - refs)))))
        avgs = cums[-1] / steps
    else:
        sums = np.zeros(len(tests))
        y = sysmod.lattice_reduce(system, x)
        checkpoints = {int(round(steps * k / 10.0)) for k in range(1, 11)}
        curve = []
        for n in range(1, steps + 1):
            y = sysmod.flow(system, y, dt)
            for j, tf in enumerate(tests):
                sums[j] += tf(system, y)
            if n in checkpoints:
                avg = sums / n
                curve.append((n * dt, float(np.max(np.abs(avg - refs)))))
        avgs = sums / steps
    return EquidistributionReport(
        test_values=[(tf.name, float(a), tf.reference) for tf, a in zip(tests, avgs)],
        discrepancy_curve=curve,
        T_final=float(T),
    )


# ---------------------------------------------------------------------------
# fast-leaf correlation law


def _leaf_frequency_data(system, tf, x, t):
    """Phase K and frequency w of  u -> phi(g_t h_u x)  along the fast leaf.

    phi(g_t h_u x) = sin(2 pi (K + w u)) for the single-frequency leafwise
    tests; exact on the toral suspension (phases iterated with reduction so
    they stay bounded)."""
    if system.kind != "CatSuspension":
        raise Unsupported("exact leaf frequencies implemented for CatSuspension")
    model = system.model
    red = sysmod.lattice_reduce(system, x)
    theta = red.coords[model.theta_index]
    n = math.floor(theta + t)
    _, k, phase = tf.freq
    k = np.asarray(k, dtype=float)
    v = model.power(-theta) @ red.coords[:2]
    A = model.A.astype(float)
    for _ in range(n):
        v = A @ v
        v -= np.floor(v)  # phases only matter mod 1
    e_sec = model.power(-theta) @ model._V[:, 0]
    w = float(k @ (np.linalg.matrix_power(A, n) @ e_sec))
    K = float(k @ v) + phase / (2.0 * math.pi)
    return K, w


def _pair_integral(a, al, b, be):
    """Exact integral of cos(a u + al) cos(b u + be) over [0, 1]."""

    def I(k, m):
        if abs(k) < 1e-12:
            return math.cos(m)
        return (math.sin(k + m) - math.sin(m)) / k

    return 0.5 * (I(a - b, al - be) + I(a + b, al + be))


def _f_amp_phase(system, tf, x, t):
    """f_t(u) = A cos(2 pi w u + psi) for a single-frequency test."""
    model = system.model
    K, w = _leaf_frequency_data(system, tf, x, t)
    lam1 = model.rate_top
    alpha = math.exp(-lam1 * t)
    delta = w * alpha
    A = -2.0 * math.sin(math.pi * delta) / tf.lip
    psi = 2.0 * math.pi * K + math.pi * delta
    return A, 2.0 * math.pi * w, psi


def correlation_decay(system: System, x: Point, phi: TestFunction, t: float,
                      s: float, n_u: int = 4096, seed: int = 0,
                      method: str = "auto"):
    """Estimate of the pair integral of f_t f_s over the unit fast-leaf window.

    f_t(u) compares the test along the leaf against its self-similar
    translate by exp(-lambda_1 t).  Monte Carlo by default; `exact` uses the
    closed-form single-frequency integral on CatSuspension.

    Returns (estimate, standard error)."""
    if not system.model.quotiented:
        raise Unsupported("correlation diagnostics need a quotiented model")
    if method == "auto":
        method = "exact" if (system.kind == "CatSuspension" and phi.freq is not None
                             and not phi.bump) else "mc"
    if method == "exact":
        At, wt, pt = _f_amp_phase(system, phi, x, t)
        As, ws, ps = _f_amp_phase(system, phi, x, s)
        val = At * As * _pair_integral(wt, pt, ws, ps)
        return float(val), 0.0
    gen = rngmod.derive(seed, "correlation", int(round(1000 * t)), int(round(1000 * s)))
    us = gen.uniform(0.0, 1.0, size=n_u)
    vals = np.empty(n_u)
    for i, u in enumerate(us):
        f_t, f_s = _f_eval_times(system, phi, x, sorted((t, s)), u)
        vals[i] = f_t * f_s
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_u))


def _f_eval_times(system, phi, x, times, u):
    """f_t(u) at the requested (sorted) times.

    The translate comparison collapses to a unit fast-leaf shift of the same
    orbit point, so a single reduced orbit per u suffices."""
    y = sysmod.lattice_reduce(system, sysmod.unstable_shift(system, x, u))
    out = []
    t_cur = 0.0
    for t in times:
        if t > t_cur:
            y = sysmod.flow(system, y, t - t_cur)
            t_cur = t
        out.append(phi(system, y) - phi(system, sysmod.unstable_shift(system, y, 1.0)))
    return out


def lln_average(system: System, x: Point, phi: TestFunction, T: float,
                n_u: int = 64, dt: float = 0.5, seed: int = 0) -> float:
    """95th percentile over the leaf parameter of |time average of f_t|."""
    if not system.model.quotiented:
        raise Unsupported("correlation diagnostics need a quotiented model")
    gen = rngmod.derive(seed, "lln")
    us = gen.uniform(0.0, 1.0, size=n_u)
    steps = int(round(T / dt))
    averages = np.empty(n_u)
    for i, u in enumerate(us):
        y = sysmod.lattice_reduce(system, sysmod.unstable_shift(system, x, u))
        acc = 0.0
        for _ in range(steps):
            acc += phi(system, y) - phi(system, sysmod.unstable_shift(system, y, 1.0))
            y = sysmod.flow(system, y, dt)
        averages[i] = abs(acc / steps)
    return float(np.quantile(averages, 0.95))
