"""Lyapunov data for the catalog systems.

Exponents via the QR recursion along an orbit, splittings from the
intersection of forward- and backward-propagated flags, truncated adapted
(Pesin-type) norms, regular-set densities, and the scalar growth cocycle on
the second expanding line used by the stopping-time machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import systems as sysmod
from .errors import DegenerateOrbit, IllConditioned, InvalidParams, NonFinite
from .systems import Point, System


@dataclass
class LyapunovReport:
    """QR-recursion estimates; exponents sorted descending."""

    exponents: list
    stderr: list
    T_total: float
    steps: int


@dataclass
class Splitting:
    point: Point
    subspaces: list  # [(exponent, orthonormal basis (dim, k))]
    theta: float  # minimal pairwise principal angle, radians

    def block(self, i):
        return self.subspaces[i][1]

    @property
    def exponents(self):
        return [e for e, _ in self.subspaces]


@dataclass(frozen=True)
class LyapunovNormParams:
    epsilon: float
    T_trunc: float = 20.0
    dtau: float = 0.5


# ---------------------------------------------------------------------------
# spectra


def lyapunov_spectrum(system: System, x0: Point, T: float, dt_qr: float = 1.0,
                      seed: int = 0) -> LyapunovReport:
    """Estimate the Lyapunov spectrum by QR reorthonormalisation.

    The first 10% of the orbit is discarded as burn-in; standard errors come
    from block means over 20 disjoint orbit segments.
    """
    if T < 100.0 * dt_qr:
        raise InvalidParams("T must be at least 100 reorthonormalisation intervals")
    n = system.dim
    steps = int(round(T / dt_qr))
    burn = max(1, steps // 10)
    gen = rngmod.derive(seed, "lyapunov_spectrum")
    Q, _ = np.linalg.qr(np.eye(n) + 0.01 * gen.standard_normal((n, n)))
    x = x0.copy()
    logs = np.zeros((steps - burn, n))
    bound = getattr(system.model, "chart_bound", np.inf)
    for k in range(steps):
        try:
            M = sysmod.tangent_flow(system, x, dt_qr)
            x = sysmod.flow(system, x, dt_qr)
        except NonFinite as exc:
            raise DegenerateOrbit("orbit left the configured chart") from exc
        if not system.model.quotiented and np.max(np.abs(x.coords)) > 0.99 * bound:
            raise DegenerateOrbit("orbit left the configured chart")
        Q, R = np.linalg.qr(M @ Q)
        d = np.abs(np.diag(R))
        sgn = np.sign(np.diag(R))
        Q = Q * sgn
        if k >= burn:
            logs[k - burn] = np.log(d)
    T_eff = (steps - burn) * dt_qr
    sums = logs.sum(axis=0)
    exps = sums / T_eff
    nblocks = min(20, steps - burn)
    block_means = np.array_split(logs, nblocks)
    means = np.array([b.mean(axis=0) / dt_qr for b in block_means])
    stderr = means.std(axis=0, ddof=1) / math.sqrt(nblocks)
    order = np.argsort(exps)[::-1]
    return LyapunovReport(
        exponents=[float(e) for e in exps[order]],
        stderr=[float(s) for s in stderr[order]],
        T_total=float(T),
        steps=steps,
    )


# ---------------------------------------------------------------------------
# splittings


def _subspace_intersection(A, B, k, tol=1e-6):
    """Orthonormal basis of the k-dimensional span(A) & span(B)."""
    n = A.shape[0]
    comp = []
    for M in (A, B):
        q, _ = np.linalg.qr(M)
        comp.append(np.eye(n) - q @ q.T)
    stack = np.vstack(comp)
    _, s, vt = np.linalg.svd(stack)
    if k <= 0 or s[n - k] > tol:
        raise IllConditioned("flag intersection has wrong dimension")
    return vt[n - k :].T


def _propagated_flag(system, x, T, dt, forward):
    """Orthonormal frame at x ordered by growth under the chosen direction.

    The cocycle is accumulated along the stored orbit ending exactly at x, so
    the flag really lives at x."""
    steps = max(1, int(round(T / dt)))
    sgn = 1.0 if forward else -1.0
    reduce = system.model.quotiented
    pts = [x]
    for _ in range(steps):
        pts.append(sysmod.flow(system, pts[-1], -sgn * dt, reduce=reduce))
    # generic initial frame; axis-aligned frames can sit on invariant subspaces
    gen = rngmod.derive(7, "propagated_flag")
    Q, _ = np.linalg.qr(gen.standard_normal((system.dim, system.dim)))
    for k in range(steps, 0, -1):
        M = sysmod.tangent_flow(system, pts[k], sgn * dt)
        Q, R = np.linalg.qr(M @ Q)
        Q = Q * np.sign(np.diag(R))
    return Q


def _min_principal_angle(blocks):
    theta = math.pi / 2.0
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            s = np.linalg.svd(blocks[i].T @ blocks[j], compute_uv=False)
            smax = min(1.0, float(s.max(initial=0.0)))
            theta = min(theta, math.acos(smax))
    return theta


def oseledets_splitting(system: System, x: Point, T_forward: float = 40.0,
                        T_backward: float = 40.0) -> Splitting:
    """Splitting at x from intersecting the two propagated flags.

    Linear models with constant frames short-circuit to their exact blocks.
    """
    model = system.model
    if system.exact_exponents is not None:
        blocks = model.blocks
        subs = [(b.rate, b.basis.copy()) for b in blocks]
        theta = _min_principal_angle([b.basis for b in blocks])
        if theta < 1e-8:
            raise IllConditioned("splitting angle below threshold")
        return Splitting(point=x.copy(), subspaces=subs, theta=theta)

    dt = 1.0
    U = _propagated_flag(system, x, T_backward, dt, forward=True)
    S = _propagated_flag(system, x, T_forward, dt, forward=False)
    # group target exponents from the declared weights (measured systems carry
    # reference rates; ties merge into one block)
    rates = sorted({round(float(r), 12) for r in model.rates}, reverse=True)
    dims = [int(np.sum(np.isclose(model.rates, r))) for r in rates]
    n = system.dim
    subs = []
    c = 0
    for r, k in zip(rates, dims):
        top = U[:, : c + k]
        rest = S[:, : n - c]
        E = _subspace_intersection(top, rest, k)
        subs.append((float(r), E))
        c += k
    theta = _min_principal_angle([b for _, b in subs])
    if theta < 1e-8:
        raise IllConditioned("splitting angle below threshold")
    return Splitting(point=x.copy(), subspaces=subs, theta=theta)


def splitting_angle(system: System, x: Point, **kw) -> float:
    return oseledets_splitting(system, x, **kw).theta


def decompose(splitting: Splitting, v: np.ndarray) -> list:
    """Components of v in the splitting blocks (sums back to v)."""
    basis = np.column_stack([b for _, b in splitting.subspaces])
    coef = np.linalg.solve(basis, v)
    out = []
    c = 0
    for _, B in splitting.subspaces:
        k = B.shape[1]
        out.append(B @ coef[c : c + k])
        c += k
    return out


def default_norm_params(system: System) -> LyapunovNormParams:
    exps = system.exact_exponents
    if exps is None:
        exps = sorted((float(r) for r in system.model.rates), reverse=True)
    gaps = [a - b for a, b in zip(exps, exps[1:]) if a - b > 1e-12]
    eps = min(gaps) / 10.0
    return LyapunovNormParams(epsilon=eps)


def lyapunov_norm(system: System, splitting: Splitting, v: np.ndarray,
                  params: LyapunovNormParams | None = None) -> float:
    """Truncated adapted norm: blockwise exponentially-weighted orbit sums.

    The sums use the cocycle restricted to each block.  With exact blocks a
    single derivative call suffices; measured blocks are re-projected at each
    step, otherwise round-off leakage into the fastest direction would
    dominate the window ends."""
    if params is None:
        params = default_norm_params(system)
    exps = splitting.exponents
    gaps = [a - b for a, b in zip(exps, exps[1:]) if a - b > 1e-12]
    if gaps and not (0.0 < params.epsilon < min(gaps) / 2.0):
        raise InvalidParams("epsilon must sit strictly inside half the minimal gap")
    if params.T_trunc < 1.0:
        raise InvalidParams("T_trunc must be at least 1")
    comps = decompose(splitting, np.asarray(v, dtype=float))
    taus = np.arange(-params.T_trunc, params.T_trunc + 1e-9, params.dtau)
    weights = np.full(taus.shape, params.dtau)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    x = splitting.point
    if system.exact_exponents is not None:
        total = 0.0
        for (lam, _), w in zip(splitting.subspaces, comps):
            if np.linalg.norm(w) == 0.0:
                continue
            acc = 0.0
            for tau, wt in zip(taus, weights):
                D = sysmod.tangent_flow(system, x, float(tau))
                acc += math.exp(
                    -2.0 * lam * tau - 2.0 * params.epsilon * abs(tau)
                ) * float(np.dot(D @ w, D @ w)) * wt
            total += acc
        return math.sqrt(total)
    return _restricted_norm(system, splitting, comps, taus, weights, params)


def _restricted_norm(system, splitting, comps, taus, weights, params):
    """Blockwise sums with per-step re-projection onto the measured blocks."""
    dtau = params.dtau
    n_steps = int(round(params.T_trunc / dtau))
    weight_of = {round(float(t) / dtau): w for t, w in zip(taus, weights)}

    def sweep(direction):
        # returns per-block squared sums over tau = direction * (dtau .. T)
        sums = [0.0] * len(comps)
        vs = [c.copy() for c in comps]
        scale = [1.0] * len(comps)
        y = splitting.point.copy()
        for k in range(1, n_steps + 1):
            D = sysmod.tangent_flow(system, y, direction * dtau)
            y = sysmod.flow(system, y, direction * dtau, reduce=system.model.quotiented)
            sp = oseledets_splitting(system, y)
            tau = direction * k * dtau
            for i, (lam, _) in enumerate(splitting.subspaces):
                if np.linalg.norm(vs[i]) == 0.0:
                    continue
                w = D @ vs[i]
                w = decompose(sp, w)[i]
                vs[i] = w
                val = scale[i] ** 2 * float(np.dot(w, w))
                sums[i] += (
                    math.exp(-2.0 * lam * tau - 2.0 * params.epsilon * abs(tau))
                    * val
                    * weight_of[round(tau / dtau)]
                )
        return sums

    total = 0.0
    fwd = sweep(+1)
    bwd = sweep(-1)
    for i, c in enumerate(comps):
        base = float(np.dot(c, c)) * weight_of[0]
        total += base + fwd[i] + bwd[i]
    return math.sqrt(total)


def regular_set_density(system: System, x: Point, T: float, theta_min: float,
                        ds: float = 1.0) -> float:
    """Fraction of sample times whose splitting angle clears theta_min."""
    if T <= 0:
        raise InvalidParams("T must be positive")
    times = np.arange(0.0, T, ds)
    good = 0
    y = x.copy()
    for _ in times:
        try:
            theta = oseledets_splitting(system, y).theta
        except IllConditioned:
            theta = 0.0
        if theta >= theta_min:
            good += 1
        y = sysmod.flow(system, y, ds)
    return good / len(times)


# ---------------------------------------------------------------------------
# the scalar cocycle on the second expanding line


def second_line(splitting: Splitting) -> np.ndarray:
    """Unit frame of the second expanding block (the rank-one quotient line)."""
    pos = [(e, B) for e, B in splitting.subspaces if e > 1e-12]
    if len(pos) < 2:
        raise IllConditioned("system has no second expanding direction")
    B = pos[1][1]
    return B[:, 0] / np.linalg.norm(B[:, 0])


def cocycle_lambda2(system: System, x: Point, t: float) -> float:
    """log growth over [0, t] of the second-line frame under the cocycle."""
    sp = oseledets_splitting(system, x)
    e2 = second_line(sp)
    D = sysmod.tangent_flow(system, x, float(t))
    return float(np.log(np.linalg.norm(D @ e2)))


def cocycle_vf(system: System, x: Point, s_disp: np.ndarray, t: float) -> float:
    """log contraction over [0, t] of a stable displacement vector."""
    v = np.asarray(s_disp, dtype=float)
    D = sysmod.tangent_flow(system, x, float(t))
    return float(np.log(np.linalg.norm(D @ v) / np.linalg.norm(v)))


def transport(system: System, x: Point, t: float, dt: float = 1.0):
    """Cocycle over [0, t] composed stepwise along the reduced orbit.

    On quotient models this keeps the tangent bookkeeping consistent with
    lattice reduction (single-call tangent_flow lives on the cover).
    Returns (matrix, endpoint).
    """
    reduce = system.model.quotiented
    steps = max(1, int(round(abs(t) / dt)))
    h = t / steps
    D = np.eye(system.dim)
    y = x.copy()
    for _ in range(steps):
        D = sysmod.tangent_flow(system, y, h) @ D
        y = sysmod.flow(system, y, h, reduce=reduce)
    return D, y
