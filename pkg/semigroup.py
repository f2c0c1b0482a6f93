"""
Semigroups of Convex Potentials

Numerical realizations of
    P_t u(x, y)   = E u(x + t^{1/2} S, y)                  (Gaussian smoothing)
    Q_t u(x, y)   = inf_z [u(z, y) + ‖z − x‖₂² / 2t]         (inf-convolution)
    R_{t,ℓ} u     = (P_h Q_h)^{t/h} u,  h = 2^{-ℓ}           (Trotter product)
and of the evolved potential V_t = R_t V, whose x-gradient at (x̃, y) is the
conditional expectation E[D_xV(X, Y) | X + t^{1/2}S = x̃, Y = y].

The renormalized potential Ṽ_s(x, y) = V_{e^s − 1}(e^{s/2}x, y) interpolates
between V (s = 0) and ½‖x‖₂² (s = ∞) in the x-variables.

All potential values follow the convention V(0) = 0 of the potential module.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import PotentialError, SemigroupError
from matrices import inner, norm2, sample_gue
from potential import Block, MarginalPotential, PotentialSpec
from sampler import SamplerConfig, batch_means, sample_target, seed_sequence

logger = logging.getLogger('FreeGibbs.semigroup')

QT_TOLERANCE = 1e-10
QT_MAX_ITERATIONS = 10_000


def evolved_window(c: float, C: float, t: float) -> Tuple[float, float]:
    """Convexity window (c/(1+ct), C/(1+Ct)) of x ↦ V_t(x, y)."""
    return c / (1.0 + c * t), C / (1.0 + C * t)


def continuity_bound(C: float, m: int, dt: float, grad_norm: float) -> float:
    """‖D_x(R_t u) − D_x(R_s u)‖₂ bound for C(t − s) ≤ 1."""
    return 5.0 * C * math.sqrt(2.0 * m * dt) + C * dt * grad_norm


def cross_term_coefficient(c: float, C: float, t: float) -> float:
    """(C − c) / ((1+Ct)(1+ct))^{1/2}, the y-coupling coefficient of D_xV_t."""
    return (C - c) / math.sqrt((1.0 + C * t) * (1.0 + c * t))


# ------------------------------------------------------------------
# Inf-convolution
# ------------------------------------------------------------------

@dataclass
class QtResult:
    """Q_t u at x: value (or None), minimizer z*, gradient Du(z*, y), iterations."""
    value: Optional[np.ndarray]
    minimizer: np.ndarray
    grad: np.ndarray
    iterations: int
    residual: float


def inf_convolve(u: PotentialSpec, t: float, x: np.ndarray, y: Optional[np.ndarray] = None,
                 tol: float = QT_TOLERANCE, max_iter: int = QT_MAX_ITERATIONS) -> QtResult:
    """
    Hopf-Lax inf-convolution in the x-variables.

    Iterates z ← (1−θ)z + θ(x − t D_xu(z, y)) with θ = 1 when tC < 1 and
    θ = min(0.5, 2/(2 + t(c+C))) otherwise. The returned gradient is the full
    Du(z*, y), which equals D(Q_t u)(x, y).
    """
    if t < 0:
        raise SemigroupError(f"Invalid time: {t} (must be >= 0)")
    x = np.asarray(x, dtype=np.complex128)
    if t == 0:
        full = u.combine(x, y)
        return QtResult(_value_or_none(u, full), x.copy(), u.grad(full), 0, 0.0)

    theta = 1.0 if t * u.C < 1.0 else min(0.5, 2.0 / (2.0 + t * (u.c + u.C)))
    z = x.copy()
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        target = x - t * u.grad(u.combine(z, y), Block.X)
        step = target - z
        residual = float(np.max(norm2(step)))
        z = z + theta * step
        if residual < tol:
            break
    else:
        logger.error("Inf-convolution did not converge: residual %.3e after %d iterations", residual, max_iter)
        raise SemigroupError(f"Inf-convolution did not converge: residual {residual:.3e} after {max_iter} iterations")
    logger.debug("Q_%g converged in %d iterations (theta %.3f)", t, iteration, theta)
    full = u.combine(z, y)
    value = _value_or_none(u, full)
    if value is not None:
        value = value + inner(z - x, z - x) / (2.0 * t)
    return QtResult(value, z, u.grad(full), iteration, residual)


def _value_or_none(u: PotentialSpec, full: np.ndarray) -> Optional[np.ndarray]:
    try:
        return u.value(full)
    except PotentialError:
        return None


# ------------------------------------------------------------------
# Trotter product
# ------------------------------------------------------------------

@dataclass
class TrotterConfig:
    """
    Monte Carlo settings for R_{t,ℓ}.

    Each P-step averages over a bank of bank_size GUE tuples arranged in
    antithetic pairs ±S; the same bank is used at every point of a level.
    R_{t,ℓ} is evaluated once per independent bank set (banks of them) and
    the spread between the runs gives its standard error, which must stay
    within se_budget.
    """
    bank_size: int = 2
    banks: int = 2
    se_budget: float = 0.05
    tol: float = 1e-9
    max_iter: int = 200
    seed: int = 0
    max_points: int = 2_000_000

    def __post_init__(self):
        if self.bank_size < 2 or self.bank_size % 2:
            raise SemigroupError(f"Invalid bank size: {self.bank_size} (must be even and >= 2)")
        if self.banks < 2:
            raise SemigroupError(f"Invalid bank count: {self.banks} (must be >= 2)")
        if self.se_budget <= 0:
            raise SemigroupError(f"Invalid SE budget: {self.se_budget} (must be > 0)")


@dataclass
class TrotterResult:
    value: Optional[float]
    grad: np.ndarray
    value_bound: float
    grad_bound: float
    steps: int
    evaluations: int = 0
    grad_se: float = 0.0
    value_se: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {'value': self.value, 'grad': self.grad, 'bound': self.value_bound,
                'grad_bound': self.grad_bound, 'steps': self.steps, 'evaluations': self.evaluations,
                'grad_se': self.grad_se, 'value_se': self.value_se}


def trotter_bounds(u: PotentialSpec, t: float, ell: int, grad_norm: float) -> Tuple[float, float]:
    """A priori errors of R_{t,ℓ} for value and x-gradient."""
    C, m = u.C, u.m
    h = 2.0 ** (-ell)
    value = (1.5 * C * C * m * t / (1.0 + C * t)
             + math.log1p(C * t) * (m + C * m + grad_norm ** 2)) * h
    grad = (t / 2.0 + C * (t / 2.0) ** 2) * C * C * math.sqrt(m) * (2.0 * h ** 0.5 + h ** 1.5 * C)
    return value, grad


class _TrotterEvaluator:

    def __init__(self, u: PotentialSpec, h: float, steps: int, y: Optional[np.ndarray],
                 N: int, cfg: TrotterConfig, seed: Any):
        self.u = u
        self.h = h
        self.y = y
        self.cfg = cfg
        self.evaluations = 0
        rng = np.random.default_rng(seed_sequence(seed))
        self.banks = []
        for _ in range(steps):
            half = sample_gue(rng, u.m, N, size=(cfg.bank_size // 2,))
            self.banks.append(np.concatenate([half, -half]))

    def base(self, pts: np.ndarray, want_value: bool):
        self.evaluations += pts.shape[0]
        if self.evaluations > self.cfg.max_points:
            raise SemigroupError(f"Trotter evaluation budget exceeded ({self.cfg.max_points} points)")
        full = self.u.combine(pts, self.y)
        value = self.u.value(full) if want_value else None
        return self.u.grad(full, Block.X), value

    def level(self, level: int, pts: np.ndarray, want_value: bool):
        """Gradient (and value) of (P_h Q_h)^level u at a batch of points."""
        if level == 0:
            return self.base(pts, want_value)
        bank = self.banks[level - 1]
        B, M = pts.shape[0], bank.shape[0]
        shifted = (pts[:, None] + math.sqrt(self.h) * bank[None]).reshape((B * M,) + pts.shape[1:])
        z, g = self.solve(level - 1, shifted)
        grad = g.reshape((B, M) + pts.shape[1:]).mean(axis=1)
        if not want_value:
            return grad, None
        _, vz = self.level(level - 1, z, True)
        q = vz + inner(z - shifted, z - shifted) / (2.0 * self.h)
        return grad, q.reshape(B, M).mean(axis=1)

    def solve(self, level: int, x: np.ndarray):
        """Solve z + h D w_level(z) = x by Barzilai-Borwein steps."""
        h, C = self.h, self.u.C
        lo, hi = 1.0 / (1.0 + h * C), 1.0
        z = x.copy()
        g, _ = self.level(level, z, False)
        r = z + h * g - x
        theta = np.full(x.shape[0], lo)
        for _ in range(self.cfg.max_iter):
            if float(np.max(norm2(r))) < self.cfg.tol:
                return z, g
            z_prev, r_prev = z, r
            z = z - theta[:, None, None, None] * r
            g, _ = self.level(level, z, False)
            r = z + h * g - x
            dz, dr = z - z_prev, r - r_prev
            denom = inner(dr, dr)
            with np.errstate(divide='ignore', invalid='ignore'):
                bb = np.where(denom > 0, inner(dz, dr) / denom, lo)
            theta = np.clip(bb, lo, hi)
        residual = float(np.max(norm2(r)))
        logger.error("Trotter inner solve did not converge: residual %.3e", residual)
        raise SemigroupError(f"Trotter inner solve did not converge: residual {residual:.3e}")


def trotter_R(u: PotentialSpec, t: float, ell: int, x: np.ndarray, y: Optional[np.ndarray] = None,
              cfg: Optional[TrotterConfig] = None) -> TrotterResult:
    """
    Evaluate R_{t,ℓ}u = (P_h Q_h)^{2^ℓ t} u at a single point.

    Requires 2^{-ℓ-1}C ≤ 1 and t ∈ 2^{-ℓ}N₀. The value is None when u has
    no values (e.g. a MarginalPotential).

    Raises:
        SemigroupError: bad time or level, an inner solve that does not
            converge, or a gradient SE above cfg.se_budget
    """
    cfg = cfg or TrotterConfig()
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 3 or x.shape[0] != u.m:
        raise SemigroupError(f"Invalid point shape: {x.shape} (must be ({u.m}, N, N))")
    steps_f = t * 2.0 ** ell
    steps = int(round(steps_f))
    if t < 0 or abs(steps_f - steps) > 1e-9:
        raise SemigroupError(f"Invalid Trotter time: {t} (must be a nonnegative multiple of 2^-{ell})")
    if 2.0 ** (-ell - 1) * u.C > 1.0:
        raise SemigroupError(f"Invalid refinement level: {ell} (need 2^(-ell-1) C <= 1 for C = {u.C:g})")

    h = 2.0 ** (-ell)
    N = x.shape[-1]
    want_value = _value_or_none(u, u.combine(x, y)) is not None
    grads, values, evaluations = [], [], 0
    for b in range(cfg.banks):
        evaluator = _TrotterEvaluator(u, h, steps, y, N, cfg, (cfg.seed, b))
        grad, value = evaluator.level(steps, x[None], want_value)
        grads.append(grad[0])
        if want_value:
            values.append(float(value[0]))
        evaluations += evaluator.evaluations
    grads = np.stack(grads)
    mean_grad = grads.mean(axis=0)
    grad_se = math.sqrt(float(np.sum(norm2(grads - mean_grad) ** 2)) / (cfg.banks * (cfg.banks - 1)))
    value_se = float(np.std(values, ddof=1)) / math.sqrt(cfg.banks) if want_value else None
    if grad_se > cfg.se_budget:
        logger.error("Trotter gradient SE %.3e above budget %.3e", grad_se, cfg.se_budget)
        raise SemigroupError(f"Inner MC variance above budget: gradient SE {grad_se:.3e} "
                             f"(must be <= {cfg.se_budget:g}; enlarge bank_size)")
    grad_norm = float(norm2(u.grad(u.combine(x, y), Block.X)))
    value_bound, grad_bound = trotter_bounds(u, t, ell, grad_norm)
    logger.debug("R_{%g,%d}: %d steps, %d evaluations, gradient SE %.3e", t, ell, steps, evaluations, grad_se)
    return TrotterResult(value=float(np.mean(values)) if want_value else None, grad=mean_grad,
                         value_bound=value_bound, grad_bound=grad_bound, steps=steps,
                         evaluations=evaluations, grad_se=grad_se, value_se=value_se)


# ------------------------------------------------------------------
# Evolved potentials
# ------------------------------------------------------------------

@dataclass
class EvolvedPotential:
    """
    V_t (raw time) or Ṽ_t (renormalized time) for a base potential.

    exact=None uses the Gaussian closed form when the base is Gaussian and
    conditioned sampling otherwise; exact=False forces sampling.
    """
    base: PotentialSpec
    renormalized: bool = False
    sampler_cfg: SamplerConfig = field(default_factory=SamplerConfig.inner)
    exact: Optional[bool] = None

    def __post_init__(self):
        if self.exact and self.base.as_quadratic() is None:
            raise SemigroupError(f"{self.base.label} has no closed-form evolved gradient")

    @property
    def m(self) -> int:
        return self.base.m

    def uses_closed_form(self) -> bool:
        return self.exact is not False and self.base.as_quadratic() is not None

    def grad(self, t: float, x: np.ndarray, y: Optional[np.ndarray] = None,
             seed: Any = 0) -> Tuple[np.ndarray, float]:
        return evolved_grad(self, t, x, y, seed)

    def window(self, t: float) -> Tuple[float, float]:
        if self.renormalized:
            if math.isinf(t):
                return 1.0, 1.0
            c, C = evolved_window(self.base.c, self.base.C, math.expm1(t))
            return math.exp(t) * c, math.exp(t) * C
        return evolved_window(self.base.c, self.base.C, t)


def evolved_grad(ep: EvolvedPotential, t: float, x: np.ndarray, y: Optional[np.ndarray] = None,
                 seed: Any = 0) -> Tuple[np.ndarray, float]:
    """
    Estimate D_xV_t(x, y) (raw) or D_xṼ_t(x, y) (renormalized).

    Returns (estimate, standard error in ‖·‖₂, the largest over a batch).
    """
    means, se = _evolved(ep, t, x, y, seed, per_chain=False)
    return means, se


def evolved_grad_halves(ep: EvolvedPotential, t: float, x: np.ndarray, y: Optional[np.ndarray] = None,
                        seed: Any = 0) -> np.ndarray:
    """
    Independent per-chain estimates, shape (chains, ..., m, N, N).

    ⟨ĝ₁, ĝ₂⟩₂ of two halves is an unbiased estimate of ‖D_xV_t‖₂². Closed-form
    paths return identical halves.
    """
    halves, _ = _evolved(ep, t, x, y, seed, per_chain=True)
    return halves


def _evolved(ep: EvolvedPotential, t: float, x: np.ndarray, y: Optional[np.ndarray],
             seed: Any, per_chain: bool):
    x = np.asarray(x, dtype=np.complex128)
    if y is not None:
        y = np.asarray(y, dtype=np.complex128)
    if x.ndim < 3 or x.shape[-3] != ep.base.m:
        raise SemigroupError(f"Invalid x shape: {x.shape} (must be (..., {ep.base.m}, N, N))")
    if ep.renormalized:
        if math.isinf(t):
            out = x.copy()
            return (np.stack([out, out]) if per_chain else out), 0.0
        scale = math.exp(t / 2.0)
        g, se = _evolved_raw(ep, math.expm1(t), scale * x, y, seed, per_chain)
        return scale * g, scale * se
    return _evolved_raw(ep, t, x, y, seed, per_chain)


def _evolved_raw(ep: EvolvedPotential, t: float, x: np.ndarray, y: Optional[np.ndarray],
                 seed: Any, per_chain: bool):
    if t < 0 or math.isnan(t):
        raise SemigroupError(f"Invalid time: {t} (must be >= 0)")
    base = ep.base
    chains = ep.sampler_cfg.n_chains
    if t == 0 or ep.uses_closed_form():
        if t == 0:
            g = base.grad(base.combine(x, y), Block.X)
        else:
            g = base.as_quadratic().evolved_x_grad(t, x, y)
        return (np.broadcast_to(g, (chains,) + g.shape).copy() if per_chain else g), 0.0

    batch = x.shape[:-3]
    flat_x = x.reshape((-1,) + x.shape[-3:])
    flat_y = None
    if y is not None:
        flat_y = np.broadcast_to(y, batch + y.shape[-3:]).reshape((-1,) + y.shape[-3:])
    children = seed_sequence(seed).spawn(flat_x.shape[0])
    results = [_tethered_estimate(base, t, flat_x[i], None if flat_y is None else flat_y[i],
                                  ep.sampler_cfg, children[i], per_chain)
               for i in range(flat_x.shape[0])]
    se = max(r[1] for r in results)
    if per_chain:
        est = np.stack([r[0] for r in results], axis=1)
        return est.reshape((chains,) + batch + x.shape[-3:]), se
    est = np.stack([r[0] for r in results])
    return est.reshape(x.shape), se


def _tethered_estimate(base: PotentialSpec, t: float, x_tilde: np.ndarray, y: Optional[np.ndarray],
                       cfg: SamplerConfig, seed: np.random.SeedSequence, per_chain: bool):
    """
    Sample x ∝ exp(−N²(V(x, y) + ‖x̃ − x‖₂²/2t)) and average the score.

    A MarginalPotential base is handled by sampling its hidden variables
    jointly with x. When tc ≥ 1 the estimator (x̃ − X)/t is used instead of
    D_xV(X, y); both have the same conditional mean.
    """
    if isinstance(base, MarginalPotential):
        pot = base.base
        x_global = base.keep[:base.m]
        y_global = base.keep[base.m:]
        free = base.hidden + x_global
    else:
        pot = base
        x_global = list(range(base.m))
        y_global = list(range(base.m, base.k))
        free = x_global
    x_local = [free.index(i) for i in x_global]
    N = x_tilde.shape[-1]

    def assemble(z):
        out = np.zeros(z.shape[:-3] + (pot.k, N, N), dtype=np.complex128)
        out[..., free, :, :] = z
        if y_global:
            out[..., y_global, :, :] = y
        return out

    def grad_fn(z):
        g = pot.full_grad(assemble(z))[..., free, :, :]
        g[..., x_local, :, :] += (z[..., x_local, :, :] - x_tilde) / t
        return g

    x0 = pot.mean_hint(N)[free].copy()
    x0[x_local] = x_tilde
    chain = sample_target(grad_fn, x0, N, cfg, seed=seed, curvature=pot.C + 1.0 / t)
    states = chain.flat()
    if t * base.c >= 1.0:
        values = (x_tilde[None] - states[:, x_local]) / t
    else:
        values = pot.full_grad(assemble(states))[:, x_global]
    values = values.reshape(chain.states.shape[:2] + values.shape[1:])
    if per_chain:
        return values.mean(axis=1), batch_means(values).norm_se()
    bm = batch_means(values)
    return bm.mean, bm.norm_se()


# ------------------------------------------------------------------
# Checks
# ------------------------------------------------------------------

def gradient_consistency(ep: EvolvedPotential, t: float, x: np.ndarray, y: Optional[np.ndarray] = None,
                         seed: Any = 0, n_se: float = 4.0) -> Dict[str, float]:
    """Compare D_xV_t with D_xV against the time-continuity bound."""
    base = ep.base
    g0 = base.grad(base.combine(x, y), Block.X)
    gt, se = evolved_grad(EvolvedPotential(base, False, ep.sampler_cfg, ep.exact), t, x, y, seed)
    if base.C * t > 1.0:
        raise SemigroupError(f"Invalid time for the continuity bound: {t} (need C t <= 1)")
    bound = continuity_bound(base.C, base.m, t, float(norm2(g0)))
    distance = float(norm2(gt - g0))
    return {'distance': distance, 'bound': bound, 'se': se,
            'passed': float(distance <= bound + n_se * se)}


def secant_window_check(ep: EvolvedPotential, t: float, points: np.ndarray, partners: np.ndarray,
                        y: Optional[np.ndarray] = None, seed: Any = 0, n_se: float = 4.0) -> Dict[str, Any]:
    """
    Secant ratios ⟨D_xV_t(x) − D_xV_t(x′), x − x′⟩₂/‖x − x′‖₂² against the
    evolved window, on paired points (same y, common random numbers).
    """
    c_t, C_t = ep.window(t)
    g1, se1 = evolved_grad(ep, t, points, y, seed)
    g2, se2 = evolved_grad(ep, t, partners, y, seed)
    d = points - partners
    dist = norm2(d)
    ratios = inner(g1 - g2, d) / dist ** 2
    slack = n_se * (se1 + se2) / np.maximum(dist, 1e-300)
    passed = bool(np.all(ratios >= c_t - slack) and np.all(ratios <= C_t + slack))
    return {'ratios': ratios, 'window': (c_t, C_t), 'slack': slack, 'passed': passed}


def two_term_check(ep: EvolvedPotential, t: float, x: np.ndarray, y: np.ndarray,
                   xp: np.ndarray, yp: np.ndarray, seed: Any = 0, n_se: float = 4.0) -> Dict[str, Any]:
    """
    c/(1+ct)‖Δx‖² − κ‖Δx‖‖Δy‖ ≤ ⟨D_xV_t(x,y) − D_xV_t(x′,y′), Δx⟩₂
        ≤ C/(1+Ct)‖Δx‖² + κ‖Δx‖‖Δy‖,  κ = (C−c)/((1+Ct)(1+ct))^{1/2}.
    """
    c, C = ep.base.c, ep.base.C
    g1, se1 = evolved_grad(ep, t, x, y, seed)
    g2, se2 = evolved_grad(ep, t, xp, yp, seed)
    dx, dy = norm2(x - xp), norm2(y - yp)
    lhs = inner(g1 - g2, x - xp)
    kappa = cross_term_coefficient(c, C, t)
    lower = c / (1 + c * t) * dx ** 2 - kappa * dx * dy
    upper = C / (1 + C * t) * dx ** 2 + kappa * dx * dy
    slack = n_se * (se1 + se2) * dx
    passed = bool(np.all(lhs >= lower - slack) and np.all(lhs <= upper + slack))
    return {'lhs': lhs, 'lower': lower, 'upper': upper, 'passed': passed}


def trotter_agreement(ep: EvolvedPotential, t: float, ell: int, x: np.ndarray,
                      y: Optional[np.ndarray] = None, seed: Any = 0,
                      cfg: Optional[TrotterConfig] = None, n_se: float = 4.0) -> Dict[str, Any]:
    """
    Conditioned-sampling D_xV_t against the Trotter product R_{t,ℓ}; the
    allowance is the a priori gradient bound plus n_se combined standard
    errors of both sides.
    """
    sampled, se = evolved_grad(ep, t, x, y, seed)
    trotter = trotter_R(ep.base, t, ell, x, y, cfg)
    distance = float(norm2(sampled - trotter.grad))
    budget = trotter.grad_bound + n_se * math.hypot(se, trotter.grad_se)
    return {'distance': distance, 'budget': budget, 'se': se, 'trotter_se': trotter.grad_se,
            'grad_bound': trotter.grad_bound, 'passed': distance <= budget}


def grid_times(t_max: float, ell: int) -> List[float]:
    """Dyadic times h, 2h, ..., t_max for h = 2^{-ℓ}."""
    h = 2.0 ** (-ell)
    return [h * i for i in range(1, int(round(t_max / h)) + 1)]
