"""
Conditional Expectations

E[f(X, Y) | Y = y] for (X, Y) ~ e^{−N²V}, computed two ways:

    direct      MALA on x with y frozen, averaging f
    semigroup   T_{t,ℓ}f = (P_h S_h)^{t/h} f with S_h f(x, y) = f(W_h(x, y), y),
                W the gradient flow ∂_t W = −½ D_xV(W, y)

T_{t,ℓ}f(x, y) is the mean of f(Z_n, y) over paths Z_{k+1} = W_h(Z_k + h^{1/2}S_k),
Z_0 = x. Paths share their noise across evaluation points, and refinement
levels share it too (two half-step increments sum to one full-step increment).
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import CondExpError
from matrices import norm2, sample_gue
from potential import Block, PotentialSpec
from reports import CheckReport
from sampler import SamplerConfig, batch_means, sample_target, seed_sequence
from tracepoly import OperatorTracePoly, evaluate_operator

logger = logging.getLogger('FreeGibbs.condexp')


class CondExpMode(Enum):
    DIRECT = "direct"
    SEMIGROUP = "semigroup"


@dataclass
class Observable:
    """
    A Lipschitz function f(x, y) of the full tuple, matrix or scalar valued.

    fn takes (..., k, N, N) and returns (..., N, N) or (...).
    """
    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    label: str = "f"
    x_only: bool = False

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.fn(z)

    @classmethod
    def variable(cls, j: int, x_only: bool = True) -> 'Observable':
        """f(z) = z_j, Lipschitz constant 1."""
        return cls(lambda z: z[..., j, :, :], 1.0, f"z{j + 1}", x_only)

    @classmethod
    def from_poly(cls, p: OperatorTracePoly, lipschitz: float, label: str = "") -> 'Observable':
        return cls(lambda z: evaluate_operator(p, z), lipschitz, label or str(p))

    @classmethod
    def constant(cls, value: float = 1.0) -> 'Observable':
        return cls(lambda z: np.full(z.shape[:-3], value, dtype=np.complex128), 0.0, f"{value:g}", True)


# ------------------------------------------------------------------
# Gradient flow
# ------------------------------------------------------------------

@dataclass
class OdeConfig:
    """Explicit RK4 settings: step h with h·C ≤ step_scale."""
    step_scale: float = 0.5
    max_step: float = 0.25
    min_step: float = 1e-8

    def __post_init__(self):
        if not 0 < self.step_scale <= 0.5:
            raise CondExpError(f"Invalid step scale: {self.step_scale} (must be in (0, 0.5])")

    def step_for(self, C: float, t: float) -> Tuple[float, int]:
        h = min(self.max_step, self.step_scale / max(C, 1e-300))
        if h < self.min_step:
            raise CondExpError(f"Step size underflow: {h:.3e} < {self.min_step:.3e}")
        n = max(1, math.ceil(t / h - 1e-12))
        return t / n, n


@dataclass
class FlowState:
    """W_t(x, y) with the integration log."""
    point: np.ndarray
    t: float
    steps: List[Tuple[float, float]] = field(default_factory=list)


def _flow_rhs(V: PotentialSpec, y: Optional[np.ndarray]):
    def rhs(w):
        return -0.5 * V.grad(V.combine(w, y), Block.X)
    return rhs


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], w: np.ndarray, h: float) -> np.ndarray:
    """One classical RK4 step."""
    k1 = rhs(w)
    k2 = rhs(w + 0.5 * h * k1)
    k3 = rhs(w + 0.5 * h * k2)
    k4 = rhs(w + h * k3)
    return w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_state(V: PotentialSpec, x: np.ndarray, y: Optional[np.ndarray], t: float,
               ode_cfg: Optional[OdeConfig] = None, log: bool = False) -> FlowState:
    """Integrate ∂_t W = −½ D_xV(W, y) from W_0 = x up to time t."""
    if t < 0:
        raise CondExpError(f"Invalid time: {t} (must be >= 0)")
    ode_cfg = ode_cfg or OdeConfig()
    w = np.asarray(x, dtype=np.complex128)
    state = FlowState(w.copy(), 0.0)
    if t == 0:
        return state
    h, n = ode_cfg.step_for(V.C, t)
    rhs = _flow_rhs(V, y)
    for i in range(n):
        w = rk4_step(rhs, w, h)
        if log:
            state.steps.append(((i + 1) * h, float(np.max(norm2(w)))))
    state.point = w
    state.t = t
    return state


def flow_W(V: PotentialSpec, x: np.ndarray, y: Optional[np.ndarray], t: float,
           ode_cfg: Optional[OdeConfig] = None) -> np.ndarray:
    """W_t(x, y); batched over leading axes of x."""
    return flow_state(V, x, y, t, ode_cfg).point


def flow_contraction_check(V: PotentialSpec, x: np.ndarray, xp: np.ndarray, y: Optional[np.ndarray],
                           t: float, ode_cfg: Optional[OdeConfig] = None, tol: float = 1e-8) -> CheckReport:
    """‖W_t(x, y) − W_t(x′, y)‖₂ ≤ e^{−ct/2}‖x − x′‖₂ on paired points."""
    w = flow_W(V, x, y, t, ode_cfg)
    wp = flow_W(V, xp, y, t, ode_cfg)
    before = norm2(x - xp)
    after = norm2(w - wp)
    factor = math.exp(-V.c * t / 2.0)
    ratio = float(np.max(after / np.maximum(before, 1e-300)))
    return CheckReport('flow_contraction', ratio <= factor + tol, {'max_ratio': ratio, 'bound': factor})


# ------------------------------------------------------------------
# T_t semigroup
# ------------------------------------------------------------------

@dataclass
class CondExpConfig:
    """
    Settings for both estimation modes.

    Args:
        sampler: Chain settings of the direct mode
        ode: Flow integrator settings
        paths: Monte Carlo paths per T_{t,ℓ} evaluation
        ell: Refinement level (h = 2^-ell)
        tol: Target size of the convergence envelope in semigroup mode
        t_max: Largest time tried by the semigroup mode; missing tol there is an error
        seed: Master seed
        n_se: Standard errors allowed in statistical comparisons
    """
    sampler: SamplerConfig = field(default_factory=SamplerConfig.quick)
    ode: OdeConfig = field(default_factory=OdeConfig)
    paths: int = 2000
    ell: int = 3
    tol: float = 0.05
    t_max: float = 64.0
    seed: int = 0
    n_se: float = 4.0

    def __post_init__(self):
        if self.paths < 2:
            raise CondExpError(f"Invalid path count: {self.paths} (must be >= 2)")
        if self.ell < 0:
            raise CondExpError(f"Invalid refinement level: {self.ell} (must be >= 0)")
        if self.tol <= 0 or self.t_max <= 0:
            raise CondExpError(f"Invalid envelope target: tol={self.tol}, t_max={self.t_max} (must be > 0)")


@dataclass
class TtResult:
    """T_{t,ℓ}f at a batch of points with Monte Carlo error and the a priori bound."""
    estimate: np.ndarray
    se: float
    t: float
    ell: int
    bound: float


def refinement_bound(V: PotentialSpec, ell: int, lipschitz: float) -> float:
    """(C m^{1/2} / (c(2 − 2^{1/2}))) 2^{−ℓ/2} ‖f‖_Lip."""
    return V.C * math.sqrt(V.m) / (V.c * (2.0 - math.sqrt(2.0))) * 2.0 ** (-ell / 2.0) * lipschitz


def convergence_envelope(V: PotentialSpec, x: np.ndarray, y: Optional[np.ndarray], t: float,
                         lipschitz: float) -> float:
    """
    e^{−ct/2}(4(C/c²)(6 + 5·2^{1/2}) t^{−1/2} + (2/c)‖D_xV(x, y)‖₂) ‖f‖_Lip,
    the distance of T_t f(x, y) from the conditional expectation.
    """
    if t <= 0:
        return math.inf
    c, C = V.c, V.C
    g = float(np.max(norm2(V.grad(V.combine(x, y), Block.X))))
    return math.exp(-c * t / 2.0) * (4.0 * C / c ** 2 * (6.0 + 5.0 * math.sqrt(2.0)) / math.sqrt(t)
                                     + 2.0 * g / c) * lipschitz


def path_noise(seed: Any, paths: int, steps: int, m: int, N: int) -> np.ndarray:
    """Tr-orthonormal noise increments of shape (steps, paths, m, N, N)."""
    rng = np.random.default_rng(seed_sequence(seed))
    return sample_gue(rng, m, N, size=(steps, paths))


def coarsen_noise(noise: np.ndarray) -> np.ndarray:
    """Pair up consecutive increments: (S_a + S_b)/2^{1/2} is again GUE."""
    if noise.shape[0] % 2:
        raise CondExpError(f"Cannot coarsen {noise.shape[0]} increments")
    return (noise[0::2] + noise[1::2]) / math.sqrt(2.0)


def _split_paths(f: Observable, V: PotentialSpec, x: np.ndarray, y: Optional[np.ndarray],
                 h: float, noise: np.ndarray, ode_cfg: OdeConfig) -> np.ndarray:
    """f(Z_n, y) for each path and point: shape (paths, batch...) + value shape."""
    z = np.broadcast_to(x, (noise.shape[1],) + x.shape).copy()
    extra = (None,) * (x.ndim - 3)
    sqrt_h = math.sqrt(h)
    for k in range(noise.shape[0]):
        inc = noise[k][(slice(None),) + extra]
        z = flow_W(V, z + sqrt_h * inc, y, h, ode_cfg)
    return np.asarray(f(V.combine(z, y)))


def Tt_apply(f: Observable, V: PotentialSpec, x: np.ndarray, y: Optional[np.ndarray], t: float,
             ell: int, cfg: Optional[CondExpConfig] = None, noise: Optional[np.ndarray] = None) -> TtResult:
    """
    Monte Carlo T_{t,ℓ}f(x, y) for dyadic t.

    x may carry leading batch axes; all points share the same noise paths.
    """
    cfg = cfg or CondExpConfig()
    x = np.asarray(x, dtype=np.complex128)
    h = 2.0 ** (-ell)
    steps_f = t / h
    steps = int(round(steps_f))
    if t < 0 or abs(steps_f - steps) > 1e-9:
        raise CondExpError(f"Invalid time: {t} (must be a nonnegative multiple of 2^-{ell})")
    if steps == 0:
        value = np.asarray(f(V.combine(x, y)))
        return TtResult(value, 0.0, t, ell, 0.0)
    if noise is None:
        noise = path_noise(cfg.seed, cfg.paths, steps, V.m, x.shape[-1])
    if noise.shape[0] != steps:
        raise CondExpError(f"Noise has {noise.shape[0]} increments, need {steps}")
    values = _split_paths(f, V, x, y, h, noise, cfg.ode)
    bm = batch_means(values[None])
    se = bm.norm_se() if values.ndim >= 3 else float(np.max(bm.se))
    return TtResult(bm.mean, se, t, ell, refinement_bound(V, ell, f.lipschitz))


@dataclass
class RefinementStudy:
    levels: List[int]
    deltas: List[float]
    exponent: float
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def refinement_study(f: Observable, V: PotentialSpec, x: np.ndarray, y: Optional[np.ndarray],
                     t: float, levels: Sequence[int], cfg: Optional[CondExpConfig] = None,
                     tolerance: float = 0.2) -> RefinementStudy:
    """
    ‖T_{t,ℓ}f − T_{t,ℓ+1}f‖ for consecutive levels with coupled noise.

    The fitted decay exponent of the differences (base 2) must be at most
    −0.5 + tolerance.
    """
    cfg = cfg or CondExpConfig()
    levels = sorted(levels)
    finest = levels[-1] + 1
    x = np.asarray(x, dtype=np.complex128)
    noise = path_noise(cfg.seed, cfg.paths, int(round(t * 2 ** finest)), V.m, x.shape[-1])
    estimates = {finest: Tt_apply(f, V, x, y, t, finest, cfg, noise).estimate}
    for ell in range(finest - 1, levels[0] - 1, -1):
        noise = coarsen_noise(noise)
        estimates[ell] = Tt_apply(f, V, x, y, t, ell, cfg, noise).estimate
    deltas = []
    for ell in levels:
        d = np.asarray(estimates[ell] - estimates[ell + 1])
        deltas.append(float(np.max(norm2(d[..., None, :, :]))) if d.ndim >= 2 else float(np.max(np.abs(d))))
    logs = np.log2(np.maximum(deltas, 1e-300))
    exponent = float(np.polyfit(levels, logs, 1)[0]) if len(levels) > 1 else float('nan')
    passed = len(levels) > 1 and exponent <= -0.5 + tolerance
    logger.info("Refinement exponent %.3f over levels %s", exponent, levels)
    return RefinementStudy(list(levels), deltas, exponent, bool(passed))


def expectation_preservation_check(f: Observable, V: PotentialSpec, y: Optional[np.ndarray], t: float,
                                   ell: int, cfg: Optional[CondExpConfig] = None,
                                   bias_allowance: float = 0.0, N: Optional[int] = None) -> CheckReport:
    """
    E[T_t f(X, y)] = E[f(X, y)] under X ~ μ(·|y): one splitting path per
    chain state, compared with the plain chain average.

    For Gaussian models and linear f the split scheme is exact; otherwise
    pass the discretization bias to tolerate as bias_allowance.
    """
    cfg = cfg or CondExpConfig()
    chain = conditional_chain(V, y, cfg.sampler, cfg.seed, N)
    states = chain.flat()
    h = 2.0 ** (-ell)
    steps = int(round(t / h))
    noise = path_noise((cfg.seed, 1), states.shape[0], steps, V.m, states.shape[-1])
    z = states
    for k in range(steps):
        z = flow_W(V, z + math.sqrt(h) * noise[k], y, h, cfg.ode)
    before = np.asarray(f(V.combine(states, y)))
    after = np.asarray(f(V.combine(z, y)))
    shape = chain.states.shape[:2]
    b1 = batch_means(before.reshape(shape + before.shape[1:]))
    b2 = batch_means(after.reshape(shape + after.shape[1:]))
    diff = np.asarray(b1.mean - b2.mean)
    distance = float(norm2(diff[None])) if diff.ndim >= 2 else float(np.abs(diff))
    se = math.hypot(_se_norm(b1), _se_norm(b2))
    return CheckReport('expectation_preservation', distance <= cfg.n_se * se + bias_allowance + 1e-12,
                       {'distance': distance, 'se': se, 't': t, 'ell': ell})


def lipschitz_decay_check(f: Observable, V: PotentialSpec, x: np.ndarray, xp: np.ndarray,
                          y: Optional[np.ndarray], t: float, ell: int,
                          cfg: Optional[CondExpConfig] = None, tol: float = 1e-6) -> CheckReport:
    """
    ‖T_t f(x, y) − T_t f(x′, y)‖ ≤ e^{−ct/2} ‖f‖_Lip ‖x − x′‖₂.

    Each path map is a composition of contracting flows and translations,
    so with shared paths the inequality holds path by path.
    """
    cfg = cfg or CondExpConfig()
    x = np.asarray(x, dtype=np.complex128)
    xp = np.asarray(xp, dtype=np.complex128)
    est = np.asarray(Tt_apply(f, V, np.stack([x, xp]), y, t, ell, cfg).estimate)
    diff = est[0] - est[1]
    dist = float(norm2(diff[None, None])) if diff.ndim >= 2 else float(np.abs(diff))
    bound = math.exp(-V.c * t / 2.0) * f.lipschitz * float(norm2(x - xp))
    return CheckReport('lipschitz_decay', dist <= bound + tol, {'distance': dist, 'bound': bound})


def _se_norm(bm) -> float:
    se = np.asarray(bm.se)
    return bm.norm_se() if se.ndim >= 2 else float(np.max(se))


# ------------------------------------------------------------------
# Conditional expectation
# ------------------------------------------------------------------

@dataclass
class CondExpResult:
    estimate: np.ndarray
    se: float
    mode: CondExpMode
    certificate: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {'estimate': self.estimate, 'se': self.se, 'mode': self.mode.value,
                'certificate': self.certificate}


def conditional_chain(V: PotentialSpec, y: Optional[np.ndarray], cfg: SamplerConfig, seed: Any,
                      N: Optional[int] = None):
    """MALA chain for X | Y = y."""
    if V.n and y is None:
        raise CondExpError(f"Missing y for a model with {V.n} conditioning variables")
    if y is not None:
        N = np.asarray(y).shape[-1]
    if N is None:
        raise CondExpError("Matrix size N is needed when there is no y")

    def grad_fn(x):
        return V.grad(V.combine(x, y), Block.X)

    x0 = V.mean_hint(N)[:V.m]
    return sample_target(grad_fn, x0, N, cfg, seed=seed, curvature=V.C, label=f"{V.label}|y")


def cond_exp(f: Observable, V: PotentialSpec, y: Optional[np.ndarray],
             mode: CondExpMode = CondExpMode.DIRECT, cfg: Optional[CondExpConfig] = None,
             N: Optional[int] = None) -> CondExpResult:
    """E[f(X, Y) | Y = y] by conditioned sampling or by the T_t semigroup."""
    cfg = cfg or CondExpConfig()
    mode = CondExpMode(mode)
    if y is not None:
        y = np.asarray(y, dtype=np.complex128)
        N = y.shape[-1]
    elif V.n:
        raise CondExpError(f"Missing y for a model with {V.n} conditioning variables")
    if N is None:
        raise CondExpError("Matrix size N is needed when there is no y")

    if mode == CondExpMode.DIRECT:
        chain = conditional_chain(V, y, cfg.sampler, cfg.seed, N)
        values = np.asarray(f(V.combine(chain.flat(), y)))
        bm = batch_means(values.reshape(chain.states.shape[:2] + values.shape[1:]))
        return CondExpResult(bm.mean, _se_norm(bm), mode,
                             {'acceptance': chain.acceptance.tolist(), 'states': chain.n_states})

    x0 = V.mean_hint(N)[:V.m]
    h = 2.0 ** (-cfg.ell)
    t = h
    while convergence_envelope(V, x0, y, t, f.lipschitz) > cfg.tol and t < cfg.t_max:
        t = min(2.0 * t, cfg.t_max)
    envelope = convergence_envelope(V, x0, y, t, f.lipschitz)
    if envelope > cfg.tol:
        logger.error(f"Envelope {envelope:.3g} above tol {cfg.tol:g} at t_max={cfg.t_max:g}")
        raise CondExpError(f"Semigroup mode did not converge: envelope {envelope:.3g} at t={t:g} "
                           f"(must be <= {cfg.tol:g}; raise t_max)")
    res = Tt_apply(f, V, x0, y, t, cfg.ell, cfg)
    logger.info("Semigroup mode: t=%g, ell=%d, envelope %.3g", t, cfg.ell, envelope)
    return CondExpResult(res.estimate, res.se, mode,
                         {'t': t, 'ell': cfg.ell, 'envelope': envelope, 'refinement_bound': res.bound})


def compare_modes(f: Observable, V: PotentialSpec, y: np.ndarray,
                  cfg: Optional[CondExpConfig] = None) -> CheckReport:
    """Direct and semigroup estimates agree within n_se combined standard errors."""
    cfg = cfg or CondExpConfig()
    direct = cond_exp(f, V, y, CondExpMode.DIRECT, cfg)
    semi = cond_exp(f, V, y, CondExpMode.SEMIGROUP, cfg)
    diff = np.asarray(direct.estimate - semi.estimate)
    distance = float(norm2(diff[None])) if diff.ndim >= 2 else float(np.abs(diff))
    budget = cfg.n_se * math.hypot(direct.se, semi.se)
    if distance > budget:
        logger.warning("Modes disagree for %s: distance %.4g > budget %.4g", f.label, distance, budget)
    return CheckReport('condexp_modes', distance <= budget,
                       {'direct': direct.to_dict(), 'semigroup': semi.to_dict(),
                        'distance': distance, 'budget': budget})


def condexp_lipschitz_audit(f: Observable, V: PotentialSpec, N: int,
                            cfg: Optional[CondExpConfig] = None, pairs: int = 4,
                            scale: float = 1.0) -> CheckReport:
    """
    Empirical Lipschitz ratio of y ↦ E[f | Y = y] over random y-pairs,
    against (1 + C/c)‖f‖_Lip. Both ends of a pair share the chain seed.
    """
    cfg = cfg or CondExpConfig()
    if V.n == 0:
        raise CondExpError("Lipschitz audit needs conditioning variables")
    rng = np.random.default_rng(seed_sequence((cfg.seed, 2)))
    y_hint = V.mean_hint(N)[V.m:]
    bound = (1.0 + V.C / V.c) * f.lipschitz
    ratios = []
    worst_slack = 0.0
    for _ in range(pairs):
        y1 = y_hint + scale * sample_gue(rng, V.n, N)
        y2 = y1 + 0.5 * scale * sample_gue(rng, V.n, N)
        r1 = cond_exp(f, V, y1, CondExpMode.DIRECT, cfg)
        r2 = cond_exp(f, V, y2, CondExpMode.DIRECT, cfg)
        diff = np.asarray(r1.estimate - r2.estimate)
        distance = float(norm2(diff[None])) if diff.ndim >= 2 else float(np.abs(diff))
        dy = float(norm2(y1 - y2))
        ratios.append(distance / dy)
        worst_slack = max(worst_slack, cfg.n_se * math.hypot(r1.se, r2.se) / dy)
    ratio = max(ratios)
    return CheckReport('condexp_lipschitz', ratio <= bound + worst_slack,
                       {'ratios': ratios, 'max_ratio': ratio, 'bound': bound, 'slack': worst_slack})
