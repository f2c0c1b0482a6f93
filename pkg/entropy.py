"""
Normalized Entropy and Fisher Information

For (X, Y) ~ e^{−N²V} and an independent GUE tuple S:

    I^(N)(X̃_t | Y) = E‖D_xV_t(X̃_t, Y)‖₂²,            X̃_t = X + t^{1/2}S
    h^(N)(X | Y)   = ½∫₀^∞ (m/(1+t) − I^(N)(X̃_t | Y)) dt + (m/2) log 2πe
    |h_g^(N)(X|Y)| = ½∫₀^∞ I_g^(N)(e^{−s/2}X + (1−e^{−s})^{1/2}S | Y) ds
    I_g^(N)        = E‖D_xṼ_s − X̃_s‖₂²

Fisher estimates use the integration-by-parts identities E⟨ξ_j, X̃_i⟩₂ = δ_ij,
E τ(ξ_j) = 0 and E⟨ξ_j, Y_i⟩₂ = 0 as control variates. Every reported value
carries a budget: n_se standard errors, a Richardson quadrature estimate and
the width of the analytic tail envelopes.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import simpson

from errors import EntropyError
from matrices import inner, sample_gue, tau
from potential import (Block, LinearImagePotential, PotentialSpec, QuadraticPotential,
                       marginal, repartition)
from reports import CheckReport, format_float
from sampler import SampleChain, SamplerConfig, batch_means, sample, seed_sequence
from semigroup import EvolvedPotential, evolved_grad, evolved_grad_halves

logger = logging.getLogger('FreeGibbs.entropy')


class FisherMode(Enum):
    RAW = "raw"
    GAUSSIAN = "gaussian"


@dataclass
class QuadratureConfig:
    """
    Grids, sample sizes and budgets for entropy quadratures.

    Args:
        t_min, t_max, points: Log-spaced raw-time grid for h^(N)
        s_min, s_max, s_points: Log-spaced renormalized-time grid for h_g^(N)
        outer_samples: Chain states used per Fisher estimate
        sampler: Settings of the outer chain (when one is drawn here)
        inner: Settings of the inner conditioned chains
        control_variates: Use the integration-by-parts control variates
        n_se: Standard errors counted in a budget
        budget: Raise EntropyError when a total budget exceeds this
        seed: Master seed; grid point i uses (seed, i)
        threads: Worker pool size for grid points
    """
    t_min: float = 1e-3
    t_max: float = 1e3
    points: int = 25
    s_min: float = 1e-3
    s_max: float = 12.0
    s_points: int = 25
    outer_samples: int = 200
    sampler: SamplerConfig = field(default_factory=SamplerConfig.quick)
    inner: SamplerConfig = field(default_factory=SamplerConfig.inner)
    control_variates: bool = True
    n_se: float = 4.0
    budget: Optional[float] = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise EntropyError(f"Invalid time grid: [{self.t_min}, {self.t_max}] (must have 0 < t_min < t_max)")
        if not 0 < self.s_min < self.s_max:
            raise EntropyError(f"Invalid time grid: [{self.s_min}, {self.s_max}] (must have 0 < s_min < s_max)")
        for name in ('points', 's_points'):
            value = getattr(self, name)
            if value < 5 or (value - 1) % 4:
                raise EntropyError(f"Invalid {name}: {value} (must be 1 mod 4 and >= 5)")
        if self.outer_samples < 4:
            raise EntropyError(f"Invalid outer_samples: {self.outer_samples} (must be >= 4)")

    @classmethod
    def quick(cls, **kwargs) -> 'QuadratureConfig':
        defaults = dict(points=13, s_points=13, outer_samples=60)
        defaults.update(kwargs)
        return cls(**defaults)


@dataclass
class ScoreEstimate:
    """Estimate of E‖D_xV_t(X̃_t, Y)‖₂² (raw) or E‖D_xV_t − X̃_t‖₂² (Gaussian mode)."""
    estimate: float
    se: float
    t: float
    mode: FisherMode
    renormalized: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {'t': self.t, 'estimate': self.estimate, 'se': self.se,
                'mode': self.mode.value, 'renormalized': self.renormalized}


# ------------------------------------------------------------------
# Fisher information
# ------------------------------------------------------------------

def outer_states(chain: SampleChain, count: int) -> np.ndarray:
    """count states spread evenly through the chain (chain order preserved)."""
    flat = chain.flat()
    if count >= flat.shape[0]:
        return flat
    idx = np.linspace(0, flat.shape[0] - 1, count).round().astype(int)
    return flat[idx]


def stein_controls(g: np.ndarray, x: np.ndarray, y: Optional[np.ndarray]) -> np.ndarray:
    """
    Mean-zero control variates for a score estimate g at (x, y):
    ⟨g, x⟩₂ − m, Re τ(g_j) and Re τ(g_j y_i); shape (samples, p).
    """
    m = g.shape[-3]
    cols = [inner(g, x) - m]
    cols.extend(np.real(tau(g[:, j])) for j in range(m))
    if y is not None:
        for j in range(m):
            for i in range(y.shape[-3]):
                cols.append(np.real(tau(g[:, j] @ y[:, i])))
    return np.stack(cols, axis=1)


def control_variate_mean(values: np.ndarray, controls: Optional[np.ndarray]) -> Tuple[float, float]:
    """Regression-adjusted mean and its batch-means standard error."""
    values = np.asarray(values, dtype=float)
    if controls is not None and values.shape[0] > controls.shape[1] + 2:
        centered = controls - controls.mean(axis=0)
        beta = np.linalg.lstsq(centered, values - values.mean(), rcond=None)[0]
        values = values - controls @ beta
    bm = batch_means(values[None])
    return float(bm.mean), float(bm.se)


def fisher(V: PotentialSpec, chain: SampleChain, t: float, mode: FisherMode = FisherMode.RAW,
           cfg: Optional[QuadratureConfig] = None, renormalized: bool = False,
           seed: Any = None) -> ScoreEstimate:
    """
    Normalized Fisher information of X̃_t given Y.

    X̃_t = X + t^{1/2}S (raw) or e^{−t/2}X + (1 − e^{−t})^{1/2}S (renormalized).
    Sampled inner estimates use two independent chains and the unbiased
    product ⟨ĝ₁, ĝ₂⟩₂.
    """
    cfg = cfg or QuadratureConfig()
    mode = FisherMode(mode)
    if t < 0:
        raise EntropyError(f"Invalid time: {t} (must be >= 0)")
    if chain.k != V.k:
        raise EntropyError(f"Chain has {chain.k} variables, potential has {V.k}")
    states = outer_states(chain, cfg.outer_samples)
    m = V.m
    x = states[:, :m]
    y = states[:, m:] if V.n else None
    seed = (cfg.seed, int(round(t * 1e6))) if seed is None else seed
    noise_seed, inner_seed = seed_sequence(seed).spawn(2)
    rng = np.random.default_rng(noise_seed)

    if t == 0:
        xt = x
    else:
        noise = sample_gue(rng, m, chain.N, size=(x.shape[0],))
        if renormalized:
            xt = math.exp(-t / 2.0) * x + math.sqrt(-math.expm1(-t)) * noise
        else:
            xt = x + math.sqrt(t) * noise

    ep = EvolvedPotential(V, renormalized, cfg.inner)
    if t == 0:
        g = V.grad(states, Block.X)
        halves = None
    elif ep.uses_closed_form():
        g, _ = evolved_grad(ep, t, xt, y)
        halves = None
    else:
        if cfg.inner.n_chains < 2:
            raise EntropyError("Sampled Fisher estimates need inner.n_chains >= 2")
        halves = evolved_grad_halves(ep, t, xt, y, seed=inner_seed)
        g = halves.mean(axis=0)

    if mode == FisherMode.GAUSSIAN:
        shift = xt
    else:
        shift = 0.0
    if halves is None:
        d = g - shift
        values = inner(d, d)
    else:
        half = halves.shape[0] // 2
        values = inner(halves[:half].mean(axis=0) - shift, halves[half:].mean(axis=0) - shift)
    controls = stein_controls(g, xt, y) if cfg.control_variates else None
    estimate, se = control_variate_mean(values, controls)
    return ScoreEstimate(estimate, se, t, mode, renormalized)


def second_moment(chain: SampleChain, m: int) -> Tuple[float, float]:
    """E‖X‖₂² over the x-block, with standard error."""
    states = chain.flat()[:, :m]
    values = inner(states, states).reshape(chain.states.shape[:2])
    bm = batch_means(values)
    return float(bm.mean), float(bm.se)


# ------------------------------------------------------------------
# Quadrature
# ------------------------------------------------------------------

@dataclass
class EntropyQuadrature:
    """A quadrature of one of the entropy integral formulas."""
    kind: str
    grid: np.ndarray
    integrand: np.ndarray
    se: np.ndarray
    interior: float
    lower_tail: float
    upper_tail: float
    mc_error: float
    quadrature_error: float
    tail_width: float
    value: float
    budget: float
    closed_form: Optional[float] = None
    extras: Dict[str, Any] = field(default_factory=dict)

    def rows(self) -> List[Dict[str, str]]:
        return [{'t': format_float(t), 'integrand': format_float(v), 'se': format_float(s)}
                for t, v, s in zip(self.grid, self.integrand, self.se)]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, 'w', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=['t', 'integrand', 'se'], lineterminator='\n')
            writer.writeheader()
            writer.writerows(self.rows())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind, 'value': self.value, 'budget': self.budget,
            'interior': self.interior, 'lower_tail': self.lower_tail, 'upper_tail': self.upper_tail,
            'mc_error': self.mc_error, 'quadrature_error': self.quadrature_error,
            'tail_width': self.tail_width, 'closed_form': self.closed_form, 'extras': self.extras,
        }


def log_simpson(grid: np.ndarray, values: np.ndarray, se: np.ndarray) -> Tuple[float, float, float]:
    """
    ∫ f dt over a log-spaced grid by Simpson's rule in log t.

    Returns (integral, Richardson error estimate against the every-other-point
    rule, propagated standard error).
    """
    u = np.log(grid)
    weighted = values * grid
    fine = float(simpson(weighted, x=u))
    coarse = float(simpson(weighted[::2], x=u[::2]))
    weights = np.array([simpson(row, x=u) for row in np.eye(len(u))])
    mc = float(np.sqrt(np.sum((weights * grid * se) ** 2)))
    return fine, abs(fine - coarse) / 15.0, mc


def _grid_estimates(V: PotentialSpec, chain: SampleChain, grid: np.ndarray, mode: FisherMode,
                    renormalized: bool, cfg: QuadratureConfig) -> List[ScoreEstimate]:
    def one(i):
        return fisher(V, chain, float(grid[i]), mode, cfg, renormalized, seed=(cfg.seed, i))

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(one, range(len(grid))))
    return [one(i) for i in range(len(grid))]


def _check_budget(result: EntropyQuadrature, cfg: QuadratureConfig) -> EntropyQuadrature:
    if cfg.budget is not None and result.budget > cfg.budget:
        logger.error("%s budget %.3g exceeds limit %.3g", result.kind, result.budget, cfg.budget)
        raise EntropyError(f"Budget exceeded for {result.kind}: {result.budget:.3g} > {cfg.budget:.3g}")
    return result


def _chain_for(V: PotentialSpec, chain: Optional[SampleChain], N: Optional[int],
               cfg: QuadratureConfig) -> SampleChain:
    if chain is not None:
        return chain
    if N is None:
        raise EntropyError("Either a chain or the matrix size N is required")
    return sample(V, N, cfg.sampler)


def gaussian_entropy(q: QuadraticPotential) -> float:
    """Closed-form h^(N)(X | Y) of a Gaussian model."""
    return float(q.entropy(conditional=True))


def gaussian_second_moment(q: QuadraticPotential) -> float:
    """E‖X‖₂² over the x-block of a Gaussian model."""
    cov = q.covariance()
    return float(np.sum(np.diag(cov)[:q.m]) + np.sum(q.alpha[:q.m] ** 2))


def gaussian_h_g(q: QuadraticPotential) -> float:
    """Closed-form h_g^(N) = h^(N) − ½E‖X‖₂² − (m/2) log 2π."""
    return gaussian_entropy(q) - 0.5 * gaussian_second_moment(q) - 0.5 * q.m * math.log(2.0 * math.pi)


def entropy(V: PotentialSpec, cfg: Optional[QuadratureConfig] = None, chain: Optional[SampleChain] = None,
            N: Optional[int] = None) -> EntropyQuadrature:
    """h^(N)(X | Y) by quadrature of the raw-time Fisher information."""
    cfg = cfg or QuadratureConfig()
    chain = _chain_for(V, chain, N, cfg)
    m = V.m
    grid = np.geomspace(cfg.t_min, cfg.t_max, cfg.points)
    estimates = _grid_estimates(V, chain, grid, FisherMode.RAW, False, cfg)
    fisher0 = fisher(V, chain, 0.0, FisherMode.RAW, cfg)
    values = np.array([m / (1.0 + e.t) - e.estimate for e in estimates])
    se = np.array([e.se for e in estimates])
    interior, quad_err, mc = log_simpson(grid, values, se)

    f0 = m - fisher0.estimate
    lower = 0.5 * cfg.t_min * (f0 + values[0])
    lower_width = 0.5 * cfg.t_min * abs(f0 - values[0])
    mc = math.hypot(mc, 0.5 * cfg.t_min * math.hypot(fisher0.se, se[0]))

    a = second_moment(chain, m)[0] / m
    T = cfg.t_max
    tail_lo = -m * math.log1p(1.0 / T)
    tail_hi = m * math.log((a + T) / (1.0 + T))
    upper = 0.5 * (tail_lo + tail_hi)
    upper_width = 0.5 * abs(tail_hi - tail_lo)

    value = 0.5 * (lower + interior + upper) + 0.5 * m * math.log(2.0 * math.pi * math.e)
    budget = 0.5 * (cfg.n_se * mc + quad_err + lower_width + upper_width)
    q = V.as_quadratic()
    ex2, ex2_se = second_moment(chain, m)
    result = EntropyQuadrature(
        kind='h', grid=grid, integrand=values, se=se, interior=interior, lower_tail=lower,
        upper_tail=upper, mc_error=0.5 * mc, quadrature_error=0.5 * quad_err,
        tail_width=0.5 * (lower_width + upper_width), value=value, budget=budget,
        closed_form=gaussian_entropy(q) if q is not None else None,
        extras={'fisher0': fisher0.to_dict(), 'a': a, 'second_moment': ex2,
                'h_g': value - 0.5 * ex2 - 0.5 * m * math.log(2.0 * math.pi),
                'h_g_budget': budget + 0.5 * cfg.n_se * ex2_se})
    logger.info("h^(N)(%s) = %.6f ± %.3g", V.label, value, budget)
    return _check_budget(result, cfg)


def entropy_g(V: PotentialSpec, cfg: Optional[QuadratureConfig] = None, chain: Optional[SampleChain] = None,
              N: Optional[int] = None) -> EntropyQuadrature:
    """h_g^(N)(X | Y) by quadrature of the renormalized-time Gaussian-relative Fisher information."""
    cfg = cfg or QuadratureConfig()
    chain = _chain_for(V, chain, N, cfg)
    grid = np.geomspace(cfg.s_min, cfg.s_max, cfg.s_points)
    estimates = _grid_estimates(V, chain, grid, FisherMode.GAUSSIAN, True, cfg)
    fisher0 = fisher(V, chain, 0.0, FisherMode.GAUSSIAN, cfg)
    values = np.array([e.estimate for e in estimates])
    se = np.array([e.se for e in estimates])
    interior, quad_err, mc = log_simpson(grid, values, se)

    lower = 0.5 * cfg.s_min * (fisher0.estimate + values[0])
    lower_width = 0.5 * cfg.s_min * abs(fisher0.estimate - values[0])
    mc = math.hypot(mc, 0.5 * cfg.s_min * math.hypot(fisher0.se, se[0]))

    # I_g(s) ≤ e^{−(s−S)} I_g(S) beyond the grid, so the tail lies in [0, I_g(S)]
    tail_top = max(values[-1], 0.0) + cfg.n_se * se[-1]
    upper = 0.5 * tail_top
    upper_width = 0.5 * tail_top

    magnitude = 0.5 * (lower + interior + upper)
    budget = 0.5 * (cfg.n_se * mc + quad_err + lower_width + upper_width)
    q = V.as_quadratic()
    result = EntropyQuadrature(
        kind='h_g', grid=grid, integrand=values, se=se, interior=interior, lower_tail=lower,
        upper_tail=upper, mc_error=0.5 * mc, quadrature_error=0.5 * quad_err,
        tail_width=0.5 * (lower_width + upper_width), value=-magnitude, budget=budget,
        closed_form=gaussian_h_g(q) if q is not None else None,
        extras={'fisher_g0': fisher0.to_dict(), 'relative_entropy': magnitude})
    logger.info("h_g^(N)(%s) = %.6f ± %.3g", V.label, -magnitude, budget)
    return _check_budget(result, cfg)


# ------------------------------------------------------------------
# Checks
# ------------------------------------------------------------------

def lsi_check(V: PotentialSpec, cfg: Optional[QuadratureConfig] = None, chain: Optional[SampleChain] = None,
              N: Optional[int] = None) -> CheckReport:
    """|h_g^(N)(X|Y)| ≤ ½ I_g^(N)(X|Y) within budget."""
    cfg = cfg or QuadratureConfig()
    chain = _chain_for(V, chain, N, cfg)
    hg = entropy_g(V, cfg, chain)
    ig = fisher(V, chain, 0.0, FisherMode.GAUSSIAN, cfg)
    lhs = abs(hg.value)
    rhs = 0.5 * ig.estimate
    slack = hg.budget + 0.5 * cfg.n_se * ig.se
    return CheckReport('lsi', lhs <= rhs + slack,
                       {'abs_h_g': lhs, 'half_I_g': rhs, 'slack': slack, 'margin': rhs - lhs})


def two_route_check(V: PotentialSpec, cfg: Optional[QuadratureConfig] = None,
                    chain: Optional[SampleChain] = None, N: Optional[int] = None) -> CheckReport:
    """h_g computed directly agrees with h^(N) − ½E‖X‖₂² − (m/2) log 2π."""
    cfg = cfg or QuadratureConfig()
    chain = _chain_for(V, chain, N, cfg)
    h = entropy(V, cfg, chain)
    hg = entropy_g(V, cfg, chain)
    distance = abs(h.extras['h_g'] - hg.value)
    budget = h.extras['h_g_budget'] + hg.budget
    return CheckReport('entropy_two_routes', distance <= budget,
                       {'h': h.value, 'h_g_via_h': h.extras['h_g'], 'h_g': hg.value,
                        'distance': distance, 'budget': budget})


def entropy_additivity_check(V: PotentialSpec, cfg: Optional[QuadratureConfig] = None,
                             chain: Optional[SampleChain] = None, N: Optional[int] = None) -> CheckReport:
    """h(X, Y) = h(X | Y) + h(Y), the Y-marginal backed by marginal_grad semantics."""
    cfg = cfg or QuadratureConfig()
    if V.n == 0:
        raise EntropyError("Additivity check needs a y-block")
    chain = _chain_for(V, chain, N, cfg)
    joint = repartition(V, V.k)
    y_idx = list(range(V.m, V.k))
    W = marginal(V, y_idx, m=V.n, n=0, sampler_cfg=cfg.inner, seed=cfg.seed)
    h_joint = entropy(joint, cfg, chain)
    h_cond = entropy(V, cfg, chain)
    h_y = entropy(W, cfg, chain.select(y_idx))
    distance = abs(h_joint.value - h_cond.value - h_y.value)
    budget = h_joint.budget + h_cond.budget + h_y.budget
    details = {'h_joint': h_joint.value, 'h_conditional': h_cond.value, 'h_marginal': h_y.value,
               'distance': distance, 'budget': budget}
    q = V.as_quadratic()
    if q is not None:
        details['closed_form'] = {
            'h_joint': gaussian_entropy(repartition(q, q.k)),
            'h_conditional': gaussian_entropy(q),
            'h_marginal': gaussian_entropy(marginal(q, y_idx, m=V.n, n=0)),
        }
    return CheckReport('entropy_additivity', distance <= budget, details)


def fisher_sandwich_check(V: PotentialSpec, chain: SampleChain, times: Sequence[float],
                          cfg: Optional[QuadratureConfig] = None) -> CheckReport:
    """
    m/(a+t) ≤ I^(N)(X̃_t | Y) ≤ min(m/t, I^(N)(X | Y)) at every t, and I
    non-increasing in t, all within n_se standard errors.
    """
    cfg = cfg or QuadratureConfig()
    m = V.m
    a = second_moment(chain, m)[0] / m
    base = fisher(V, chain, 0.0, FisherMode.RAW, cfg)
    rows = []
    ok = True
    previous = base
    for i, t in enumerate(sorted(times)):
        est = fisher(V, chain, t, FisherMode.RAW, cfg, seed=(cfg.seed, 1000 + i))
        slack = cfg.n_se * math.hypot(est.se, base.se)
        lower = m / (a + t)
        upper = min(m / t, base.estimate) if t > 0 else base.estimate
        monotone = est.estimate <= previous.estimate + cfg.n_se * math.hypot(est.se, previous.se)
        inside = lower - slack <= est.estimate <= upper + slack
        ok &= inside and monotone
        rows.append({'t': t, 'fisher': est.estimate, 'se': est.se, 'lower': lower, 'upper': upper,
                     'inside': inside, 'monotone': monotone})
        previous = est
    return CheckReport('fisher_sandwich', ok, {'a': a, 'fisher0': base.estimate, 'rows': rows})


def fisher_scaling_check(V: PotentialSpec, chain: SampleChain, factor: float,
                         cfg: Optional[QuadratureConfig] = None, rtol: float = 1e-9) -> CheckReport:
    """I(aX | Y) = a^{−2} I(X | Y) on a rescaled chain."""
    cfg = cfg or QuadratureConfig()
    if factor <= 0:
        raise EntropyError(f"Invalid scale factor: {factor} (must be > 0)")
    A = np.eye(V.k)
    A[:V.m, :V.m] *= factor
    scaled_V = LinearImagePotential(V, A, m=V.m, n=V.n)
    scaled_states = chain.states.copy()
    scaled_states[:, :, :V.m] *= factor
    scaled_chain = replace(chain, states=scaled_states, _ess={})
    plain = fisher(V, chain, 0.0, FisherMode.RAW, replace(cfg, control_variates=False))
    scaled = fisher(scaled_V, scaled_chain, 0.0, FisherMode.RAW, replace(cfg, control_variates=False))
    expected = plain.estimate / factor ** 2
    error = abs(scaled.estimate - expected)
    return CheckReport('fisher_scaling', error <= rtol * max(abs(expected), 1e-300),
                       {'fisher': plain.estimate, 'scaled': scaled.estimate, 'expected': expected})


def entropy_sweep(make_potential: Callable[[int], PotentialSpec], sizes: Sequence[int],
                  cfg: Optional[QuadratureConfig] = None, ratio: float = 2.0) -> CheckReport:
    """
    h^(N) over an ascending grid of N; successive differences must shrink by
    at least `ratio` per step, up to the combined budgets.
    """
    cfg = cfg or QuadratureConfig()
    sizes = list(sizes)
    if sizes != sorted(sizes) or len(sizes) < 3:
        raise EntropyError(f"Invalid N grid: {sizes} (must be ascending with >= 3 entries)")
    results = [entropy(make_potential(N), cfg, N=N) for N in sizes]
    values = [r.value for r in results]
    budgets = [r.budget for r in results]
    diffs = [abs(values[i + 1] - values[i]) for i in range(len(values) - 1)]
    diff_budgets = [budgets[i + 1] + budgets[i] for i in range(len(values) - 1)]
    ok = all(diffs[i + 1] <= diffs[i] / ratio + diff_budgets[i + 1] + diff_budgets[i] / ratio
             for i in range(len(diffs) - 1))
    return CheckReport('entropy_sweep', ok,
                       {'N': sizes, 'h': values, 'budgets': budgets, 'differences': diffs})
