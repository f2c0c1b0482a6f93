"""
Transport to the Gaussian Law

Renormalized transport maps built by integrating

    ∂_s F̃_{s,t}(x, y) = ½(D_xṼ_s(F̃_{s,t}(x, y), y) − F̃_{s,t}(x, y)),   F̃_{t,t}(x, y) = x

with the classical four-stage scheme. F = F̃_{∞,0} carries the model to GUE
conditionally on y, and G = F̃_{0,∞} carries GUE back to the model.

Infinite endpoints are truncated at a time T found by doubling. The tail
estimate at T joins the step-doubling ODE error and the propagated sampling
error in each evaluation's budget. Inner estimates of D_xṼ_s reuse a single
seed per trajectory (common random numbers).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from entropy import QuadratureConfig, entropy_g, outer_states
from errors import FreeGibbsError, TransportError
from matrices import norm2, opnorm, sample_gue, tau
from potential import LinearImagePotential, PotentialSpec, marginal, repartition
from reports import CheckReport
from sampler import (THETA, SampleChain, SamplerConfig, batch_means, estimate_moments, sample,
                     seed_sequence)
from semigroup import EvolvedPotential, evolved_grad
from tracepoly import Word

logger = logging.getLogger('FreeGibbs.transport')

INF = math.inf


@dataclass
class TransportConfig:
    """
    Integration and budget settings for transport maps.

    Args:
        step_scale: Step h is chosen with h·max(C_s, 1) ≤ step_scale
        t_initial: First truncation time of the doubling search
        t_cap: Largest truncation time
        budget: Target total budget per evaluated point
        tail_fraction: Share of the budget the truncation tail may use
        sampler: Inner conditioned chains for D_xṼ_s
        outer: Chains of the model itself (moments, check samples)
        outer_samples: Model states used by the checks
        n_se: Standard errors counted in a budget
        seed: Master seed
        threads: Worker pool size for independent trajectories
        crn: Reuse one inner seed along each trajectory
        error_estimate: Estimate the ODE error by step doubling
        enforce_budget: Raise TransportError when a budget exceeds `budget`
    """
    step_scale: float = 0.25
    t_initial: float = 4.0
    t_cap: float = 64.0
    budget: float = 0.05
    tail_fraction: float = 0.1
    sampler: SamplerConfig = field(default_factory=SamplerConfig.inner)
    outer: SamplerConfig = field(default_factory=SamplerConfig.quick)
    outer_samples: int = 100
    n_se: float = 4.0
    seed: int = 0
    threads: int = 1
    crn: bool = True
    error_estimate: bool = True
    enforce_budget: bool = False

    def __post_init__(self):
        if not 0 < self.step_scale <= 0.25:
            raise TransportError(f"Invalid step_scale: {self.step_scale} (must be in (0, 0.25])")
        if not 0 < self.t_initial <= self.t_cap:
            raise TransportError(f"Invalid truncation range: [{self.t_initial}, {self.t_cap}] "
                                 f"(must have 0 < t_initial <= t_cap)")
        if self.budget <= 0:
            raise TransportError(f"Invalid budget: {self.budget} (must be > 0)")
        if not 0 < self.tail_fraction < 1:
            raise TransportError(f"Invalid tail_fraction: {self.tail_fraction} (must be in (0, 1))")
        if self.outer_samples < 4:
            raise TransportError(f"Invalid outer_samples: {self.outer_samples} (must be >= 4)")
        if self.threads < 1:
            raise TransportError(f"Invalid threads: {self.threads} (must be >= 1)")

    @classmethod
    def quick(cls, **kwargs) -> 'TransportConfig':
        defaults = dict(t_cap=32.0, outer_samples=40, budget=0.1)
        defaults.update(kwargs)
        return cls(**defaults)


def condition_constant(V: PotentialSpec) -> float:
    """K = max(C, 1/c)."""
    return max(V.C, 1.0 / V.c)


def _decay(s: float) -> float:
    return 0.0 if math.isinf(s) else math.exp(-s / 2.0)


def lipschitz_bounds(V: PotentialSpec, s: float, t: float) -> Dict[str, float]:
    """Seminorm bounds for F̃_{s,t}: dx, dy, full and deviation from π₁."""
    c, C = V.c, V.C
    K = condition_constant(V)
    gap = abs(_decay(s) - _decay(t))
    return {
        'dx': K ** 0.5,
        'dy': (C / c - 1.0) * max(C, 1.0 / C) ** 1.5 * gap,
        'full': K ** 3.5,
        'deviation': (K ** 3 - 1.0) * K ** 0.5 * gap,
    }


def _tuple_norm(x: np.ndarray, y: Optional[np.ndarray]) -> np.ndarray:
    total = norm2(x) ** 2
    if y is not None and y.shape[-3]:
        total = total + norm2(y) ** 2
    return np.sqrt(total)


# ------------------------------------------------------------------
# Model moments used by the truncation tails
# ------------------------------------------------------------------

@dataclass
class ModelMoments:
    """E(X, Y) as a matrix tuple with Var X = E‖X − EX‖₂² and Var Y."""
    mean: np.ndarray
    var_x: float
    var_y: float
    m: int

    @property
    def mean_x(self) -> np.ndarray:
        return self.mean[:self.m]

    @property
    def mean_y(self) -> np.ndarray:
        return self.mean[self.m:]

    @classmethod
    def gaussian(cls, V: PotentialSpec, N: int) -> 'ModelMoments':
        q = V.as_quadratic()
        if q is None:
            raise TransportError(f"{V.label} is not Gaussian")
        cov = q.covariance()
        return cls(q.mean_hint(N), float(np.trace(cov[:V.m, :V.m])),
                   float(np.trace(cov[V.m:, V.m:])), V.m)

    @classmethod
    def from_chain(cls, chain: SampleChain, m: int) -> 'ModelMoments':
        states = chain.flat()
        mean = states.mean(axis=0)
        spread = norm2(states[:, :m] - mean[:m]) ** 2
        var_y = float(np.mean(norm2(states[:, m:] - mean[m:]) ** 2)) if states.shape[1] > m else 0.0
        return cls(mean, float(np.mean(spread)), var_y, m)

    def to_dict(self) -> Dict[str, Any]:
        return {'mean_x_norm': float(norm2(self.mean_x)), 'var_x': self.var_x, 'var_y': self.var_y}


def model_moments(V: PotentialSpec, N: int, cfg: TransportConfig,
                  chain: Optional[SampleChain] = None) -> ModelMoments:
    if V.as_quadratic() is not None:
        return ModelMoments.gaussian(V, N)
    if chain is None:
        chain = sample(V, N, cfg.outer)
    return ModelMoments.from_chain(chain, V.m)


def tail_to_infinity(V: PotentialSpec, z: np.ndarray, y: Optional[np.ndarray], T: float,
                     moments: ModelMoments) -> np.ndarray:
    """
    Bound on ‖F̃_{∞,t} − F̃_{T,t}‖₂ at a point with z = F̃_{T,t}(x, y):
        e^{−T/2}‖EX‖ + L e^{−T/2}(‖(z − e^{−T/2}EX, y − EY)‖ + σ_T),
    with L = (K³ − 1)K^{1/2} and σ_T² = e^{−T}Var X + (1 − e^{−T})m + Var Y.
    """
    K = condition_constant(V)
    L = (K ** 3 - 1.0) * K ** 0.5
    d = math.exp(-T / 2.0)
    mean_norm = float(norm2(moments.mean_x))
    centred = _tuple_norm(z - d * moments.mean_x, None if y is None else y - moments.mean_y)
    sigma = math.sqrt(math.exp(-T) * moments.var_x + -math.expm1(-T) * V.m + moments.var_y)
    return d * mean_norm + L * d * (centred + sigma)


def tail_from_infinity(V: PotentialSpec, x: np.ndarray, y: Optional[np.ndarray], T: float,
                       moments: ModelMoments) -> np.ndarray:
    """
    Bound on ‖F̃_{s,∞} − F̃_{s,T}‖₂ at (x, y):
        K^{1/2} e^{−T/2}‖EX‖ + e^{−T/2}(K³ − 1)K (‖(x, y − EY)‖ + (m + Var Y)^{1/2}).
    """
    K = condition_constant(V)
    d = math.exp(-T / 2.0)
    centred = _tuple_norm(x, None if y is None else y - moments.mean_y)
    return (K ** 0.5 * d * float(norm2(moments.mean_x))
            + d * (K ** 3 - 1.0) * K * (centred + math.sqrt(V.m + moments.var_y)))


# ------------------------------------------------------------------
# ODE integration
# ------------------------------------------------------------------

def step_nodes(ep: EvolvedPotential, a: float, b: float, step_scale: float) -> np.ndarray:
    """
    Times from a to b with h·max(C_s, 1) ≤ step_scale on each step, C_s the
    upper window of Ṽ_s on the step. The step count is even so the nodes
    pair up for step doubling.
    """
    nodes = [a]
    s = a
    direction = 1.0 if b >= a else -1.0
    while direction * (b - s) > 1e-12:
        h0 = step_scale / max(ep.window(s)[1], 1.0)
        lower = min(s, max(s + direction * h0, min(a, b)))
        h = min(step_scale / max(ep.window(lower)[1], 1.0), h0, abs(b - s))
        s = b if abs(b - s - direction * h) < 1e-12 else s + direction * h
        nodes.append(s)
    if (len(nodes) - 1) % 2:
        nodes.insert(-1, 0.5 * (nodes[-2] + nodes[-1]))
    return np.array(nodes)


class _GradientCalls:
    """D_xṼ_s estimates along one trajectory; one seed (crn) or a fresh seed per call."""

    def __init__(self, ep: EvolvedPotential, y: Optional[np.ndarray], seed: np.random.SeedSequence,
                 crn: bool):
        self.ep = ep
        self.y = y
        self.seed = seed
        self.crn = crn
        self._stream = seed_sequence(seed)
        self.calls = 0

    def __call__(self, s: float, z: np.ndarray) -> Tuple[np.ndarray, float]:
        self.calls += 1
        seed = self.seed if self.crn else self._stream.spawn(1)[0]
        g, se = evolved_grad(self.ep, s, z, self.y, seed)
        return 0.5 * (g - z), 0.5 * se


def _rk4(nodes: np.ndarray, x: np.ndarray, rhs: _GradientCalls) -> Tuple[np.ndarray, float]:
    """Integrate over the nodes; returns the end point and Σ|h|·se of the right side."""
    z = x
    mc = 0.0
    for s, s_next in zip(nodes[:-1], nodes[1:]):
        h = s_next - s
        k1, e1 = rhs(s, z)
        k2, e2 = rhs(s + h / 2, z + h / 2 * k1)
        k3, e3 = rhs(s + h / 2, z + h / 2 * k2)
        k4, e4 = rhs(s_next, z + h * k3)
        z = z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        mc += abs(h) * max(e1, e2, e3, e4)
        logger.debug("ode: s=%.4f h=%.4f se=%.3g", s, h, max(e1, e2, e3, e4))
    return z, mc


@dataclass
class _Segment:
    point: np.ndarray
    ode_error: np.ndarray
    mc_error: float
    steps: int


def _integrate(ep: EvolvedPotential, a: float, b: float, x: np.ndarray, y: Optional[np.ndarray],
               seed: np.random.SeedSequence, cfg: TransportConfig) -> _Segment:
    nodes = step_nodes(ep, a, b, cfg.step_scale)
    K = condition_constant(ep.base)
    fine, mc = _rk4(nodes, x, _GradientCalls(ep, y, seed, cfg.crn))
    ode = np.zeros(x.shape[:-3])
    if cfg.error_estimate and len(nodes) > 2:
        coarse, _ = _rk4(nodes[::2], x, _GradientCalls(ep, y, seed, cfg.crn))
        ode = norm2(fine - coarse) / 15.0
    return _Segment(fine, ode, cfg.n_se * K ** 0.5 * mc, len(nodes) - 1)


# ------------------------------------------------------------------
# Maps
# ------------------------------------------------------------------

@dataclass
class MapEvaluation:
    """Transcript of one batched evaluation of F̃_{s,t}."""
    s: float
    t: float
    x: np.ndarray
    y: Optional[np.ndarray]
    point: np.ndarray
    ode_error: np.ndarray
    mc_error: np.ndarray
    tail: np.ndarray
    T: Optional[float]
    steps: int

    @property
    def budget(self) -> np.ndarray:
        return self.ode_error + self.mc_error + self.tail

    @property
    def max_budget(self) -> float:
        return float(np.max(self.budget)) if np.size(self.budget) else 0.0

    def to_dict(self, include_points: bool = True) -> Dict[str, Any]:
        data = {
            's': self.s, 't': self.t, 'T': self.T, 'steps': self.steps,
            'budget': self.budget, 'ode_error': self.ode_error,
            'mc_error': self.mc_error, 'tail': self.tail,
        }
        if include_points:
            data.update(x=self.x, y=self.y, point=self.point)
        return data


def _check_times(s: float, t: float) -> None:
    for name, value in (('s', s), ('t', t)):
        if math.isnan(value) or value < 0:
            raise TransportError(f"Invalid endpoint {name}: {value} (must be in [0, inf])")


def _trajectory(ep: EvolvedPotential, s: float, t: float, x: np.ndarray, y: Optional[np.ndarray],
                cfg: TransportConfig, seed: np.random.SeedSequence,
                moments: Optional[ModelMoments]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray,
                                                          Optional[float], int]:
    V = ep.base
    K = condition_constant(V)
    target = cfg.tail_fraction * cfg.budget
    batch = x.shape[:-3]
    if math.isinf(t):
        T = cfg.t_initial
        while T <= s:
            T *= 2.0
        tail = tail_from_infinity(V, x, y, T, moments)
        while np.max(tail) >= target and T < cfg.t_cap:
            T = min(2.0 * T, cfg.t_cap)
            tail = tail_from_infinity(V, x, y, T, moments)
        seg = _integrate(ep, T, s, x, y, seed, cfg)
        return seg.point, seg.ode_error, np.full(batch, seg.mc_error), np.broadcast_to(tail, batch), T, seg.steps
    if math.isinf(s):
        T = cfg.t_initial
        while T <= t:
            T *= 2.0
        seg = _integrate(ep, t, T, x, y, seed, cfg)
        point, ode, mc, steps = seg.point, seg.ode_error, seg.mc_error, seg.steps
        tail = tail_to_infinity(V, point, y, T, moments)
        while np.max(tail) >= target and T < cfg.t_cap:
            T_next = min(2.0 * T, cfg.t_cap)
            seg = _integrate(ep, T, T_next, point, y, seed, cfg)
            point = seg.point
            ode = K ** 0.5 * ode + seg.ode_error
            mc = K ** 0.5 * mc + seg.mc_error
            steps += seg.steps
            T = T_next
            tail = tail_to_infinity(V, point, y, T, moments)
        return point, ode, np.full(batch, mc), np.broadcast_to(tail, batch), T, steps
    seg = _integrate(ep, t, s, x, y, seed, cfg)
    return seg.point, seg.ode_error, np.full(batch, seg.mc_error), np.zeros(batch), None, seg.steps


def integrate_map(ep: EvolvedPotential, s_target: float, t_start: float, x: np.ndarray,
                  y: Optional[np.ndarray] = None, cfg: Optional[TransportConfig] = None,
                  seed: Any = None, moments: Optional[ModelMoments] = None) -> MapEvaluation:
    """
    Evaluate F̃_{s,t}(x, y) for s = s_target, t = t_start ∈ [0, ∞].

    Closed-form (Gaussian) models integrate the whole batch at once; sampled
    models integrate point by point, point i using the i-th child of the seed.
    """
    cfg = cfg or TransportConfig()
    if not ep.renormalized:
        raise TransportError("Transport maps need the renormalized evolved potential")
    _check_times(s_target, t_start)
    V = ep.base
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim < 3 or x.shape[-3] != V.m:
        raise TransportError(f"Invalid x shape: {x.shape} (must be (..., {V.m}, N, N))")
    if V.n:
        if y is None:
            raise TransportError(f"Missing y: {V.label} has {V.n} conditioning variables")
        y = np.broadcast_to(np.asarray(y, dtype=np.complex128), x.shape[:-3] + (V.n,) + x.shape[-2:])
    else:
        y = None
    batch = x.shape[:-3]
    N = x.shape[-1]
    seed = seed_sequence(cfg.seed if seed is None else seed)

    if s_target == t_start:
        zero = np.zeros(batch)
        return MapEvaluation(s_target, t_start, x, y, x.copy(), zero, zero, zero, None, 0)
    if math.isinf(s_target) or math.isinf(t_start):
        moments = moments or model_moments(V, N, cfg)

    if ep.uses_closed_form():
        point, ode, mc, tail, T, steps = _trajectory(ep, s_target, t_start, x, y, cfg, seed, moments)
    else:
        flat_x = x.reshape((-1,) + x.shape[-3:])
        flat_y = None if y is None else y.reshape((-1,) + y.shape[-3:])
        children = seed.spawn(flat_x.shape[0])

        def one(i):
            return _trajectory(ep, s_target, t_start, flat_x[i], None if flat_y is None else flat_y[i],
                               cfg, children[i], moments)

        if cfg.threads == 1:
            results = [one(i) for i in range(flat_x.shape[0])]
        else:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(one, range(flat_x.shape[0])))
        point = np.stack([r[0] for r in results]).reshape(x.shape)
        ode, mc, tail = (np.array([float(r[i]) for r in results]).reshape(batch) for i in (1, 2, 3))
        T = max((r[4] for r in results if r[4] is not None), default=None)
        steps = max(r[5] for r in results)

    evaluation = MapEvaluation(s_target, t_start, x, y, point, np.asarray(ode), np.asarray(mc),
                               np.asarray(tail), T, steps)
    if T is not None:
        logger.info("F̃_{%s,%s} on %s: T=%.0f, tail %.3g, budget %.3g", s_target, t_start, V.label,
                    T, float(np.max(tail)), evaluation.max_budget)
        if float(np.max(tail)) >= cfg.tail_fraction * cfg.budget:
            logger.warning("Truncation tail %.3g is not below %.0f%% of the budget %.3g at T=%.0f",
                           float(np.max(tail)), 100 * cfg.tail_fraction, cfg.budget, T)
    if cfg.enforce_budget and evaluation.max_budget > cfg.budget:
        logger.error("Transport budget %.3g exceeds %.3g", evaluation.max_budget, cfg.budget)
        raise TransportError(f"Budget exceeded: {evaluation.max_budget:.3g} > {cfg.budget:.3g}")
    return evaluation


class TransportMap:
    """
    F̃_{s,t} for a model V, evaluated on demand.

    TransportMap(V, inf, 0) is F (model to GUE); TransportMap(V, 0, inf) is G.
    Evaluation is deterministic given the seed.
    """

    def __init__(self, V: PotentialSpec, s: float, t: float, cfg: Optional[TransportConfig] = None,
                 exact: Optional[bool] = None, moments: Optional[ModelMoments] = None):
        _check_times(s, t)
        self.V = V
        self.s = float(s)
        self.t = float(t)
        self.cfg = cfg or TransportConfig()
        self.ep = EvolvedPotential(V, renormalized=True, sampler_cfg=self.cfg.sampler, exact=exact)
        self.moments = moments
        self._moments_cache: Dict[int, ModelMoments] = {}
        self.transcripts: List[MapEvaluation] = []

    @classmethod
    def forward(cls, V: PotentialSpec, cfg: Optional[TransportConfig] = None, **kwargs) -> 'TransportMap':
        """F = F̃_{∞,0}."""
        return cls(V, INF, 0.0, cfg, **kwargs)

    @classmethod
    def backward(cls, V: PotentialSpec, cfg: Optional[TransportConfig] = None, **kwargs) -> 'TransportMap':
        """G = F̃_{0,∞}."""
        return cls(V, 0.0, INF, cfg, **kwargs)

    def moments_for(self, N: int) -> ModelMoments:
        if self.moments is not None:
            return self.moments
        if N not in self._moments_cache:
            self._moments_cache[N] = model_moments(self.V, N, self.cfg)
        return self._moments_cache[N]

    def evaluate(self, x: np.ndarray, y: Optional[np.ndarray] = None, seed: Any = None) -> MapEvaluation:
        x = np.asarray(x)
        moments = None
        if math.isinf(self.s) != math.isinf(self.t):
            moments = self.moments_for(x.shape[-1])
        evaluation = integrate_map(self.ep, self.s, self.t, x, y, self.cfg, seed, moments)
        self.transcripts.append(evaluation)
        return evaluation

    def __call__(self, x: np.ndarray, y: Optional[np.ndarray] = None) -> np.ndarray:
        return self.evaluate(x, y).point

    def bounds(self) -> Dict[str, float]:
        return lipschitz_bounds(self.V, self.s, self.t)

    def get_info(self) -> Dict[str, Any]:
        return {'potential': self.V.label, 's': self.s, 't': self.t,
                'closed_form': self.ep.uses_closed_form(), 'bounds': self.bounds(),
                'evaluations': len(self.transcripts)}


# ------------------------------------------------------------------
# Samples of the interpolated laws
# ------------------------------------------------------------------

def interpolated_states(states: np.ndarray, m: int, t: float, rng: np.random.Generator) -> np.ndarray:
    """(X̃_t, Y) = (e^{−t/2}X + (1 − e^{−t})^{1/2}S, Y) for model states (X, Y)."""
    out = np.array(states, dtype=np.complex128)
    N = states.shape[-1]
    if t == 0:
        return out
    noise = sample_gue(rng, m, N, size=states.shape[:-3])
    out[..., :m, :, :] = _decay(t) * states[..., :m, :, :] + math.sqrt(-math.expm1(-t)) * noise
    return out


def _check_states(V: PotentialSpec, cfg: TransportConfig, chain: Optional[SampleChain],
                  N: Optional[int]) -> Tuple[SampleChain, np.ndarray]:
    if chain is None:
        if N is None:
            raise TransportError("Either a chain or the matrix size N is required")
        chain = sample(V, N, cfg.outer)
    return chain, outer_states(chain, cfg.outer_samples)


def _as_chain(states: np.ndarray, N: int, label: str) -> SampleChain:
    return SampleChain(states=states[None], acceptance=np.ones(1), steps=np.zeros(1), N=N, label=label)


def _word_slack(word: Word, radius: float, budget: float) -> float:
    """|τ(w(a)) − τ(w(b))| ≤ deg(w) R^{deg(w)−1} ‖a − b‖₂ for ‖a‖∞, ‖b‖∞ ≤ R."""
    degree = len(word)
    if degree == 0:
        return 0.0
    return degree * radius ** (degree - 1) * budget


# ------------------------------------------------------------------
# Checks
# ------------------------------------------------------------------

def pushforward_check(tmap: TransportMap, words: Sequence[Sequence[int]], cfg: Optional[TransportConfig] = None,
                      chain: Optional[SampleChain] = None, N: Optional[int] = None,
                      oracle: Optional[Dict[Word, float]] = None, rel_tol: float = 0.0) -> CheckReport:
    """
    Moments of (F̃_{s,t}(X̃_t, Y), Y) against (X̃_s, Y), or against an oracle.

    A word passes when the difference is within n_se combined standard
    errors, rel_tol·|oracle| and the map budget carried through the word.
    """
    cfg = cfg or tmap.cfg
    V = tmap.V
    chain, states = _check_states(V, cfg, chain, N)
    N = chain.N
    rng_source, rng_target = (np.random.default_rng(s) for s in seed_sequence((cfg.seed, 11)).spawn(2))
    source = interpolated_states(states, V.m, tmap.t, rng_source)
    ev = tmap.evaluate(source[:, :V.m], source[:, V.m:] if V.n else None)
    mapped = source.copy()
    mapped[:, :V.m] = ev.point
    mapped_table = estimate_moments(_as_chain(mapped, N, f"pushforward({V.label})"), words)
    radius = max(1.0, float(np.max(opnorm(mapped))))
    if oracle is None:
        target = interpolated_states(states, V.m, tmap.s, rng_target)
        target_table = estimate_moments(_as_chain(target, N, f"target({V.label})"), words)
        radius = max(radius, float(np.max(opnorm(target))))
    budget = ev.max_budget
    rows = []
    passed = True
    for word in words:
        word = tuple(word)
        got = mapped_table.estimate(word)
        se = mapped_table.se(word)
        if oracle is not None:
            if word not in oracle:
                continue
            want = complex(oracle[word])
            allowance = max(cfg.n_se * se, rel_tol * abs(want))
        else:
            want = target_table.estimate(word)
            allowance = cfg.n_se * math.hypot(se, target_table.se(word))
        allowance += _word_slack(word, radius, budget)
        ok = abs(got - want) <= allowance + 1e-12
        passed &= ok
        rows.append({'word': word, 'mapped': got, 'target': want, 'allowance': allowance, 'passed': ok})
    logger.info("Pushforward of %s: %d words, %s", V.label, len(rows), "PASS" if passed else "FAIL")
    return CheckReport('pushforward', bool(passed),
                       {'s': tmap.s, 't': tmap.t, 'T': ev.T, 'map_budget': budget, 'radius': radius,
                        'words': rows})


def audit_pairs(V: PotentialSpec, N: int, pairs: int, scale: float,
                rng: np.random.Generator) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """
    Base points around the model mean with three partner sets: x moved,
    y moved, both moved.
    """
    mean = V.mean_hint(N)
    base = mean + sample_gue(rng, V.k, N, size=(pairs,))
    moved_x = base.copy()
    moved_x[:, :V.m] += scale * sample_gue(rng, V.m, N, size=(pairs,))
    out = {'dx': (base, moved_x)}
    if V.n:
        moved_y = base.copy()
        moved_y[:, V.m:] += scale * sample_gue(rng, V.n, N, size=(pairs,))
        moved_xy = moved_x.copy()
        moved_xy[:, V.m:] = moved_y[:, V.m:]
        out['dy'] = (base, moved_y)
        out['full'] = (base, moved_xy)
    return out


def lipschitz_audit(tmap: TransportMap, N: int, pairs: int = 4, scale: float = 1.0,
                    cfg: Optional[TransportConfig] = None) -> CheckReport:
    """
    Empirical ‖F̃‖_{Lip,dx}, ‖F̃‖_{Lip,dy}, ‖F̃‖_Lip and ‖F̃ − π₁‖_Lip on
    sampled pairs against their bounds; the slack is the two points' budgets
    over their distance.
    """
    cfg = cfg or tmap.cfg
    V = tmap.V
    rng = np.random.default_rng(seed_sequence((cfg.seed, 13)))
    bounds = tmap.bounds()
    sets = audit_pairs(V, N, pairs, scale, rng)
    observed = {'dx': 0.0, 'dy': 0.0, 'full': 0.0, 'deviation': 0.0}
    excess = {}
    for kind, (a, b) in sets.items():
        both = np.concatenate([a, b])
        ev = tmap.evaluate(both[:, :V.m], both[:, V.m:] if V.n else None)
        fa, fb = ev.point[:pairs], ev.point[pairs:]
        slack_num = ev.budget[:pairs] + ev.budget[pairs:]
        dist = _tuple_norm(a[:, :V.m] - b[:, :V.m], (a[:, V.m:] - b[:, V.m:]) if V.n else None)
        dist = np.maximum(dist, 1e-300)
        ratio = norm2(fa - fb) / dist
        deviation = norm2((fa - a[:, :V.m]) - (fb - b[:, :V.m])) / dist
        slack = slack_num / dist + 1e-12
        for name, values in ((kind, ratio), ('full', ratio), ('deviation', deviation)):
            observed[name] = max(observed[name], float(np.max(values)))
            excess[name] = max(excess.get(name, -INF), float(np.max(values - bounds[name] - slack)))
    passed = all(value <= 0 for value in excess.values())
    return CheckReport('lipschitz_audit', passed,
                       {'observed': observed, 'bounds': bounds, 'excess': excess, 's': tmap.s, 't': tmap.t})


def talagrand_check(V: PotentialSpec, cfg: Optional[TransportConfig] = None,
                    chain: Optional[SampleChain] = None, N: Optional[int] = None,
                    qcfg: Optional[QuadratureConfig] = None,
                    tmap: Optional[TransportMap] = None) -> CheckReport:
    """E‖F(X, Y) − X‖₂² ≤ 2|h_g^(N)(X | Y)| within the combined budget."""
    cfg = cfg or TransportConfig()
    chain, states = _check_states(V, cfg, chain, N)
    tmap = tmap or TransportMap.forward(V, cfg)
    ev = tmap.evaluate(states[:, :V.m], states[:, V.m:] if V.n else None)
    d2 = norm2(ev.point - states[:, :V.m]) ** 2
    bm = batch_means(d2[None])
    lhs = float(bm.mean)
    hg = entropy_g(V, qcfg or QuadratureConfig.quick(), chain)
    rhs = 2.0 * abs(hg.value)
    map_slack = 2.0 * math.sqrt(max(lhs, 0.0)) * ev.max_budget + ev.max_budget ** 2
    slack = cfg.n_se * float(bm.se) + 2.0 * hg.budget + map_slack
    passed = lhs <= rhs + slack
    logger.info("Talagrand on %s: %.6f <= %.6f (slack %.3g)", V.label, lhs, rhs, slack)
    return CheckReport('talagrand', passed,
                       {'lhs': lhs, 'rhs': rhs, 'slack': slack, 'margin': rhs - lhs,
                        'gap': abs(rhs - lhs), 'lhs_se': float(bm.se), 'h_g_budget': hg.budget,
                        'map_budget': ev.max_budget, 'T': ev.T})


def inverse_map_check(F_map: TransportMap, G_map: TransportMap, x: np.ndarray,
                      y: Optional[np.ndarray] = None) -> CheckReport:
    """‖G(F(x, y), y) − x‖₂ against budget(G) + ‖G‖_{Lip,dx}·budget(F)."""
    forward = F_map.evaluate(x, y)
    back = G_map.evaluate(forward.point, y)
    error = norm2(back.point - np.asarray(x))
    allowance = back.budget + G_map.bounds()['dx'] * forward.budget + 1e-10
    passed = bool(np.all(error <= allowance))
    return CheckReport('inverse_map', passed,
                       {'error': error, 'allowance': allowance, 'max_error': float(np.max(error))})


def group_law_check(V: PotentialSpec, s: float, t: float, u: float, x: np.ndarray,
                    y: Optional[np.ndarray] = None, cfg: Optional[TransportConfig] = None) -> CheckReport:
    """F̃_{s,t}∘F̃_{t,u} = F̃_{s,u} at the given points within the three budgets."""
    cfg = cfg or TransportConfig()
    inner_map = TransportMap(V, t, u, cfg)
    outer_map = TransportMap(V, s, t, cfg)
    direct_map = TransportMap(V, s, u, cfg)
    first = inner_map.evaluate(x, y)
    composed = outer_map.evaluate(first.point, y)
    direct = direct_map.evaluate(x, y)
    error = norm2(composed.point - direct.point)
    allowance = (composed.budget + outer_map.bounds()['dx'] * first.budget + direct.budget + 1e-10)
    return CheckReport('group_law', bool(np.all(error <= allowance)),
                       {'times': (s, t, u), 'error': error, 'allowance': allowance})


def crn_bias_check(tmap: TransportMap, x: np.ndarray, y: Optional[np.ndarray] = None) -> CheckReport:
    """Re-run a subsample with independent inner noise; the maps agree within both budgets."""
    frozen = tmap.evaluate(x, y)
    free = TransportMap(tmap.V, tmap.s, tmap.t, replace(tmap.cfg, crn=False),
                        moments=tmap.moments).evaluate(x, y)
    error = norm2(frozen.point - free.point)
    allowance = frozen.budget + free.budget + 1e-10
    return CheckReport('crn_bias', bool(np.all(error <= allowance)),
                       {'error': error, 'allowance': allowance})


def dy_decay_profile(V: PotentialSpec, times: Sequence[float], N: int, pairs: int = 3,
                     cfg: Optional[TransportConfig] = None) -> CheckReport:
    """
    Empirical ‖F̃_{∞,t}‖_{Lip,dy} for increasing t: the values track the
    bound (C/c − 1)max(C, 1/C)^{3/2}e^{−t/2} and do not grow.
    """
    cfg = cfg or TransportConfig()
    if not V.n:
        raise TransportError(f"{V.label} has no y-block")
    rng = np.random.default_rng(seed_sequence((cfg.seed, 17)))
    a, b = audit_pairs(V, N, pairs, 1.0, rng)['dy']
    values, bounds = [], []
    passed = True
    for t in sorted(times):
        tmap = TransportMap(V, INF, t, cfg)
        both = np.concatenate([a, b])
        ev = tmap.evaluate(both[:, :V.m], both[:, V.m:])
        dist = norm2(a[:, V.m:] - b[:, V.m:])
        slack = (ev.budget[:pairs] + ev.budget[pairs:]) / dist
        ratio = norm2(ev.point[:pairs] - ev.point[pairs:]) / dist
        bound = tmap.bounds()['dy']
        values.append(float(np.max(ratio)))
        bounds.append(bound)
        passed &= bool(np.all(ratio <= bound + slack + 1e-12))
        if len(values) > 1:
            passed &= values[-1] <= values[-2] + float(np.max(slack))
    return CheckReport('dy_decay', passed, {'times': sorted(times), 'observed': values, 'bounds': bounds})


# ------------------------------------------------------------------
# Triangular transport
# ------------------------------------------------------------------

def stage_potential(V: PotentialSpec, j: int, sampler_cfg: Optional[SamplerConfig] = None,
                    seed: int = 0) -> PotentialSpec:
    """Law of (X_j, X_0, ..., X_{j−1}) with x-block {X_j}."""
    order = [j] + list(range(j))
    if V.as_quadratic() is not None or j < V.k - 1:
        return marginal(V, order, m=1, n=j, sampler_cfg=sampler_cfg, seed=seed)
    if order == list(range(V.k)):
        return repartition(V, 1)
    P = np.eye(V.k)[order]
    return LinearImagePotential(V, P, m=1, n=j, label=f"stage{j}({V.label})")


class TriangularMap:
    """
    Φ(x) = (Φ_0(x_0), Φ_1(x_0, x_1), ...), stage j being F for the law of
    X_j given X_0..X_{j−1}. The inverse Ψ runs the G maps stage by stage.
    """

    def __init__(self, V: PotentialSpec, stages: List[PotentialSpec], forward: List[TransportMap],
                 backward: List[TransportMap]):
        self.V = V
        self.stages = stages
        self.forward_maps = forward
        self.backward_maps = backward
        self.transcripts: List[Dict[str, Any]] = []

    @property
    def k(self) -> int:
        return len(self.stages)

    def _run(self, maps: List[TransportMap], x: np.ndarray, inverse: bool) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.complex128)
        if x.shape[-3] != self.k:
            raise TransportError(f"Invalid tuple length: {x.shape[-3]} (must be {self.k})")
        out = np.empty_like(x)
        budgets = np.zeros(x.shape[:-3] + (self.k,))
        for j, tmap in enumerate(maps):
            given = out[..., :j, :, :] if inverse else x[..., :j, :, :]
            try:
                ev = tmap.evaluate(x[..., j:j + 1, :, :], given if j else None)
            except FreeGibbsError as exc:
                logger.error("Triangular stage %d failed: %s", j, exc)
                raise TransportError(str(exc), stage=j) from exc
            out[..., j, :, :] = ev.point[..., 0, :, :]
            budgets[..., j] = ev.budget
            self.transcripts.append({'stage': j, 'inverse': inverse, 'evaluation': ev.to_dict(False)})
        return out, budgets

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Φ(x) and per-stage budgets."""
        return self._run(self.forward_maps, x, inverse=False)

    def inverse(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Ψ(u): x_j = G_j(u_j; x_0, ..., x_{j−1})."""
        return self._run(self.backward_maps, u, inverse=True)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[0]

    def get_info(self) -> Dict[str, Any]:
        return {'potential': self.V.label, 'stages': [s.label for s in self.stages]}


def triangular_transport(V: PotentialSpec, cfg: Optional[TransportConfig] = None,
                         chain: Optional[SampleChain] = None) -> TriangularMap:
    """
    Build Φ stage by stage. Stage j transports the law of X_j given
    X_0..X_{j−1}; its tail moments come from the model chain when given.
    """
    cfg = cfg or TransportConfig()
    stages, forward, backward = [], [], []
    for j in range(V.k):
        try:
            W = stage_potential(V, j, cfg.sampler, cfg.seed)
            moments = None
            if chain is not None and W.as_quadratic() is None:
                moments = ModelMoments.from_chain(chain.select([j] + list(range(j))), 1)
            forward.append(TransportMap.forward(W, cfg, moments=moments))
            backward.append(TransportMap.backward(W, cfg, moments=moments))
        except FreeGibbsError as exc:
            logger.error("Triangular stage %d failed: %s", j, exc)
            raise TransportError(str(exc), stage=j) from exc
        stages.append(W)
        logger.info("Triangular stage %d: %s", j, W.label)
    return TriangularMap(V, stages, forward, backward)


def triangular_dependency_check(tri: TriangularMap, x: np.ndarray, rng: np.random.Generator) -> CheckReport:
    """Perturbing x_k leaves Φ_j(x) unchanged for j < k (bit for bit)."""
    x = np.asarray(x, dtype=np.complex128)
    base, _ = tri.evaluate(x)
    violations = []
    for k in range(1, tri.k):
        moved = x.copy()
        moved[..., k, :, :] += sample_gue(rng, 1, x.shape[-1], size=x.shape[:-3])[..., 0, :, :]
        out, _ = tri.evaluate(moved)
        if not np.array_equal(out[..., :k, :, :], base[..., :k, :, :]):
            violations.append(k)
    return CheckReport('triangular_dependency', not violations, {'violations': violations})


def triangular_checks(tri: TriangularMap, chain: SampleChain, cfg: Optional[TransportConfig] = None,
                      expected: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> List[CheckReport]:
    """
    Staged pushforward of Φ(X) to GUE (first and second moments per stage),
    the operator-norm audit ‖Φ_j(X) − (X_j − τ(X_j))‖∞ ≤ (K³ − 1)KΘ, the
    round trip Ψ∘Φ = id and, when given, agreement with a closed-form Φ.
    """
    cfg = cfg or TransportConfig()
    V = tri.V
    states = outer_states(chain, cfg.outer_samples)
    N = chain.N
    phi, budgets = tri.evaluate(states)
    reports = []

    table = estimate_moments(_as_chain(phi, N, f"Φ({V.label})"),
                             [(j,) for j in range(tri.k)] + [(j, j) for j in range(tri.k)]
                             + [(i, j) for i in range(tri.k) for j in range(i + 1, tri.k)])
    radius = max(1.0, float(np.max(opnorm(phi))))
    worst = float(np.max(budgets)) if budgets.size else 0.0
    stage_ok = []
    for j in range(tri.k):
        ok = True
        for word in [(j,), (j, j)] + [(i, j) for i in range(j)]:
            want = 1.0 if len(word) == 2 and word[0] == word[1] else 0.0
            allowance = cfg.n_se * table.se(word) + _word_slack(word, radius, worst) + 1e-12
            ok &= abs(table.estimate(word) - want) <= allowance
        stage_ok.append(bool(ok))
    reports.append(CheckReport('triangular_pushforward', all(stage_ok), {'stages': stage_ok}))

    K = condition_constant(V)
    bound = (K ** 3 - 1.0) * K * THETA
    centred = states - tau(states)[..., None, None] * np.eye(N)
    spectral = opnorm(phi - centred)
    slack = math.sqrt(N) * budgets
    margin = float(np.min(bound + slack - spectral))
    reports.append(CheckReport('triangular_opnorm', margin >= 0,
                               {'bound': bound, 'max_observed': float(np.max(spectral)), 'margin': margin}))

    back, back_budgets = tri.inverse(phi)
    error = norm2(back - states)
    allowance = (np.sum(back_budgets, axis=-1) + condition_constant(V) ** 0.5 * np.sum(budgets, axis=-1)
                 + 1e-10)
    reports.append(CheckReport('triangular_inverse', bool(np.all(error <= allowance)),
                               {'max_error': float(np.max(error)), 'max_allowance': float(np.max(allowance))}))

    if expected is not None:
        want = expected(states)
        gap = norm2(phi - want)
        reports.append(CheckReport('triangular_closed_form', bool(np.all(gap <= np.sum(budgets, axis=-1) + 1e-10)),
                                   {'max_gap': float(np.max(gap)), 'max_budget': float(np.max(np.sum(budgets, axis=-1)))}))
    return reports


def triangular_lipschitz_bound(V: PotentialSpec) -> float:
    """‖Φ − id‖_Lip ≤ m^{1/2}(K³ − 1)K^{1/2}."""
    K = condition_constant(V)
    return math.sqrt(V.k) * (K ** 3 - 1.0) * K ** 0.5


def triangular_talagrand_check(tri: TriangularMap, chain: SampleChain,
                               cfg: Optional[TransportConfig] = None,
                               qcfg: Optional[QuadratureConfig] = None) -> CheckReport:
    """E‖Φ(X) − X‖₂² ≤ 2 Σ_j |h_g(X_j | X_0..X_{j−1})|."""
    cfg = cfg or TransportConfig()
    states = outer_states(chain, cfg.outer_samples)
    phi, budgets = tri.evaluate(states)
    d2 = norm2(phi - states) ** 2
    bm = batch_means(d2[None])
    rhs = 0.0
    rhs_budget = 0.0
    for j, W in enumerate(tri.stages):
        hg = entropy_g(W, qcfg or QuadratureConfig.quick(), chain.select([j] + list(range(j))))
        rhs += 2.0 * abs(hg.value)
        rhs_budget += 2.0 * hg.budget
    total = np.sum(budgets, axis=-1)
    map_slack = float(np.max(2.0 * np.sqrt(d2) * total + total ** 2))
    slack = cfg.n_se * float(bm.se) + rhs_budget + map_slack
    lhs = float(bm.mean)
    return CheckReport('triangular_talagrand', lhs <= rhs + slack,
                       {'lhs': lhs, 'rhs': rhs, 'slack': slack, 'margin': rhs - lhs})
