"""
Metropolis-Adjusted Langevin Sampler

Samples μ^(N) ∝ e^{−N²V} on Hermitian tuples and estimates non-commutative
moments, Schwinger-Dyson residuals and concentration diagnostics.

Proposal (Tr-coordinate MALA with step δ/N and gradient N·DV):
    x' = x − (δ/2) DV(x) + (δ/N)^{1/2} ξ,   ξ Tr-orthonormal Hermitian noise
Potential differences for the Metropolis ratio are line integrals of DV
evaluated with a Gauss-Lobatto rule, so V itself is never needed.

Per-chain random streams come from np.random.SeedSequence(seed).spawn(chains):
chain i uses the i-th child. Reductions always run in chain order.
"""

import csv
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from errors import SamplerError
from matrices import hermitian_noise, inner, lobatto_rule, norm2, opnorm, tau
from potential import PotentialSpec, ensure_window
from reports import CheckReport, format_float
from tracepoly import Word, free_difference_quotient

logger = logging.getLogger('FreeGibbs.sampler')

GradFn = Callable[[np.ndarray], np.ndarray]
SeedLike = Union[int, Sequence[int], np.random.SeedSequence]

# Universal constant of the operator-norm concentration estimate
THETA = 6.0 * math.sqrt(math.log(7.0)) + 9.0 / (6.0 * math.sqrt(math.log(7.0)))

# Chain checkpoint container
CHECKPOINT_MAGIC = b'FGCH'
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct('<4sHIIIId')


def theta_n(N: int) -> float:
    """Finite-N constant 6(log 7)^{1/2} + 9/(6N(log 7)^{1/2})."""
    root = math.sqrt(math.log(7.0))
    return 6.0 * root + 9.0 / (6.0 * N * root)


def seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    """
    Normalize ints, tuples of ints and SeedSequences to a SeedSequence.

    A SeedSequence comes back as a fresh copy, so spawning from the result
    gives the same children however often the same seed is reused.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    if isinstance(seed, (list, tuple)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


@dataclass
class SamplerConfig:
    """
    MALA configuration.

    Args:
        step: Initial dimensionless step δ; None picks 2.7·d^{-1/3}/C
        burn_in: Iterations discarded per chain (step tuning happens here)
        n_samples: States kept per chain
        thin: Iterations between kept states
        n_chains: Independent chains
        seed: Master seed
        max_iterations: Upper bound on burn_in + n_samples·thin
        accept_band: Tuning target for the acceptance rate
        accept_tolerance: Slack around accept_band before a chain is rejected
        tune_interval: Iterations between step adjustments
        lobatto_nodes: Nodes of the line-integral rule for potential differences
        threads: Worker pool size (None: one per chain)
    """
    step: Optional[float] = None
    burn_in: int = 500
    n_samples: int = 1000
    thin: int = 1
    n_chains: int = 2
    seed: int = 0
    max_iterations: int = 1_000_000
    accept_band: Tuple[float, float] = (0.5, 0.7)
    accept_tolerance: float = 0.25
    tune_interval: int = 50
    lobatto_nodes: int = 5
    threads: Optional[int] = None

    def __post_init__(self):
        if self.step is not None and self.step <= 0:
            raise SamplerError(f"Invalid step size: {self.step} (must be > 0)")
        for name in ('n_samples', 'thin', 'n_chains', 'max_iterations', 'tune_interval'):
            if getattr(self, name) < 1:
                raise SamplerError(f"Invalid {name}: {getattr(self, name)} (must be >= 1)")
        if self.burn_in < 0:
            raise SamplerError(f"Invalid burn_in: {self.burn_in} (must be >= 0)")
        lo, hi = self.accept_band
        if not 0 < lo < hi < 1:
            raise SamplerError(f"Invalid acceptance band: {self.accept_band} (must satisfy 0 < lo < hi < 1)")
        if self.lobatto_nodes < 2:
            raise SamplerError(f"Invalid lobatto_nodes: {self.lobatto_nodes} (must be >= 2)")
        if self.burn_in + self.n_samples * self.thin > self.max_iterations:
            raise SamplerError(
                f"Chain length {self.burn_in + self.n_samples * self.thin} exceeds max_iterations {self.max_iterations}")

    @classmethod
    def quick(cls, **kwargs) -> 'SamplerConfig':
        """Short chains for tests and smoke runs."""
        defaults = dict(burn_in=300, n_samples=400, n_chains=2)
        defaults.update(kwargs)
        return cls(**defaults)

    @classmethod
    def inner(cls, **kwargs) -> 'SamplerConfig':
        """Settings for the inner chains of conditional estimators."""
        defaults = dict(burn_in=150, n_samples=150, n_chains=2, tune_interval=25, threads=1)
        defaults.update(kwargs)
        return cls(**defaults)


# ------------------------------------------------------------------
# Batch means
# ------------------------------------------------------------------

@dataclass
class BatchMeans:
    """Mean, batch-means standard error and effective sample size (elementwise)."""
    mean: Any
    se: Any
    ess: Any

    def norm_se(self) -> float:
        """‖·‖₂-norm of a matrix-tuple valued standard error."""
        se = np.asarray(self.se)
        return float(np.sqrt(np.sum(se ** 2) / se.shape[-1])) if se.ndim >= 2 else float(np.max(se))


def batch_means(values: np.ndarray) -> BatchMeans:
    """
    Batch-means estimate for values of shape (chains, n, ...).

    Each chain is cut into ⌊√n⌋-sized batches; the chain means are averaged
    and their batch-means variances combined. Complex values get
    se = (se_re² + se_im²)^{1/2}.
    """
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[None]
    if np.iscomplexobj(values):
        re = batch_means(values.real)
        im = batch_means(values.imag)
        return BatchMeans(re.mean + 1j * im.mean, np.sqrt(re.se ** 2 + im.se ** 2),
                          np.minimum(re.ess, im.ess))
    chains, n = values.shape[:2]
    size = max(1, int(math.isqrt(n)))
    count = n // size
    if count < 2:
        var_mean = np.var(values, axis=1, ddof=1 if n > 1 else 0) / n
    else:
        means = values[:, :count * size].reshape((chains, count, size) + values.shape[2:]).mean(axis=2)
        var_mean = np.var(means, axis=1, ddof=1) / count
    mean = values.mean(axis=(0, 1))
    se = np.sqrt(np.sum(var_mean, axis=0)) / chains
    total = chains * n
    spread = np.var(values.reshape((total,) + values.shape[2:]), axis=0)
    with np.errstate(divide='ignore', invalid='ignore'):
        ess = np.where(se > 0, spread / np.maximum(se, 1e-300) ** 2, total)
    ess = np.clip(ess, 1.0, total)
    return BatchMeans(mean, se, ess)


# ------------------------------------------------------------------
# Chains
# ------------------------------------------------------------------

@dataclass
class SampleChain:
    """
    MCMC output: states of shape (chains, n, k, N, N) with per-chain
    acceptance rates and tuned steps.
    """
    states: np.ndarray
    acceptance: np.ndarray
    steps: np.ndarray
    N: int
    seed: Any = 0
    label: str = ""
    _ess: Dict[str, float] = field(default_factory=dict, repr=False)

    @property
    def n_chains(self) -> int:
        return self.states.shape[0]

    @property
    def n_states(self) -> int:
        return self.states.shape[0] * self.states.shape[1]

    @property
    def k(self) -> int:
        return self.states.shape[2]

    def flat(self) -> np.ndarray:
        return self.states.reshape((-1,) + self.states.shape[2:])

    def observable(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Apply a batched observable; result shape (chains, n, ...)."""
        values = np.asarray(fn(self.flat()))
        return values.reshape(self.states.shape[:2] + values.shape[1:])

    def ess(self, name: str, fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
        """Effective sample size of a named scalar observable (cached)."""
        if name not in self._ess:
            if fn is None:
                raise SamplerError(f"Unknown observable {name!r} and no function given")
            self._ess[name] = float(np.min(batch_means(self.observable(fn)).ess))
        return self._ess[name]

    def select(self, variables: Sequence[int]) -> 'SampleChain':
        """Chain restricted to some variables (e.g. a y-marginal)."""
        return replace(self, states=self.states[:, :, list(variables)], _ess={})

    def get_info(self) -> Dict[str, Any]:
        return {
            'label': self.label,
            'N': self.N,
            'chains': self.n_chains,
            'states_per_chain': self.states.shape[1],
            'variables': self.k,
            'acceptance': self.acceptance.tolist(),
            'steps': self.steps.tolist(),
            'ess': dict(self._ess),
        }


class MalaKernel:
    """One MALA transition for a batched gradient function."""

    def __init__(self, grad_fn: GradFn, N: int, step: float, lobatto_nodes: int = 5):
        self.grad_fn = grad_fn
        self.N = N
        self.step = step
        nodes, weights = lobatto_rule(lobatto_nodes)
        self.interior = nodes[1:-1]
        self.w_end = (weights[0], weights[-1])
        self.w_interior = weights[1:-1]

    def delta_potential(self, x, gx, xp, gp) -> float:
        """V(x') − V(x) as ∫₀¹⟨DV(x + s(x'−x)), x'−x⟩₂ ds."""
        d = xp - x
        total = self.w_end[0] * inner(gx, d) + self.w_end[1] * inner(gp, d)
        if len(self.interior):
            pts = x[None] + self.interior[:, None, None, None] * d[None]
            total = total + np.dot(self.w_interior, inner(self.grad_fn(pts), d[None]))
        return float(total)

    def transition(self, x: np.ndarray, gx: np.ndarray, rng: np.random.Generator):
        N, h = self.N, self.step
        noise = hermitian_noise(rng, x.shape[:-2], N)
        xp = x - 0.5 * h * gx + math.sqrt(h / N) * noise
        gp = self.grad_fn(xp)
        forward = xp - x + 0.5 * h * gx
        backward = x - xp + 0.5 * h * gp
        log_alpha = -N * N * (self.delta_potential(x, gx, xp, gp)
                              + (float(inner(backward, backward)) - float(inner(forward, forward))) / (2.0 * h))
        if math.log(rng.uniform()) < min(0.0, log_alpha):
            return xp, gp, True
        return x, gx, False


def _initial_step(cfg: SamplerConfig, dim: int, curvature: float) -> Tuple[float, float]:
    cap = 1.98 / curvature
    step = cfg.step / curvature if cfg.step is not None else 2.7 * dim ** (-1.0 / 3.0) / curvature
    return min(step, cap), cap


def run_chain(grad_fn: GradFn, x0: np.ndarray, N: int, cfg: SamplerConfig,
              seed: np.random.SeedSequence, curvature: float = 1.0) -> Tuple[np.ndarray, float, float]:
    """
    Run one chain; returns (kept states, acceptance rate after burn-in, step).

    The step is tuned during burn-in toward cfg.accept_band and capped so that
    step·curvature < 2.
    """
    rng = np.random.default_rng(seed)
    step, cap = _initial_step(cfg, x0.size, curvature)
    kernel = MalaKernel(grad_fn, N, step, cfg.lobatto_nodes)
    x = np.array(x0, dtype=np.complex128)
    gx = grad_fn(x)
    lo, hi = cfg.accept_band
    window = 0
    for it in range(cfg.burn_in):
        x, gx, ok = kernel.transition(x, gx, rng)
        window += ok
        if (it + 1) % cfg.tune_interval == 0:
            rate = window / cfg.tune_interval
            if rate < lo:
                kernel.step *= 0.7
            elif rate > hi and kernel.step < cap:
                kernel.step = min(kernel.step * 1.25, cap)
            logger.debug("tune: rate %.3f -> step %.4g", rate, kernel.step)
            window = 0

    kept = np.empty((cfg.n_samples,) + x.shape, dtype=np.complex128)
    accepted = 0
    for i in range(cfg.n_samples):
        for _ in range(cfg.thin):
            x, gx, ok = kernel.transition(x, gx, rng)
            accepted += ok
        kept[i] = x
    rate = accepted / (cfg.n_samples * cfg.thin)
    at_cap = kernel.step >= 0.999 * cap
    if rate < lo - cfg.accept_tolerance or (rate > hi + cfg.accept_tolerance and not at_cap):
        diagnostics = {'acceptance': rate, 'step': kernel.step, 'band': cfg.accept_band,
                       'iterations': cfg.burn_in + cfg.n_samples * cfg.thin}
        logger.error("Chain acceptance %.3f outside band %s after tuning (step %.4g)",
                     rate, cfg.accept_band, kernel.step)
        raise SamplerError(f"Acceptance rate {rate:.3f} outside band {cfg.accept_band} after auto-tuning",
                           diagnostics)
    return kept, rate, kernel.step


def sample_target(grad_fn: GradFn, x0: np.ndarray, N: int, cfg: SamplerConfig,
                  seed: SeedLike = None, curvature: float = 1.0, label: str = "") -> SampleChain:
    """Sample e^{−N²U} for an arbitrary convex U given by its batched gradient."""
    seed = cfg.seed if seed is None else seed
    children = seed_sequence(seed).spawn(cfg.n_chains)
    workers = cfg.threads or cfg.n_chains
    if workers == 1:
        results = [run_chain(grad_fn, x0, N, cfg, child, curvature) for child in children]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_chain, grad_fn, x0, N, cfg, child, curvature) for child in children]
            results = [f.result() for f in futures]
    states = np.stack([r[0] for r in results])
    return SampleChain(states=states,
                       acceptance=np.array([r[1] for r in results]),
                       steps=np.array([r[2] for r in results]),
                       N=N, seed=seed if isinstance(seed, int) else str(seed), label=label)


def sample(V: PotentialSpec, N: int, cfg: SamplerConfig, check_window: bool = True) -> SampleChain:
    """Sample μ^(N) ∝ e^{−N²V} over all of V's variables."""
    if N < 1:
        raise SamplerError(f"Invalid matrix size: {N} (must be >= 1)")
    if check_window:
        ensure_window(V, N)
    logger.info("Sampling %s at N=%d: %d chains x %d states", V.label, N, cfg.n_chains, cfg.n_samples)
    chain = sample_target(V.full_grad, V.mean_hint(N), N, cfg, curvature=V.C, label=V.label)
    logger.info("Sampling %s done: acceptance %s, step %s", V.label,
                np.round(chain.acceptance, 3).tolist(), np.round(chain.steps, 4).tolist())
    return chain


# ------------------------------------------------------------------
# Moments
# ------------------------------------------------------------------

def word_values(states: np.ndarray, word: Sequence[int]) -> np.ndarray:
    """τ_N(word(X)) for a batch of states."""
    word = tuple(word)
    if not word:
        return np.ones(states.shape[:-3], dtype=np.complex128)
    prod = states[..., word[0], :, :]
    for letter in word[1:]:
        prod = prod @ states[..., letter, :, :]
    return tau(prod)


def format_word(word: Sequence[int], names: Optional[Sequence[str]] = None) -> str:
    if not word:
        return "1"
    return " ".join(names[i] if names else f"x{i + 1}" for i in word)


@dataclass
class MomentEntry:
    estimate: complex
    se: float
    ess: float


@dataclass
class MomentTable:
    """Estimated E τ_N(word(X)) with batch-means standard errors."""
    entries: Dict[Word, MomentEntry]
    N: int
    label: str = ""
    seed: Any = 0

    def estimate(self, word: Sequence[int]) -> complex:
        return self.entries[tuple(word)].estimate

    def se(self, word: Sequence[int]) -> float:
        return self.entries[tuple(word)].se

    def conjugate_symmetry_violations(self, n_se: float = 4.0) -> List[Word]:
        """Words w with entry(w*) ≠ conj(entry(w)) beyond n_se combined errors."""
        bad = []
        for w, e in self.entries.items():
            rev = tuple(reversed(w))
            if rev in self.entries:
                other = self.entries[rev]
                if abs(other.estimate - np.conj(e.estimate)) > n_se * math.hypot(e.se, other.se) + 1e-12:
                    bad.append(w)
        return bad

    def rows(self, oracle: Optional[Dict[Word, float]] = None) -> List[Dict[str, str]]:
        rows = []
        for w, e in self.entries.items():
            row = {'word': format_word(w), 're': format_float(e.estimate.real),
                   'im': format_float(e.estimate.imag), 'se': format_float(e.se)}
            if oracle is not None:
                row['oracle'] = format_float(oracle[w]) if w in oracle else ''
            rows.append(row)
        return rows

    def to_csv(self, path: Union[str, Path], oracle: Optional[Dict[Word, float]] = None) -> None:
        rows = self.rows(oracle)
        columns = ['word', 're', 'im', 'se'] + (['oracle'] if oracle is not None else [])
        with open(path, 'w', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=columns, lineterminator='\n')
            writer.writeheader()
            writer.writerows(rows)

    def to_dict(self) -> Dict[str, Any]:
        return {'N': self.N, 'label': self.label, 'seed': self.seed, 'moments': self.rows()}

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def estimate_moments(chain: SampleChain, words: Sequence[Sequence[int]],
                     max_degree: int = 12) -> MomentTable:
    """Batch-means estimates of E τ_N(w(X)) for each word."""
    states = chain.flat()
    entries: Dict[Word, MomentEntry] = {}
    for word in words:
        word = tuple(word)
        if len(word) > max_degree:
            raise SamplerError(f"Invalid word length: {len(word)} (must be <= {max_degree})")
        if any(not 0 <= i < chain.k for i in word):
            raise SamplerError(f"Word {word} uses variables outside 0-{chain.k - 1}")
        if not word:
            entries[word] = MomentEntry(1.0 + 0j, 0.0, float(chain.n_states))
            continue
        values = word_values(states, word).reshape(chain.states.shape[:2])
        bm = batch_means(values)
        entries[word] = MomentEntry(complex(bm.mean), float(bm.se), float(bm.ess))
    return MomentTable(entries, chain.N, chain.label, chain.seed)


def gue_moment_oracle(N: int, max_degree: int, m: int = 1, variance: float = 1.0) -> Dict[Word, float]:
    """
    Finite-N moments E τ_N(S_j^p) of a GUE tuple, one variable at a time.

    Even moments follow the Harer-Zagier recursion
        (k+2) C_{k+1} = (4k+2) C_k + k(4k²−1)/N² C_{k−1},
    giving 1, 2 + 1/N², 5 + 10/N², ...; odd moments vanish.
    """
    if N < 1 or max_degree < 0:
        raise SamplerError(f"Invalid oracle arguments: N={N}, max_degree={max_degree}")
    even = [1.0, 1.0]
    for k in range(1, max_degree // 2):
        even.append(((4 * k + 2) * even[k] + k * (4 * k * k - 1) / N ** 2 * even[k - 1]) / (k + 2))
    oracle: Dict[Word, float] = {(): 1.0}
    for j in range(m):
        for p in range(1, max_degree + 1):
            oracle[(j,) * p] = 0.0 if p % 2 else even[p // 2] * variance ** (p // 2)
    return oracle


def quartic_moment_oracle(g: float, max_degree: int) -> Dict[Word, float]:
    """
    Large-N moments of V = ½x² + g x⁴.

    m₂ comes from the one-cut solution (a² = (−1 + (1+48g)^{1/2})/(24g),
    m₂ = (4 − a²)a²/3); higher moments from m_{k+1} + 4g m_{k+3} = Σ_{i+j=k−1} m_i m_j.
    """
    if g < 0:
        raise SamplerError(f"Invalid quartic coupling: {g} (must be >= 0)")
    size = max_degree + 1
    moments = [0.0] * max(size, 3)
    moments[0] = 1.0
    if g == 0:
        for p in range(2, size, 2):
            moments[p] = float(math.comb(p, p // 2)) / (p // 2 + 1)
    else:
        a2 = (-1.0 + math.sqrt(1.0 + 48.0 * g)) / (24.0 * g)
        moments[2] = (4.0 - a2) * a2 / 3.0
        for k in range(1, size - 3, 2):
            conv = sum(moments[i] * moments[k - 1 - i] for i in range(k))
            moments[k + 3] = (conv - moments[k + 1]) / (4.0 * g)
    oracle: Dict[Word, float] = {(): 1.0}
    for p in range(1, size):
        oracle[(0,) * p] = moments[p]
    return oracle


@dataclass
class SDResidual:
    residual: complex
    se: float


def schwinger_dyson_residual(chain: SampleChain, V: PotentialSpec, p: Sequence[int], j: int,
                             max_degree: int = 12) -> SDResidual:
    """E τ_N(D_{x_j}V(X) p(X)) − E (τ_N ⊗ τ_N)(∂_{x_j} p(X))."""
    p = tuple(p)
    if len(p) > max_degree:
        raise SamplerError(f"Invalid word length: {len(p)} (must be <= {max_degree})")
    states = chain.flat()
    g = V.full_grad(states)[:, j]
    prod = np.broadcast_to(np.eye(chain.N, dtype=np.complex128), g.shape).copy()
    for letter in p:
        prod = prod @ states[:, letter]
    lhs = tau(g @ prod)
    rhs = np.zeros_like(lhs)
    for (a, b), coef in free_difference_quotient(p, j, chain.k).terms.items():
        rhs = rhs + coef * word_values(states, a) * word_values(states, b)
    bm = batch_means((lhs - rhs).reshape(chain.states.shape[:2]))
    return SDResidual(complex(bm.mean), float(bm.se))


# ------------------------------------------------------------------
# Concentration and conjugate-variable checks
# ------------------------------------------------------------------

def _exceedance_lower(count: int, n_eff: float, confidence: float = 0.99) -> float:
    """One-sided Clopper-Pearson lower bound for a binomial proportion."""
    if count <= 0:
        return 0.0
    n_eff = max(n_eff, count + 1.0)
    return float(stats.beta.ppf(1.0 - confidence, count, n_eff - count + 1.0))


def herbst_check(chain: SampleChain, f: Callable[[np.ndarray], np.ndarray], K: float,
                 c: float, deltas: Optional[Sequence[float]] = None) -> CheckReport:
    """
    Compare P(f − E f ≥ δ) with e^{−cN²δ²/(2K²)}; a violation is an exceedance
    frequency whose 99% lower confidence bound lies above the bound.
    """
    values = chain.observable(f).real
    flat = values.ravel()
    n_eff = float(np.min(batch_means(values).ess))
    centered = flat - flat.mean()
    if deltas is None:
        deltas = np.linspace(0.0, 4.0 * max(float(np.std(flat)), 1e-12), 7)
    rows = []
    ok = True
    for delta in deltas:
        freq = float(np.mean(centered >= delta))
        bound = math.exp(-c * chain.N ** 2 * delta ** 2 / (2.0 * K ** 2))
        lower = _exceedance_lower(int(round(freq * n_eff)), n_eff)
        violated = lower > bound
        ok &= not violated
        rows.append({'delta': float(delta), 'frequency': freq, 'bound': bound, 'violated': violated})
    return CheckReport('herbst', ok, {'rows': rows, 'K': K, 'c': c, 'n_eff': n_eff})


def opnorm_concentration_check(chain: SampleChain, c: float, deltas: Sequence[float] = (0.5, 1.0, 2.0),
                               lipschitz: float = 1.0, finite_n: bool = False) -> CheckReport:
    """
    P(‖X_j − E X_j‖∞ ≥ c^{-1/2} K (Θ + δ)) ≤ e^{−Nδ²/2} for every variable j.
    """
    theta = theta_n(chain.N) if finite_n else THETA
    states = chain.flat()
    mean = states.mean(axis=0)
    norms = opnorm(states - mean[None])
    n_eff = float(chain.n_states)
    rows = []
    ok = True
    for delta in sorted(deltas):
        threshold = lipschitz * (theta + delta) / math.sqrt(c)
        freq = float(np.mean(np.any(norms >= threshold, axis=-1)))
        bound = math.exp(-chain.N * delta ** 2 / 2.0)
        violated = _exceedance_lower(int(round(freq * n_eff)), n_eff) > bound
        ok &= not violated
        rows.append({'delta': float(delta), 'threshold': threshold, 'frequency': freq,
                     'bound': bound, 'violated': violated})
    return CheckReport('opnorm_concentration', ok,
                       {'theta': theta, 'rows': rows, 'max_opnorm': float(np.max(norms))})


def score_mean_check(chain: SampleChain, V: PotentialSpec, n_se: float = 4.5) -> CheckReport:
    """E[DV(X)] = 0 entrywise within n_se standard errors."""
    g = chain.observable(V.full_grad)
    bm = batch_means(g)
    z = np.abs(bm.mean) / np.maximum(bm.se, 1e-300)
    worst = float(np.max(np.where(bm.se > 0, z, 0.0)))
    return CheckReport('score_mean', worst <= n_se,
                       {'max_z': worst, 'mean_norm': float(norm2(bm.mean[None])[0])})


def variance_sandwich_check(chain: SampleChain, V: PotentialSpec, n_se: float = 4.0) -> CheckReport:
    """k/C ≤ E‖X − E X‖₂² ≤ k/c within n_se standard errors."""
    states = chain.flat()
    mean = states.mean(axis=0)
    values = inner(states - mean, states - mean).reshape(chain.states.shape[:2])
    bm = batch_means(values)
    lower, upper = V.k / V.C, V.k / V.c
    slack = n_se * float(bm.se)
    ok = lower - slack <= bm.mean <= upper + slack
    return CheckReport('variance_sandwich', bool(ok),
                       {'variance': float(bm.mean), 'se': float(bm.se), 'lower': lower, 'upper': upper})


def conjugate_bound_check(chain: SampleChain, V: PotentialSpec) -> CheckReport:
    """‖DV(x)‖₂ ≤ C(‖x − E X‖₂ + (k/c)^{1/2}) on every state."""
    states = chain.flat()
    mean = states.mean(axis=0)
    lhs = norm2(V.full_grad(states))
    rhs = V.C * (norm2(states - mean) + math.sqrt(V.k / V.c))
    ratio = float(np.max(lhs / rhs))
    return CheckReport('conjugate_bound', ratio <= 1.0, {'max_ratio': ratio})


def mean_scalar_deviation(chain: SampleChain) -> List[float]:
    """‖E X_j − τ(E X_j) I‖₂ for each variable; zero for laws with scalar means."""
    mean = chain.flat().mean(axis=0)
    out = []
    for j in range(chain.k):
        alpha = np.real(tau(mean[j]))
        d = mean[j] - alpha * np.eye(chain.N)
        out.append(float(norm2(d[None, None])[0]))
    return out


# ------------------------------------------------------------------
# Checkpoints
# ------------------------------------------------------------------

def save_chain(path: Union[str, Path], chain: SampleChain) -> None:
    """
    Write a chain checkpoint.

    Layout (little-endian): magic 'FGCH', version u16, N u32, k u32,
    chains u32, states-per-chain u32, mean step f64, acceptance f64 × chains,
    then the states as row-major complex128.
    """
    chains, n, k, N, _ = chain.states.shape
    with open(path, 'wb') as handle:
        handle.write(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, N, k, chains, n,
                                             float(np.mean(chain.steps))))
        handle.write(np.asarray(chain.acceptance, dtype='<f8').tobytes())
        handle.write(np.ascontiguousarray(chain.states, dtype='<c16').tobytes())


def load_chain(path: Union[str, Path]) -> SampleChain:
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_HEADER.size:
        raise SamplerError(f"Checkpoint {path} is truncated")
    magic, version, N, k, chains, n, step = _CHECKPOINT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise SamplerError(f"Invalid checkpoint magic: {magic!r} (must be {CHECKPOINT_MAGIC!r})")
    if version != CHECKPOINT_VERSION:
        raise SamplerError(f"Unsupported checkpoint version: {version} (must be {CHECKPOINT_VERSION})")
    offset = _CHECKPOINT_HEADER.size
    acceptance = np.frombuffer(data, dtype='<f8', count=chains, offset=offset)
    offset += 8 * chains
    expected = chains * n * k * N * N
    body = np.frombuffer(data, dtype='<c16', offset=offset)
    if body.size != expected:
        raise SamplerError(f"Checkpoint {path} holds {body.size} entries, expected {expected}")
    states = body.reshape(chains, n, k, N, N).astype(np.complex128)
    return SampleChain(states=states, acceptance=acceptance.copy(), steps=np.full(chains, step), N=N)
