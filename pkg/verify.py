"""
Acceptance Suite

Named checks run in dependency order, each producing exactly one verdict.
Checks are registered with the @acceptance_check decorator, which wraps
them with uniform logging, timing and error capture: a check that raises a
FreeGibbsError records a FAIL naming the module that failed instead of
stopping the suite.
"""

import logging
import math
import time
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from condexp import (CondExpMode, CondExpResult, Observable, compare_modes, cond_exp,
                     condexp_lipschitz_audit, refinement_study)
from config import RunConfig
from entropy import (entropy, entropy_additivity_check, entropy_g, entropy_sweep, fisher_sandwich_check,
                     fisher_scaling_check, gaussian_entropy, outer_states)
from errors import ConfigError, FreeGibbsError
from matrices import hermitian_basis, norm2, opnorm, sample_gue, tau
from potential import (QuadraticPotential, coupled_gaussian, gue_potential, marginal,
                       quartic_potential, repartition, shifted_gaussian)
from reports import CheckReport, RunReport
from sampler import (THETA, batch_means, estimate_moments, gue_moment_oracle, herbst_check,
                     opnorm_concentration_check, quartic_moment_oracle, sample, schwinger_dyson_residual,
                     seed_sequence, theta_n)
from semigroup import inf_convolve
from tracepoly import (LaplacianMode, ScalarTracePoly, TracePoly, evaluate_operator, evaluate_scalar,
                       heat_apply, laplacian, parse_trace_poly)
from transport import (TransportMap, inverse_map_check, lipschitz_audit, pushforward_check,
                       talagrand_check, triangular_checks, triangular_dependency_check,
                       triangular_transport)

logger = logging.getLogger('FreeGibbs.verify')

THETA_REFERENCE = 9.4450535
QUARTIC_G = 0.1
COUPLING = 0.5
SWEEP_SIZES = (4, 8, 16, 32)
N_SE = 4.0

# Seven-point central stencil for the second derivative, exact up to degree 7
STENCIL = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0

LAPLACIAN_CASES = (
    ("tr(x1^6) + 0.5*tr(x1^2)*tr(x1^4) - 0.3*tr(x1)^2*tr(x1^3)", 1),
    ("tr(x1^2 x2^2 x1 x2) + 0.7*tr(x1 x2)*tr(x1^2 x2^2) + tr(x2^3)*tr(x1)", 2),
    ("x1^2 x2 x1 + 0.5*tr(x1 x2)*x2^3", 2),
)
HEAT_CASE = ("tr(x1^4) + 0.5*tr(x1 x2)^2 + tr(x1^2 x2^2)", 2)

CheckFn = Callable[[RunConfig], CheckReport]
CHECKS: Dict[str, CheckFn] = {}


def acceptance_check(name: str):
    """
    Register a check under `name`. The wrapped function returns a
    CheckReport named after the check with its elapsed time attached.
    """
    def decorator(fn: Callable[[RunConfig], CheckReport]) -> CheckFn:
        def wrapped(cfg: RunConfig) -> CheckReport:
            logger.info("Starting check: %s", name)
            start = time.perf_counter()
            try:
                report = fn(cfg)
                report.name = name
            except FreeGibbsError as exc:
                logger.error("Check %s failed in %s: %s", name, type(exc).__name__, exc)
                report = CheckReport(name, False, {'error': str(exc), 'module': type(exc).__name__})
            report.details.setdefault('elapsed', time.perf_counter() - start)
            logger.info("Completed check: %s -> %s", name, report.verdict)
            return report
        wrapped.__name__ = fn.__name__
        wrapped.__doc__ = fn.__doc__
        CHECKS[name] = wrapped
        return wrapped
    return decorator


def combine(name: str, parts: Sequence[CheckReport], **details) -> CheckReport:
    """One verdict from several sub-reports."""
    return CheckReport(name, all(p.passed for p in parts),
                       {**details, 'parts': [p.to_dict() for p in parts]})


def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence((cfg.seed, 100 + stream)))


def _distance(diff: np.ndarray) -> float:
    diff = np.asarray(diff)
    if diff.ndim >= 2:
        return float(np.max(norm2(diff.reshape((-1, 1) + diff.shape[-2:]))))
    return float(np.max(np.abs(diff)))


def closed_form_report(name: str, res: CondExpResult, want: np.ndarray) -> CheckReport:
    """An estimate within N_SE standard errors of its closed form."""
    distance = _distance(res.estimate - want)
    allowance = N_SE * res.se
    return CheckReport(name, distance <= allowance + 1e-12,
                       {'distance': distance, 'allowance': allowance, **res.certificate})


# ------------------------------------------------------------------
# Trace polynomials
# ------------------------------------------------------------------

def finite_difference_laplacian(f: TracePoly, x: np.ndarray, variables: Optional[Iterable[int]] = None,
                                h: float = 0.1) -> np.ndarray:
    """(1/N) Σ_j Σ_i ∂²f/∂(x_j·e_i)² over a Tr-orthonormal Hermitian basis {e_i}."""
    x = np.asarray(x, dtype=np.complex128)
    k, N = x.shape[-3], x.shape[-1]
    evaluate = evaluate_scalar if isinstance(f, ScalarTracePoly) else evaluate_operator
    basis = hermitian_basis(N)
    offsets = np.arange(-3, 4) * h
    total = 0.0
    for j in (range(k) if variables is None else variables):
        points = np.broadcast_to(x, (len(basis), len(offsets)) + x.shape).copy()
        points[:, :, j] += offsets[None, :, None, None] * basis[:, None]
        values = np.asarray(evaluate(f, points))
        total = total + np.tensordot(values, STENCIL, axes=([1], [0])).sum(axis=0) / h ** 2
    return total / N


@acceptance_check('laplacian')
def check_laplacian(cfg: RunConfig) -> CheckReport:
    """Symbolic L^(N) against the finite-difference Laplacian, relative error < 1e-5."""
    rng = _rng(cfg, 1)
    rows = []
    for text, m in LAPLACIAN_CASES:
        f = parse_trace_poly(text, n_x=m)
        for N in (2, 3, 4):
            x = sample_gue(rng, m, N)
            symbolic = laplacian(f, LaplacianMode.finite_n(N))
            evaluate = evaluate_scalar if isinstance(f, ScalarTracePoly) else evaluate_operator
            exact = np.asarray(evaluate(symbolic, x))
            numeric = np.asarray(finite_difference_laplacian(f, x))
            error = float(np.max(np.abs(exact - numeric)) / max(float(np.max(np.abs(numeric))), 1.0))
            rows.append({'poly': text, 'N': N, 'relative_error': error, 'passed': error < 1e-5})
    return CheckReport('laplacian', all(r['passed'] for r in rows), {'rows': rows})


@acceptance_check('heat')
def check_heat(cfg: RunConfig, samples: int = 10_000) -> CheckReport:
    """e^{tL/2}f(x) against the Monte Carlo mean of f(x + √t S) at five points."""
    rng = _rng(cfg, 2)
    text, m = HEAT_CASE
    N = 3
    f = parse_trace_poly(text, n_x=m)
    rows = []
    for t in (0.1, 1.0):
        heated = heat_apply(f, t, LaplacianMode.finite_n(N))
        for _ in range(5):
            x = sample_gue(rng, m, N)
            exact = complex(evaluate_scalar(heated, x))
            values = np.asarray(evaluate_scalar(f, x + math.sqrt(t) * sample_gue(rng, m, N, size=(samples,))))
            bm = batch_means(values.real[None])
            error = abs(float(bm.mean) - exact.real)
            rows.append({'t': t, 'exact': exact.real, 'mc': float(bm.mean), 'se': float(bm.se),
                         'passed': error <= N_SE * float(bm.se) + 1e-12})
    return CheckReport('heat', all(r['passed'] for r in rows), {'rows': rows, 'samples': samples})


# ------------------------------------------------------------------
# Sampling
# ------------------------------------------------------------------

def _moment_rows(table, oracle, allowance: Callable[[float, float], float]) -> List[Dict]:
    rows = []
    for word, want in oracle.items():
        if not word:
            continue
        got = table.estimate(word)
        se = table.se(word)
        ok = abs(got - want) <= allowance(se, want) + 1e-12
        rows.append({'word': word, 'estimate': got, 'oracle': want, 'se': se, 'passed': ok})
    return rows


@acceptance_check('gue_moments')
def check_gue_moments(cfg: RunConfig) -> CheckReport:
    """Sampled E τ(X^p) at N = 8, 16 against the finite-N GUE oracle within 4 SE."""
    V = gue_potential(1)
    rows = []
    for N in (8, 16):
        chain = sample(V, N, cfg.sampler)
        oracle = gue_moment_oracle(N, cfg.max_degree)
        table = estimate_moments(chain, list(oracle))
        for row in _moment_rows(table, oracle, lambda se, want: N_SE * se):
            rows.append({'N': N, **row})
    return CheckReport('gue_moments', all(r['passed'] for r in rows), {'rows': rows})


@acceptance_check('quartic_sd')
def check_quartic_sd(cfg: RunConfig) -> CheckReport:
    """
    Schwinger-Dyson residuals for x, x³, x⁵ at N = 16 vanish within 4 SE, and
    moments at N = 32 match the large-N oracle within max(4 SE, 3%).
    """
    V = quartic_potential(QUARTIC_G, cfg.model.radius)
    chain = sample(V, 16, cfg.sampler)
    residuals = []
    for p in ((0,), (0,) * 3, (0,) * 5):
        r = schwinger_dyson_residual(chain, V, p, 0)
        residuals.append({'p': p, 'residual': r.residual, 'se': r.se,
                          'passed': abs(r.residual) <= N_SE * r.se + 1e-12})
    chain32 = sample(V, 32, cfg.sampler)
    oracle = quartic_moment_oracle(QUARTIC_G, cfg.max_degree)
    table = estimate_moments(chain32, list(oracle))
    moments = _moment_rows(table, oracle, lambda se, want: max(N_SE * se, 0.03 * abs(want)))
    passed = all(r['passed'] for r in residuals + moments)
    return CheckReport('quartic_sd', passed, {'residuals': residuals, 'moments': moments})


# ------------------------------------------------------------------
# Semigroups and conditional expectations
# ------------------------------------------------------------------

@acceptance_check('inf_convolution')
def check_inf_convolution(cfg: RunConfig, c: float = 2.0) -> CheckReport:
    """Q_t of u = (c/2)‖x‖₂²: value c‖x‖²/(2(1+ct)), minimizer x/(1+ct), to 1e-10."""
    rng = _rng(cfg, 5)
    u = QuadraticPotential(np.zeros(2), c * np.eye(2), label=f"quadratic(c={c:g})")
    rows = []
    for t in (0.25, 1.0, 4.0):
        x = sample_gue(rng, 2, cfg.N)
        res = inf_convolve(u, t, x)
        value = float(np.real(res.value))
        want = c * float(norm2(x)) ** 2 / (2.0 * (1.0 + c * t))
        value_error = abs(value - want)
        minimizer_error = float(norm2(res.minimizer - x / (1.0 + c * t)))
        rows.append({'t': t, 'value_error': value_error, 'minimizer_error': minimizer_error,
                     'iterations': res.iterations,
                     'passed': value_error <= 1e-10 * max(1.0, abs(want)) and minimizer_error <= 1e-10})
    return CheckReport('inf_convolution', all(r['passed'] for r in rows), {'rows': rows})


@acceptance_check('conditional_expectation')
def check_conditional_expectation(cfg: RunConfig) -> CheckReport:
    """
    E[X | Y = y] = −λy on the coupled Gaussian in both modes, the modes
    agree, and y ↦ E[X | Y = y] stays within its Lipschitz bound.

    The split-scheme mean is −λy + e^{−t/2}(x₀ + λy) here, negligible at the
    selected t, so both modes get standard errors only.
    """
    V = coupled_gaussian(COUPLING, n=1)
    f = Observable.variable(0)
    y = sample_gue(_rng(cfg, 6), 1, cfg.N)
    want = -COUPLING * y[0]
    parts = []
    for mode in CondExpMode:
        res = cond_exp(f, V, y, mode, cfg.condexp)
        parts.append(closed_form_report(f'condexp_{mode.value}', res, want))
    parts.append(compare_modes(f, V, y, cfg.condexp))
    parts.append(condexp_lipschitz_audit(f, V, cfg.N, cfg.condexp))
    return combine('conditional_expectation', parts, closed_form='-lambda*y', lam=COUPLING)


@acceptance_check('refinement')
def check_refinement(cfg: RunConfig) -> CheckReport:
    """Decay of ‖T_{t,ℓ}f − T_{t,ℓ+1}f‖ over ℓ = 2..6 on the quartic model."""
    V = quartic_potential(QUARTIC_G, cfg.model.radius)
    x = V.mean_hint(cfg.N)[:V.m] + 0.5 * sample_gue(_rng(cfg, 7), V.m, cfg.N)
    study = refinement_study(Observable.variable(0), V, x, None, 1.0, range(2, 7), cfg.condexp)
    return CheckReport('refinement', study.passed, study.to_dict())


# ------------------------------------------------------------------
# Entropy
# ------------------------------------------------------------------

@acceptance_check('fisher')
def check_fisher(cfg: RunConfig) -> CheckReport:
    """Fisher information sandwich on a time grid, and exact rescaling I(aX) = a^{−2}I(X)."""
    V = cfg.model.build()
    chain = sample(V, cfg.N, cfg.sampler)
    parts = [fisher_sandwich_check(V, chain, (0.1, 1.0, 10.0), cfg.entropy),
             fisher_scaling_check(V, chain, 2.0, cfg.entropy)]
    return combine('fisher', parts, model=V.label)


def _closed_form_part(name: str, result, tolerance: float = 1e-2) -> CheckReport:
    error = abs(result.value - result.closed_form)
    return CheckReport(name, error <= result.budget and error <= tolerance,
                       {'value': result.value, 'closed_form': result.closed_form,
                        'error': error, 'budget': result.budget})


@acceptance_check('entropy_closed_forms')
def check_entropy_closed_forms(cfg: RunConfig) -> CheckReport:
    """GUE h^(N) = ½ log 2πe and the shifted Gaussian h_g = −α²/2 (α = 1)."""
    parts = [_closed_form_part('gue_entropy', entropy(gue_potential(1), cfg.entropy, N=cfg.N)),
             _closed_form_part('shifted_h_g', entropy_g(shifted_gaussian(1.0), cfg.entropy, N=cfg.N))]
    return combine('entropy_closed_forms', parts)


@acceptance_check('entropy_additivity')
def check_entropy_additivity(cfg: RunConfig) -> CheckReport:
    """h(X, Y) = h(X | Y) + h(Y) on the coupled Gaussian, plus the closed-form identity."""
    V = coupled_gaussian(COUPLING, n=1)
    sampled = entropy_additivity_check(V, cfg.entropy, N=cfg.N)
    joint = gaussian_entropy(repartition(V, V.k))
    conditional = gaussian_entropy(V)
    y_marginal = gaussian_entropy(marginal(V, [1], m=1, n=0))
    gap = abs(joint - conditional - y_marginal)
    exact = CheckReport('closed_form_additivity', gap <= 1e-10,
                        {'h_joint': joint, 'h_conditional': conditional, 'h_marginal': y_marginal, 'gap': gap})
    return combine('entropy_additivity', [sampled, exact])


# ------------------------------------------------------------------
# Transport
# ------------------------------------------------------------------

@acceptance_check('transport_pushforward')
def check_transport_pushforward(cfg: RunConfig, N: int = 16) -> CheckReport:
    """F(X) for the quartic model against the finite-N GUE moments, and G∘F = id."""
    V = quartic_potential(QUARTIC_G, cfg.model.radius)
    chain = sample(V, N, cfg.transport.outer)
    forward = TransportMap.forward(V, cfg.transport)
    backward = TransportMap.backward(V, cfg.transport)
    oracle = gue_moment_oracle(N, cfg.max_degree)
    pushed = pushforward_check(forward, list(oracle), cfg.transport, chain=chain, oracle=oracle)
    points = outer_states(chain, cfg.points)
    round_trip = inverse_map_check(forward, backward, points)
    return combine('transport_pushforward', [pushed, round_trip], N=N)


@acceptance_check('talagrand')
def check_talagrand(cfg: RunConfig) -> CheckReport:
    """
    E‖F(X) − X‖₂² ≤ 2|h_g| on GUE (both zero), the translation model
    (equality within 1e-2) and the quartic model.
    """
    gue = talagrand_check(gue_potential(1), cfg.transport, N=cfg.N, qcfg=cfg.entropy)
    shifted = talagrand_check(shifted_gaussian(1.0), cfg.transport, N=cfg.N, qcfg=cfg.entropy)
    shifted.passed = shifted.passed and shifted.details['gap'] <= 1e-2
    quartic = talagrand_check(quartic_potential(QUARTIC_G, cfg.model.radius), cfg.transport,
                              N=cfg.N, qcfg=cfg.entropy)
    for report, label in ((gue, 'gue'), (shifted, 'translation'), (quartic, 'quartic')):
        report.name = f'talagrand_{label}'
    return combine('talagrand', [gue, shifted, quartic])


@acceptance_check('lipschitz')
def check_lipschitz(cfg: RunConfig) -> CheckReport:
    """
    Empirical seminorms of F on the coupled Gaussian and the translation
    model never exceed their bounds; the translation model's deviation
    from the projection is exactly zero.
    """
    parts = [lipschitz_audit(TransportMap.forward(coupled_gaussian(COUPLING, n=1), cfg.transport),
                             cfg.N, cfg.points, cfg=cfg.transport)]
    shifted = lipschitz_audit(TransportMap.forward(shifted_gaussian(1.0), cfg.transport),
                              cfg.N, cfg.points, cfg=cfg.transport)
    deviation = shifted.details['observed']['deviation']
    parts.append(shifted)
    parts.append(CheckReport('translation_edge', deviation <= 1e-12, {'deviation': deviation}))
    return combine('lipschitz', parts)


def coupled_triangular_map(lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """Φ for the coupled Gaussian: (√(1−λ²)x₁, x₂ + λx₁)."""
    def phi(x: np.ndarray) -> np.ndarray:
        return np.stack([math.sqrt(1.0 - lam ** 2) * x[..., 0, :, :],
                         x[..., 1, :, :] + lam * x[..., 0, :, :]], axis=-3)
    return phi


@acceptance_check('triangular')
def check_triangular(cfg: RunConfig, tolerance: float = 5e-2) -> CheckReport:
    """Triangular transport of the coupled Gaussian against its closed form and dependency structure."""
    V = coupled_gaussian(COUPLING, n=0)
    chain = sample(V, cfg.N, cfg.transport.outer)
    tri = triangular_transport(V, cfg.transport, chain)
    expected = coupled_triangular_map(COUPLING)
    parts = triangular_checks(tri, chain, cfg.transport, expected)
    points = outer_states(chain, cfg.points)
    phi, _ = tri.evaluate(points)
    gap = float(np.max(opnorm(phi - expected(points))))
    parts.append(CheckReport('triangular_opnorm_gap', gap <= tolerance, {'max_gap': gap, 'tolerance': tolerance}))
    parts.append(triangular_dependency_check(tri, points, _rng(cfg, 14)))
    return combine('triangular', parts, lam=COUPLING)


# ------------------------------------------------------------------
# Large-N trends and concentration
# ------------------------------------------------------------------

def moment_sweep(V, sizes: Sequence[int], words: Sequence[Sequence[int]], cfg: RunConfig,
                 ratio: float = 2.0) -> CheckReport:
    """Successive differences of moments over an N-grid shrink by `ratio` per step, up to SEs."""
    tables = [estimate_moments(sample(V, N, cfg.sampler), words) for N in sizes]
    rows = []
    passed = True
    for word in words:
        word = tuple(word)
        values = [t.estimate(word).real for t in tables]
        ses = [t.se(word) for t in tables]
        diffs = [abs(values[i + 1] - values[i]) for i in range(len(values) - 1)]
        slack = [N_SE * math.hypot(ses[i + 1], ses[i]) for i in range(len(values) - 1)]
        ok = all(diffs[i + 1] <= diffs[i] / ratio + slack[i + 1] + slack[i] / ratio
                 for i in range(len(diffs) - 1))
        passed &= ok
        rows.append({'word': word, 'values': values, 'se': ses, 'differences': diffs, 'passed': ok})
    return CheckReport('moment_sweep', passed, {'N': list(sizes), 'rows': rows})


@acceptance_check('n_sweep')
def check_n_sweep(cfg: RunConfig) -> CheckReport:
    """h^(N) and selected moments of the quartic model over an N-grid (O(1/N²) trend)."""
    sizes = cfg.sizes if len(cfg.sizes) >= 3 else list(SWEEP_SIZES)

    def make_potential(N: int):
        return quartic_potential(QUARTIC_G, cfg.model.radius)

    parts = [entropy_sweep(make_potential, sizes, cfg.entropy),
             moment_sweep(make_potential(sizes[0]), sizes, [(0, 0), (0, 0, 0, 0)], cfg)]
    return combine('n_sweep', parts, N=list(sizes))


@acceptance_check('concentration')
def check_concentration(cfg: RunConfig) -> CheckReport:
    """Herbst bound for τ(x₁), operator-norm concentration, and the value of Θ."""
    V = cfg.model.build()
    chain = sample(V, cfg.N, cfg.sampler)
    herbst = herbst_check(chain, lambda z: tau(z[..., 0, :, :]).real, 1.0, V.c)
    spectral = opnorm_concentration_check(chain, V.c)
    theta = CheckReport('theta', abs(THETA - THETA_REFERENCE) <= 1e-6,
                        {'theta': THETA, 'reference': THETA_REFERENCE, 'theta_n': theta_n(cfg.N)})
    return combine('concentration', [herbst, spectral, theta])


# ------------------------------------------------------------------
# Suite
# ------------------------------------------------------------------

def check_names() -> List[str]:
    return list(CHECKS)


def run_suite(cfg: RunConfig, names: Optional[Sequence[str]] = None,
              report: Optional[RunReport] = None) -> RunReport:
    """
    Run the named checks (all when `names` is empty) in registration order.

    Raises:
        ConfigError: an unknown check name
    """
    selected = list(names or [])
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        logger.error("Unknown checks: %s", unknown)
        raise ConfigError(f"Unknown check: {unknown[0]!r} (must be one of {', '.join(CHECKS)})")
    report = report or RunReport('verify', cfg.to_dict())
    for name, check in CHECKS.items():
        if selected and name not in selected:
            continue
        result = report.add(check(cfg))
        report.timing[name] = float(result.details.pop('elapsed', 0.0))
    logger.info("Suite finished: %d checks, %s", len(report.checks), "PASS" if report.passed else "FAIL")
    return report
