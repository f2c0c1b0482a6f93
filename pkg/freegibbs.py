#!/usr/bin/env python3
"""
FreeGibbs Command Line

Runs one stage of the laboratory on the configured model and writes its
results (CSV and JSON) plus a RunReport with every verdict:

- sample:     MALA chains, checkpoints and sampler diagnostics
- moments:    moment tables with oracle columns and Schwinger-Dyson residuals
- semigroup:  evolved gradients, convexity windows and Trotter cross-checks
- condexp:    conditional expectations in direct and semigroup modes
- entropy:    h and h_g quadratures with the log-Sobolev check
- transport:  the maps F and G with pushforward, Lipschitz and Talagrand checks
- triangular: the triangular transport and its inverse
- verify:     the full acceptance suite

The exit code is 0 exactly when every verdict is PASS.
"""

import argparse
import csv
import itertools
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from condexp import (CondExpMode, Observable, compare_modes, cond_exp, condexp_lipschitz_audit,
                     flow_contraction_check)
from config import ModelPreset, RunConfig, load_config
from entropy import entropy, entropy_additivity_check, entropy_g, lsi_check, outer_states, two_route_check
from errors import ConfigError, FreeGibbsError
from matrices import norm2, sample_gue
from potential import PotentialSpec, hessian_window_check
from reports import CheckReport, RunReport, dumps, format_float
from sampler import (SampleChain, conjugate_bound_check, estimate_moments, gue_moment_oracle,
                     mean_scalar_deviation, quartic_moment_oracle, sample, save_chain,
                     schwinger_dyson_residual, score_mean_check, seed_sequence, variance_sandwich_check)
from semigroup import (EvolvedPotential, TrotterConfig, evolved_grad, gradient_consistency, grid_times,
                       secant_window_check, trotter_agreement)
from transport import (TransportMap, inverse_map_check, lipschitz_audit, pushforward_check,
                       talagrand_check, triangular_checks, triangular_dependency_check,
                       triangular_talagrand_check, triangular_transport)
from verify import check_names, run_suite

logger = logging.getLogger('FreeGibbs')

LOG_FORMAT = '%(asctime)s %(levelname)-8s [FreeGibbs] %(message)s'
SEMIGROUP_COLUMNS = ['t', 'grad_norm', 'se', 'c_t', 'C_t', 'secant_min', 'secant_max']


# ------------------------------------------------------------------
# Helpers
# ------------------------------------------------------------------

def moment_words(k: int, max_degree: int, mixed_degree: int = 3) -> List[tuple]:
    """Pure powers of each variable up to max_degree, plus every mixed word up to mixed_degree."""
    words = [()]
    for j in range(k):
        words += [(j,) * p for p in range(1, max_degree + 1)]
    if k > 1:
        for length in range(2, min(mixed_degree, max_degree) + 1):
            words += [w for w in itertools.product(range(k), repeat=length) if len(set(w)) > 1]
    return words


def moment_oracle(cfg: RunConfig, V: PotentialSpec, N: int) -> Optional[Dict[tuple, float]]:
    preset = cfg.model.preset
    if preset == ModelPreset.GUE:
        return gue_moment_oracle(N, cfg.max_degree, V.m)
    if preset == ModelPreset.QUARTIC:
        return quartic_moment_oracle(cfg.model.g, cfg.max_degree)
    return None


def write_rows(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, str]]) -> None:
    with open(path, 'w', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)


def window_report(V: PotentialSpec, N: int, seed: int) -> CheckReport:
    window = hessian_window_check(V, N, seed=seed)
    return CheckReport('hessian_window', window.passed, window.to_dict())


def model_points(V: PotentialSpec, chain: SampleChain, count: int):
    """x- and y-blocks of `count` chain states (y is None without a y-block)."""
    states = outer_states(chain, count)
    return states[:, :V.m], (states[:, V.m:] if V.n else None)


# ------------------------------------------------------------------
# Subcommands
# ------------------------------------------------------------------

def run_sample(cfg: RunConfig, report: RunReport) -> None:
    V = cfg.model.build()
    for N in cfg.sizes:
        report.add(window_report(V, N, cfg.seed))
        chain = sample(V, N, cfg.sampler)
        save_chain(cfg.out / f"chain_N{N}.fgch", chain)
        report.add(score_mean_check(chain, V))
        report.add(variance_sandwich_check(chain, V))
        report.add(conjugate_bound_check(chain, V))
        report.results[f"N{N}"] = {'chain': chain.get_info(),
                                   'mean_scalar_deviation': mean_scalar_deviation(chain)}


def run_moments(cfg: RunConfig, report: RunReport) -> None:
    V = cfg.model.build()
    words = moment_words(V.k, cfg.max_degree)
    for N in cfg.sizes:
        chain = sample(V, N, cfg.sampler)
        table = estimate_moments(chain, words, cfg.max_degree)
        oracle = moment_oracle(cfg, V, N)
        table.to_csv(cfg.out / f"moments_N{N}.csv", oracle)
        table.to_json(cfg.out / f"moments_N{N}.json")
        bad = table.conjugate_symmetry_violations()
        report.add(CheckReport('conjugate_symmetry', not bad, {'N': N, 'violations': bad}))
        residuals = []
        for j in range(V.k):
            for p in ((j,), (j,) * 3):
                r = schwinger_dyson_residual(chain, V, p, j, cfg.max_degree)
                residuals.append({'j': j, 'p': p, 'residual': r.residual, 'se': r.se,
                                  'passed': abs(r.residual) <= 4.0 * r.se + 1e-12})
        report.add(CheckReport('schwinger_dyson', all(r['passed'] for r in residuals),
                               {'N': N, 'residuals': residuals}))


def run_semigroup(cfg: RunConfig, report: RunReport, ell: int = 2) -> None:
    V = cfg.model.build()
    N = cfg.N
    chain = sample(V, N, cfg.sampler)
    x, y = model_points(V, chain, cfg.points)
    rng = np.random.default_rng(seed_sequence((cfg.seed, 21)))
    partners = x + 0.5 * sample_gue(rng, V.m, N, size=(x.shape[0],))
    ep = EvolvedPotential(V, sampler_cfg=cfg.transport.sampler)
    rows = []
    windows_ok = True
    for i, t in enumerate(grid_times(1.0, ell)):
        g, se = evolved_grad(ep, t, x, y, seed=(cfg.seed, i))
        secant = secant_window_check(ep, t, x, partners, y, seed=(cfg.seed, i))
        windows_ok &= secant['passed']
        c_t, C_t = secant['window']
        rows.append({'t': format_float(t), 'grad_norm': format_float(float(np.max(norm2(g)))),
                     'se': format_float(se), 'c_t': format_float(c_t), 'C_t': format_float(C_t),
                     'secant_min': format_float(float(np.min(secant['ratios']))),
                     'secant_max': format_float(float(np.max(secant['ratios'])))})
    write_rows(cfg.out / "semigroup.csv", SEMIGROUP_COLUMNS, rows)
    report.add(CheckReport('secant_window', windows_ok, {'times': grid_times(1.0, ell)}))

    t_small = min(0.5 / V.C, 0.25)
    consistency = gradient_consistency(ep, t_small, x[:1], y[:1] if y is not None else None, cfg.seed)
    report.add(CheckReport('gradient_consistency', bool(consistency['passed']), consistency))
    ell_trotter = max(ell, math.ceil(math.log2(max(V.C, 1.0))))
    trotter = trotter_agreement(ep, 2.0 ** (-ell_trotter), ell_trotter, x[0], y[0] if y is not None else None,
                                cfg.seed, TrotterConfig(seed=cfg.seed))
    report.add(CheckReport('trotter_agreement', bool(trotter['passed']), trotter))


def run_condexp(cfg: RunConfig, report: RunReport) -> None:
    V = cfg.model.build()
    N = cfg.N
    chain = sample(V, N, cfg.sampler)
    x, y = model_points(V, chain, 2)
    y0 = y[-1] if y is not None else None
    f = Observable.variable(0)
    results = {}
    for mode in CondExpMode:
        results[mode.value] = cond_exp(f, V, y0, mode, cfg.condexp, N).to_dict()
    report.results['condexp'] = results
    report.add(compare_modes(f, V, y0, cfg.condexp) if y0 is not None else
               _modes_without_y(f, V, N, results, cfg))
    report.add(flow_contraction_check(V, x[0], x[1], y0, 1.0, cfg.condexp.ode))
    if V.n:
        report.add(condexp_lipschitz_audit(f, V, N, cfg.condexp))


def _modes_without_y(f: Observable, V: PotentialSpec, N: int, results: Dict, cfg: RunConfig) -> CheckReport:
    direct, semi = results['direct'], results['semigroup']
    diff = np.asarray(direct['estimate'] - semi['estimate'])
    distance = float(norm2(diff[None, None]))
    budget = cfg.condexp.n_se * float(np.hypot(direct['se'], semi['se']))
    return CheckReport('condexp_modes', distance <= budget, {'distance': distance, 'budget': budget})


def run_entropy(cfg: RunConfig, report: RunReport) -> None:
    V = cfg.model.build()
    chain = sample(V, cfg.N, cfg.sampler)
    h = entropy(V, cfg.entropy, chain)
    hg = entropy_g(V, cfg.entropy, chain)
    h.to_csv(cfg.out / "entropy_h.csv")
    hg.to_csv(cfg.out / "entropy_h_g.csv")
    (cfg.out / "entropy.json").write_text(dumps({'h': h, 'h_g': hg}))
    report.results['entropy'] = {'h': h.value, 'h_budget': h.budget, 'h_g': hg.value, 'h_g_budget': hg.budget}
    for result in (h, hg):
        if result.closed_form is not None:
            error = abs(result.value - result.closed_form)
            report.add(CheckReport(f'closed_form_{result.kind}', error <= result.budget,
                                   {'value': result.value, 'closed_form': result.closed_form,
                                    'error': error, 'budget': result.budget}))
    report.add(lsi_check(V, cfg.entropy, chain))
    report.add(two_route_check(V, cfg.entropy, chain))
    if V.n:
        report.add(entropy_additivity_check(V, cfg.entropy, chain))


def run_transport(cfg: RunConfig, report: RunReport) -> None:
    V = cfg.model.build()
    N = cfg.N
    chain = sample(V, N, cfg.transport.outer)
    forward = TransportMap.forward(V, cfg.transport)
    backward = TransportMap.backward(V, cfg.transport)
    words = [w for w in moment_words(V.m, cfg.max_degree) if w]
    oracle = gue_moment_oracle(N, cfg.max_degree, V.m) if V.n == 0 else None
    report.add(pushforward_check(forward, words, cfg.transport, chain=chain, oracle=oracle))
    x, y = model_points(V, chain, cfg.points)
    report.add(inverse_map_check(forward, backward, x, y))
    report.add(lipschitz_audit(forward, N, cfg.points, cfg=cfg.transport))
    report.add(talagrand_check(V, cfg.transport, chain, qcfg=cfg.entropy, tmap=forward))
    (cfg.out / "transport.json").write_text(dumps({
        'forward': forward.get_info(), 'backward': backward.get_info(),
        'transcripts': {'forward': forward.transcripts, 'backward': backward.transcripts}}))


def run_triangular(cfg: RunConfig, report: RunReport) -> None:
    V = cfg.model.build()
    chain = sample(V, cfg.N, cfg.transport.outer)
    tri = triangular_transport(V, cfg.transport, chain)
    for check in triangular_checks(tri, chain, cfg.transport):
        report.add(check)
    points = outer_states(chain, cfg.points)
    report.add(triangular_dependency_check(tri, points, np.random.default_rng(seed_sequence((cfg.seed, 23)))))
    report.add(triangular_talagrand_check(tri, chain, cfg.transport, cfg.entropy))
    (cfg.out / "triangular.json").write_text(dumps({'map': tri.get_info(), 'transcripts': tri.transcripts}))


def run_verify(cfg: RunConfig, report: RunReport) -> None:
    run_suite(cfg, cfg.checks, report)


RUNNERS: Dict[str, Callable[[RunConfig, RunReport], None]] = {
    'sample': run_sample,
    'moments': run_moments,
    'semigroup': run_semigroup,
    'condexp': run_condexp,
    'entropy': run_entropy,
    'transport': run_transport,
    'triangular': run_triangular,
    'verify': run_verify,
}


def run(subcommand: str, cfg: RunConfig) -> RunReport:
    """Run one subcommand and write its report to <out>/report_<subcommand>.json."""
    if subcommand not in RUNNERS:
        raise ConfigError(f"Invalid subcommand: {subcommand!r} (must be one of {', '.join(RUNNERS)})")
    cfg.out.mkdir(parents=True, exist_ok=True)
    report = RunReport(subcommand, cfg.to_dict())
    logger.info("Running %s on %s (N=%s, seed %d)", subcommand, cfg.model.preset.value, cfg.sizes, cfg.seed)
    RUNNERS[subcommand](cfg, report)
    report.write(cfg.out / f"report_{subcommand}.json")
    for check in report.checks:
        logger.info("  %s", check)
    logger.info("%s finished: %s", subcommand, "PASS" if report.passed else "FAIL")
    return report


# ------------------------------------------------------------------
# Entry point
# ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='freegibbs', description="Convex multi-matrix model laboratory")
    parser.add_argument('subcommand', choices=list(RUNNERS), help='Stage to run')
    parser.add_argument('--config', default=None, help='INI or JSON config file (defaults otherwise)')
    parser.add_argument('--seed', type=int, default=None, help='Master seed (overrides the config)')
    parser.add_argument('--out', default=None, help='Output directory (overrides the config)')
    parser.add_argument('--threads', type=int, default=None, help='Worker pool size')
    parser.add_argument('--check', action='append', default=[], metavar='NAME',
                        help=f"Run only this acceptance check (repeatable): {', '.join(check_names())}")
    parser.add_argument('--verbose', action='store_true', help='Enable verbose debug logging')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format=LOG_FORMAT, datefmt='%H:%M:%S')
    try:
        cfg = load_config(args.config).override(seed=args.seed, out=args.out, threads=args.threads,
                                                checks=args.check)
        report = run(args.subcommand, cfg)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return 2
    except FreeGibbsError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    return 0 if report.passed else 1


if __name__ == '__main__':
    sys.exit(main())
