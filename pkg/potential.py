"""
Convex Potentials

Potentials V on m+n Hermitian variables (x-block first, then y-block) with a
declared convexity window c ≤ HV ≤ C. Gradients are taken with respect to
⟨·,·⟩₂ and accept batched tuples of shape (..., k, N, N).

Kinds:
    QuadraticPotential   ½⟨x−a, Q(x−a)⟩₂ with scalar mean a and precision Q
    TracePolyPotential   a self-adjoint scalar trace polynomial
    LinearImagePotential V∘A^{-1} (law of A X)
    JoinPotential        V₁(x) + V₂(y) (independent join)
    MarginalPotential    law of a subset of variables, gradient by sampling

Closure operations: join, linear_image, marginal, convolve, repartition.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from errors import PotentialError
from matrices import (apply_mixing, as_matrix_tuple, hermitize, inner, norm2,
                      opnorm, sample_gue, scalar_tuple, tau)
from tracepoly import (ScalarTracePoly, cyclic_gradient, evaluate_operator,
                       evaluate_scalar, parse_potential)

logger = logging.getLogger('FreeGibbs.potential')


class Block(Enum):
    """Which gradient block to return."""
    X = "x"
    Y = "y"
    ALL = "all"


class WindowRule(Enum):
    """How linear changes of variables propagate the convexity window."""
    SHARP = "sharp"      # (c/‖A‖², C‖A⁻¹‖²), always a valid window
    STATED = "stated"    # (c/‖A‖, C‖A⁻¹‖); convolution (√2c, √2C)


class PotentialSpec:
    """
    Base class for potentials with a convexity window and a variable partition.

    Subclasses implement full_grad (and value where available).
    """

    def __init__(self, m: int, n: int, c: float, C: float, label: str = "",
                 region_radius: Optional[float] = None):
        if m < 0 or n < 0 or m + n == 0:
            raise PotentialError(f"Invalid partition: ({m}, {n}) (need m, n >= 0 and m + n >= 1)")
        if not (c > 0 and C >= c):
            raise PotentialError(f"Invalid convexity window: [{c}, {C}] (must have 0 < c <= C)")
        self.m = m
        self.n = n
        self.c = float(c)
        self.C = float(C)
        self.label = label or type(self).__name__
        self.region_radius = region_radius
        self._window_checked: set = set()

    @property
    def k(self) -> int:
        """Total number of variables."""
        return self.m + self.n

    @property
    def condition(self) -> float:
        """max(C, 1/c), the constant driving the transport estimates."""
        return max(self.C, 1.0 / self.c)

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim < 3 or x.shape[-3] != self.k or x.shape[-1] != x.shape[-2]:
            raise PotentialError(f"Dimension mismatch: got shape {x.shape}, need (..., {self.k}, N, N)")
        return x

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray, block: Block = Block.ALL) -> np.ndarray:
        g = self.full_grad(self._check(x))
        if block == Block.X:
            return g[..., :self.m, :, :]
        if block == Block.Y:
            return g[..., self.m:, :, :]
        return g

    def value(self, x: np.ndarray) -> np.ndarray:
        """V(x) − V(0)."""
        raise PotentialError(f"{self.label} does not provide potential values")

    def as_quadratic(self) -> Optional['QuadraticPotential']:
        """Equivalent QuadraticPotential when the law is Gaussian, else None."""
        return None

    def split(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return z[..., :self.m, :, :], z[..., self.m:, :, :]

    def combine(self, x: np.ndarray, y: Optional[np.ndarray]) -> np.ndarray:
        if self.n == 0 or y is None:
            return x
        batch = np.broadcast_shapes(x.shape[:-3], y.shape[:-3])
        N = x.shape[-1]
        x = np.broadcast_to(x, batch + (self.m, N, N))
        y = np.broadcast_to(y, batch + (self.n, N, N))
        return np.concatenate([x, y], axis=-3)

    def mean_hint(self, N: int) -> np.ndarray:
        """A reasonable chain starting point."""
        return np.zeros((self.k, N, N), dtype=np.complex128)

    def get_info(self) -> Dict[str, Any]:
        return {
            'kind': type(self).__name__,
            'label': self.label,
            'partition': [self.m, self.n],
            'window': [self.c, self.C],
            'region_radius': self.region_radius,
        }

    def __repr__(self):
        return f"{type(self).__name__}({self.label}, m={self.m}, n={self.n}, c={self.c:g}, C={self.C:g})"


# ------------------------------------------------------------------
# Gaussian potentials
# ------------------------------------------------------------------

class QuadraticPotential(PotentialSpec):
    """
    V(x) = ½⟨x − a, Q(x − a)⟩₂ with a = (α_1 I, ..., α_k I).

    Q is a real symmetric positive definite k×k matrix acting on the tuple
    index; the window is its eigenvalue range unless given.
    """

    def __init__(self, shift: Union[Sequence[float], np.ndarray, None] = None,
                 precision: Optional[np.ndarray] = None,
                 m: Optional[int] = None, n: int = 0,
                 c: Optional[float] = None, C: Optional[float] = None, label: str = ""):
        if precision is None:
            size = m + n if m is not None else len(_shift_scalars(shift))
            precision = np.eye(size)
        precision = np.atleast_2d(np.asarray(precision, dtype=float))
        k = precision.shape[0]
        if precision.shape != (k, k) or not np.allclose(precision, precision.T, atol=1e-12):
            raise PotentialError(f"Invalid precision matrix: shape {precision.shape} (must be symmetric k×k)")
        eig = np.linalg.eigvalsh(precision)
        if eig[0] <= 0:
            raise PotentialError(f"Invalid precision matrix: smallest eigenvalue {eig[0]:.3g} (must be > 0)")
        alpha = np.zeros(k) if shift is None else _shift_scalars(shift)
        if alpha.shape != (k,):
            raise PotentialError(f"Invalid shift length: {alpha.shape[0]} (must be {k})")
        if m is None:
            m = k - n
        super().__init__(m, n, eig[0] if c is None else c, eig[-1] if C is None else C,
                         label or "quadratic")
        self.precision = precision
        self.alpha = alpha

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return apply_mixing(self.precision, x - scalar_tuple(self.alpha, x.shape[-1]))

    def value(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        d = x - scalar_tuple(self.alpha, x.shape[-1])
        return 0.5 * inner(d, apply_mixing(self.precision, d)) - 0.5 * self.alpha @ self.precision @ self.alpha

    def as_quadratic(self) -> 'QuadraticPotential':
        return self

    def mean_hint(self, N: int) -> np.ndarray:
        return scalar_tuple(self.alpha, N)

    def covariance(self) -> np.ndarray:
        """Q⁻¹: Cov of the real coordinates is Q⁻¹ ⊗ (1/N)."""
        return np.linalg.inv(self.precision)

    def conditional(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        (Q_xx, B) such that X | Y = y has precision Q_xx and mean
        a_x − B (y − a_y), B = Q_xx⁻¹ Q_xy.
        """
        Q = self.precision
        Qxx = Q[:self.m, :self.m]
        B = np.linalg.solve(Qxx, Q[:self.m, self.m:]) if self.n else np.zeros((self.m, 0))
        return Qxx, B

    def conditional_mean(self, y: Optional[np.ndarray], N: int) -> np.ndarray:
        ax = scalar_tuple(self.alpha[:self.m], N)
        if self.n == 0 or y is None:
            return ax
        _, B = self.conditional()
        return ax - apply_mixing(B, y - scalar_tuple(self.alpha[self.m:], N))

    def evolved_x_grad(self, t: float, x: np.ndarray, y: Optional[np.ndarray]) -> np.ndarray:
        """Closed form D_xV_t(x, y) = (Q_xx⁻¹ + t)⁻¹ (x − μ(y))."""
        Qxx, _ = self.conditional()
        P_t = np.linalg.inv(np.linalg.inv(Qxx) + t * np.eye(self.m))
        return apply_mixing(P_t, x - self.conditional_mean(y, x.shape[-1]))

    def entropy(self, conditional: bool = True) -> float:
        """Closed-form normalized entropy h^(N): (k/2) log 2πe − ½ log det P."""
        if conditional and self.n:
            P = self.conditional()[0]
        else:
            P = self.precision
        size = P.shape[0]
        return 0.5 * size * np.log(2 * np.pi * np.e) - 0.5 * np.linalg.slogdet(P)[1]

    def get_info(self) -> Dict[str, Any]:
        info = super().get_info()
        info.update(shift=self.alpha.tolist(), precision=self.precision.tolist())
        return info


def _shift_scalars(shift) -> np.ndarray:
    arr = np.asarray(shift)
    if arr.ndim <= 1:
        return np.atleast_1d(arr.astype(float))
    tup = as_matrix_tuple(arr)
    N = tup.shape[-1]
    alpha = np.real(tau(tup))
    deviation = np.max(np.abs(tup - scalar_tuple(alpha, N)))
    if deviation > 1e-12:
        raise PotentialError(f"Quadratic shift must be scalar multiples of I: deviation {deviation:.3e}")
    return alpha


# ------------------------------------------------------------------
# Trace polynomial potentials
# ------------------------------------------------------------------

class TracePolyPotential(PotentialSpec):
    """Potential given by a self-adjoint scalar trace polynomial."""

    def __init__(self, poly: ScalarTracePoly, m: Optional[int] = None, n: int = 0,
                 c: float = 1.0, C: float = 1.0, label: str = "",
                 region_radius: Optional[float] = None):
        if not poly.is_self_adjoint():
            raise PotentialError("Trace polynomial potential must be self-adjoint")
        if m is None:
            m = poly.nvars - n
        if m + n != poly.nvars:
            raise PotentialError(f"Partition ({m}, {n}) does not match {poly.nvars} variables")
        super().__init__(m, n, c, C, label or str(poly), region_radius)
        self.poly = poly
        self.gradients = [cyclic_gradient(poly, j) for j in range(poly.nvars)]
        self._constant = poly.terms.get((), 0.0)

    @classmethod
    def from_text(cls, text: str, m: Optional[int] = None, n: int = 0,
                  c: float = 1.0, C: float = 1.0, **kwargs) -> 'TracePolyPotential':
        """Parse `0.5*tr(x1^2) + ...`; x-variables x1..xm, y-variables y1..yn."""
        poly = parse_potential(text, n_x=m, n_y=n)
        return cls(poly, m=poly.nvars - n, n=n, c=c, C=C, label=text, **kwargs)

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        parts = [evaluate_operator(g, x) for g in self.gradients]
        return hermitize(np.stack(parts, axis=-3))

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.real(evaluate_scalar(self.poly, self._check(x))) - np.real(self._constant)


# ------------------------------------------------------------------
# Composite potentials
# ------------------------------------------------------------------

class LinearImagePotential(PotentialSpec):
    """Law of A X for X ~ base: V̂(x) = V(A⁻¹x), DV̂(x) = (A⁻¹)ᵀ DV(A⁻¹x)."""

    def __init__(self, base: PotentialSpec, A: np.ndarray, m: Optional[int] = None, n: int = 0,
                 rule: WindowRule = WindowRule.SHARP, label: str = ""):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape != (base.k, base.k):
            raise PotentialError(f"Invalid mixing matrix shape: {A.shape} (must be ({base.k}, {base.k}))")
        if abs(np.linalg.det(A)) < 1e-12:
            raise PotentialError("Singular mixing matrix A")
        A_inv = np.linalg.inv(A)
        norm_A = np.linalg.norm(A, 2)
        norm_A_inv = np.linalg.norm(A_inv, 2)
        power = 2 if rule == WindowRule.SHARP else 1
        c = base.c / norm_A ** power
        C = base.C * norm_A_inv ** power
        if m is None:
            m = base.k - n
        super().__init__(m, n, c, C, label or f"A·({base.label})")
        self.base = base
        self.A = A
        self.A_inv = A_inv
        self.rule = rule

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return apply_mixing(self.A_inv.T, self.base.full_grad(apply_mixing(self.A_inv, x)))

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.base.value(apply_mixing(self.A_inv, self._check(x)))

    def as_quadratic(self) -> Optional[QuadraticPotential]:
        q = self.base.as_quadratic()
        if q is None:
            return None
        precision = self.A_inv.T @ q.precision @ self.A_inv
        return QuadraticPotential(self.A @ q.alpha, 0.5 * (precision + precision.T),
                                  m=self.m, n=self.n, label=self.label)

    def mean_hint(self, N: int) -> np.ndarray:
        return apply_mixing(self.A, self.base.mean_hint(N))


class JoinPotential(PotentialSpec):
    """Independent join V(x, y) = V₁(x) + V₂(y); left variables form the x-block."""

    def __init__(self, left: PotentialSpec, right: PotentialSpec, label: str = ""):
        super().__init__(left.k, right.k, min(left.c, right.c), max(left.C, right.C),
                         label or f"({left.label}) ⊕ ({right.label})")
        self.left = left
        self.right = right

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([self.left.full_grad(x[..., :self.left.k, :, :]),
                               self.right.full_grad(x[..., self.left.k:, :, :])], axis=-3)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        return self.left.value(x[..., :self.left.k, :, :]) + self.right.value(x[..., self.left.k:, :, :])

    def as_quadratic(self) -> Optional[QuadraticPotential]:
        ql, qr = self.left.as_quadratic(), self.right.as_quadratic()
        if ql is None or qr is None:
            return None
        k1, k2 = self.left.k, self.right.k
        precision = np.zeros((k1 + k2, k1 + k2))
        precision[:k1, :k1] = ql.precision
        precision[k1:, k1:] = qr.precision
        return QuadraticPotential(np.concatenate([ql.alpha, qr.alpha]), precision,
                                  m=self.m, n=self.n, label=self.label)

    def mean_hint(self, N: int) -> np.ndarray:
        return np.concatenate([self.left.mean_hint(N), self.right.mean_hint(N)], axis=0)


class MarginalPotential(PotentialSpec):
    """
    Law of the variables `keep` of base, with the remaining variables hidden.

    The gradient is E[D_keep V(H, Z) | Z = z], estimated by sampling the
    hidden variables; the window is inherited from base.
    """

    def __init__(self, base: PotentialSpec, keep: Sequence[int], m: Optional[int] = None,
                 n: int = 0, sampler_cfg: Any = None, seed: int = 0, label: str = ""):
        keep = list(keep)
        if sorted(set(keep)) != sorted(keep) or any(not 0 <= i < base.k for i in keep) or not keep:
            raise PotentialError(f"Invalid kept variables: {keep} (must be distinct indices in 0-{base.k - 1})")
        if m is None:
            m = len(keep) - n
        super().__init__(m, n, base.c, base.C, label or f"marginal{tuple(keep)}({base.label})")
        self.base = base
        self.keep = keep
        self.hidden = [i for i in range(base.k) if i not in keep]
        self.sampler_cfg = sampler_cfg
        self.seed = seed

    def embed(self, hidden: np.ndarray, kept: np.ndarray) -> np.ndarray:
        """Assemble base-ordered variables from hidden and kept parts."""
        batch = np.broadcast_shapes(hidden.shape[:-3], kept.shape[:-3])
        N = kept.shape[-1]
        out = np.zeros(batch + (self.base.k, N, N), dtype=np.complex128)
        out[..., self.hidden, :, :] = hidden
        out[..., self.keep, :, :] = kept
        return out

    def full_grad(self, z: np.ndarray) -> np.ndarray:
        estimate, _ = self.sampled_grad(z)
        return estimate

    def sampled_grad(self, z: np.ndarray) -> Tuple[np.ndarray, float]:
        from sampler import SamplerConfig, batch_means, sample_target

        cfg = self.sampler_cfg or SamplerConfig.inner()
        if z.ndim > 3:
            results = [self.sampled_grad(zi) for zi in z.reshape((-1,) + z.shape[-3:])]
            est = np.stack([r[0] for r in results]).reshape(z.shape)
            return est, max(r[1] for r in results)
        N = z.shape[-1]
        base = self.base

        def hidden_grad(h):
            return base.full_grad(self.embed(h, z))[..., self.hidden, :, :]

        x0 = base.mean_hint(N)[self.hidden]
        chain = sample_target(hidden_grad, x0, N, cfg, seed=self.seed, curvature=base.C)
        states = chain.flat()
        values = base.full_grad(self.embed(states, z))[..., self.keep, :, :]
        bm = batch_means(values.reshape(chain.states.shape[:2] + values.shape[1:]))
        return bm.mean, bm.norm_se()


def join(left: PotentialSpec, right: PotentialSpec) -> JoinPotential:
    return JoinPotential(left, right)


def linear_image(base: PotentialSpec, A: np.ndarray, m: Optional[int] = None, n: int = 0,
                 rule: WindowRule = WindowRule.SHARP) -> PotentialSpec:
    return LinearImagePotential(base, A, m=m, n=n, rule=rule)


def marginal(V: PotentialSpec, keep: Sequence[int], m: Optional[int] = None, n: int = 0,
             sampler_cfg: Any = None, seed: int = 0) -> PotentialSpec:
    """
    Marginal law of the variables `keep` (in the given order).

    Gaussian potentials give the Schur-complement QuadraticPotential;
    anything else gives a MarginalPotential.
    """
    keep = list(keep)
    q = V.as_quadratic()
    if q is not None:
        hidden = [i for i in range(V.k) if i not in keep]
        Q = q.precision
        schur = Q[np.ix_(keep, keep)]
        if hidden:
            schur = schur - Q[np.ix_(keep, hidden)] @ np.linalg.solve(Q[np.ix_(hidden, hidden)],
                                                                    Q[np.ix_(hidden, keep)])
        return QuadraticPotential(q.alpha[keep], 0.5 * (schur + schur.T),
                                  m=len(keep) - n if m is None else m, n=n,
                                  label=f"marginal{tuple(keep)}({V.label})")
    return MarginalPotential(V, keep, m=m, n=n, sampler_cfg=sampler_cfg, seed=seed)


class RepartitionedPotential(PotentialSpec):
    """The same law with a different x/y split of its variables."""

    def __init__(self, base: PotentialSpec, m: int, label: str = ""):
        if not 0 <= m <= base.k:
            raise PotentialError(f"Invalid x-block size: {m} (must be in 0-{base.k})")
        super().__init__(m, base.k - m, base.c, base.C, label or base.label, base.region_radius)
        self.base = base

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return self.base.full_grad(x)

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.base.value(x)

    def as_quadratic(self) -> Optional[QuadraticPotential]:
        q = self.base.as_quadratic()
        if q is None:
            return None
        return QuadraticPotential(q.alpha, q.precision, m=self.m, n=self.n, label=self.label)

    def mean_hint(self, N: int) -> np.ndarray:
        return self.base.mean_hint(N)


def repartition(V: PotentialSpec, m: int) -> PotentialSpec:
    """View V with its first m variables as the x-block."""
    if m == V.m:
        return V
    if isinstance(V, QuadraticPotential):
        return QuadraticPotential(V.alpha, V.precision, m=m, n=V.k - m, label=V.label)
    return RepartitionedPotential(V, m)


@dataclass
class Convolution:
    """
    Free-convolution semantics: the law of X + Y for independent X ~ left,
    Y ~ right, realized as the y-block of the linear image of the join
    under (x, y) ↦ (y − x, x + y).
    """
    left: PotentialSpec
    right: PotentialSpec
    joint: LinearImagePotential
    c: float
    C: float

    def marginal(self, **kwargs) -> PotentialSpec:
        k = self.left.k
        return marginal(self.joint, list(range(k, 2 * k)), **kwargs)

    def sample(self, N: int, cfg: Any) -> np.ndarray:
        """Sum of independent samples, shape (draws, k, N, N)."""
        from sampler import sample
        a = sample(self.left, N, cfg).flat()
        b = sample(self.right, N, replace(cfg, seed=cfg.seed + 1)).flat()
        return a + b


def convolve(left: PotentialSpec, right: PotentialSpec,
             rule: WindowRule = WindowRule.SHARP) -> Convolution:
    if left.k != right.k:
        raise PotentialError(f"Convolution needs equal variable counts: {left.k} vs {right.k}")
    k = left.k
    I = np.eye(k)
    A = np.block([[-I, I], [I, I]])
    joint = LinearImagePotential(JoinPotential(left, right), A, m=k, n=k, rule=rule)
    if rule == WindowRule.STATED:
        c, C = np.sqrt(2) * min(left.c, right.c), np.sqrt(2) * max(left.C, right.C)
    else:
        c, C = joint.c, joint.C
    return Convolution(left, right, joint, c, C)


# ------------------------------------------------------------------
# Gradient access and checks
# ------------------------------------------------------------------

def grad(V: PotentialSpec, x: np.ndarray, block: Union[Block, str] = Block.ALL) -> np.ndarray:
    return V.grad(x, Block(block))


@dataclass
class WindowReport:
    """Empirical secant ratios ⟨DV(x)−DV(x′), x−x′⟩₂ / ‖x−x′‖₂² and Lipschitz ratios."""
    c: float
    C: float
    min_ratio: float
    max_ratio: float
    max_lipschitz: float
    trials: int
    tol: float
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def hessian_window_check(V: PotentialSpec, N: int, c: Optional[float] = None,
                         C: Optional[float] = None, trials: int = 50, seed: int = 0,
                         tol: float = 1e-8, y: Optional[np.ndarray] = None) -> WindowReport:
    """
    Sample random pairs and compare secant ratios against [c, C].

    Potentials with a region_radius are probed only on tuples whose matrices
    have operator norm at most that radius.
    """
    if trials < 1:
        raise PotentialError(f"Invalid trial count: {trials} (must be >= 1)")
    c = V.c if c is None else c
    C = V.C if C is None else C
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(V.c)
    x = V.mean_hint(N) + scale * sample_gue(rng, V.k, N, size=(trials,))
    step = rng.uniform(0.05, 1.0, size=(trials, 1, 1, 1)) * scale
    xp = x + step * sample_gue(rng, V.k, N, size=(trials,))
    if V.region_radius is not None:
        x = _clip_opnorm(x, V.region_radius)
        xp = _clip_opnorm(xp, V.region_radius)
    dx = x - xp
    dg = V.full_grad(x) - V.full_grad(xp)
    denom = inner(dx, dx)
    ratios = inner(dg, dx) / denom
    lips = norm2(dg) / np.sqrt(denom)
    report = WindowReport(c=c, C=C, min_ratio=float(np.min(ratios)), max_ratio=float(np.max(ratios)),
                          max_lipschitz=float(np.max(lips)), trials=trials, tol=tol, passed=False)
    report.passed = bool(report.min_ratio >= c - tol and report.max_ratio <= C + tol
                         and report.max_lipschitz <= C + tol)
    logger.debug("Window check %s: ratios [%.4g, %.4g], lipschitz %.4g", V.label,
                 report.min_ratio, report.max_ratio, report.max_lipschitz)
    return report


def _clip_opnorm(x: np.ndarray, radius: float) -> np.ndarray:
    norms = opnorm(x)
    factor = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
    return x * factor[..., None, None]


def ensure_window(V: PotentialSpec, N: int, trials: int = 20) -> None:
    """Run hessian_window_check once per (V, N); raise if the declared window fails."""
    if isinstance(V, MarginalPotential) or N in V._window_checked:
        return
    report = hessian_window_check(V, N, trials=trials)
    if not report.passed:
        logger.error("Declared window [%g, %g] failed for %s: ratios [%.4g, %.4g]",
                     V.c, V.C, V.label, report.min_ratio, report.max_ratio)
        raise PotentialError(
            f"Declared window [{V.c:g}, {V.C:g}] fails: empirical [{report.min_ratio:.4g}, {report.max_ratio:.4g}]")
    V._window_checked.add(N)


def marginal_grad(V: PotentialSpec, y: np.ndarray, sampler_cfg: Any = None, seed: int = 0,
                  exact: Optional[bool] = None) -> Tuple[np.ndarray, float]:
    """
    D W(y) for the y-marginal W of V: E[D_yV(X, Y) | Y = y].

    Uses the Schur complement for Gaussian V (unless exact=False) and
    conditioned sampling otherwise. Returns (estimate, standard error in ‖·‖₂).
    """
    y = np.asarray(y, dtype=np.complex128)
    if V.m == 0:
        return V.full_grad(y), 0.0
    if y.shape[-3] != V.n:
        raise PotentialError(f"Dimension mismatch: y has {y.shape[-3]} matrices, need {V.n}")
    use_exact = V.as_quadratic() is not None if exact is None else exact
    if use_exact:
        q = V.as_quadratic()
        if q is None:
            raise PotentialError(f"{V.label} has no closed-form marginal")
        W = marginal(q, list(range(V.m, V.k)))
        return W.full_grad(y), 0.0
    hidden = MarginalPotential(V, list(range(V.m, V.k)), sampler_cfg=sampler_cfg, seed=seed)
    return hidden.sampled_grad(y)


# ------------------------------------------------------------------
# Model presets
# ------------------------------------------------------------------

def gue_potential(m: int = 1) -> QuadraticPotential:
    """V = ½‖x‖₂²: the GUE law."""
    return QuadraticPotential(np.zeros(m), np.eye(m), label="gue")


def shifted_gaussian(alpha: float = 1.0, m: int = 1) -> QuadraticPotential:
    """V = ½‖x − αI‖₂²."""
    return QuadraticPotential(np.full(m, alpha), np.eye(m), label=f"shifted(alpha={alpha:g})")


def coupled_gaussian(lam: float = 0.5, n: int = 1) -> QuadraticPotential:
    """V = ½τ(x₁²) + ½τ(x₂²) + λτ(x₁x₂); window [1−|λ|, 1+|λ|]."""
    if not -1 < lam < 1:
        raise PotentialError(f"Invalid coupling: {lam} (must be in (-1, 1))")
    return QuadraticPotential(np.zeros(2), np.array([[1.0, lam], [lam, 1.0]]), m=2 - n, n=n,
                              label=f"coupled(lambda={lam:g})")


def coupled_gaussian_tracepoly(lam: float = 0.5, n: int = 1) -> TracePolyPotential:
    """The coupled Gaussian written as a trace polynomial."""
    text = f"0.5*tr(x1^2) + 0.5*tr(x2^2) + {lam!r}*tr(x1 x2)"
    poly = parse_potential(text)
    return TracePolyPotential(poly, m=2 - n, n=n, c=1 - abs(lam), C=1 + abs(lam), label=text)


def quartic_potential(g: float = 0.1, radius: float = 2.0) -> TracePolyPotential:
    """V = ½τ(x²) + g τ(x⁴), declared window [1, 1 + 12 g R²] on ‖x‖∞ ≤ R."""
    if g < 0 or radius <= 0:
        raise PotentialError(f"Invalid quartic parameters: g={g}, R={radius} (need g >= 0, R > 0)")
    text = f"0.5*tr(x^2) + {g!r}*tr(x^4)"
    return TracePolyPotential(parse_potential(text), m=1, c=1.0, C=1.0 + 12.0 * g * radius ** 2,
                              label=f"quartic(g={g:g})", region_radius=radius)
