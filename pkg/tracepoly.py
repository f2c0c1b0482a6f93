"""
Trace Polynomial Algebra

Symbolic scalar- and operator-valued trace polynomials in self-adjoint
variables x_1..x_m, kept in cyclic canonical form. Provides the *-algebra
operations, evaluation on matrix tuples, cyclic gradients, free difference
quotients, the Laplacians L^(N) / L and the heat semigroup e^{tL/2}.

Words are tuples of 0-based variable indices. A scalar term is keyed by the
sorted multiset of its traced words (each stored as its least cyclic
rotation); an operator term additionally carries a word factor that is not
cyclically reduced. The empty traced word τ(1) = 1 is dropped on
construction.

Text grammar (see parse_trace_poly):
    0.5*tr(x1^2) + 0.25*tr(x1 x2 x1 x2)
    tr(x1^2)*x1
"""

import logging
import re
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import expm

from errors import TracePolyError, TracePolyParseError

logger = logging.getLogger('FreeGibbs.tracepoly')

Word = Tuple[int, ...]
TraceKey = Tuple[Word, ...]
OperatorKey = Tuple[TraceKey, Word]
Number = Union[int, float, complex]

# Coefficients at or below this magnitude are treated as cancelled
ZERO_TOL = 1e-14

# Largest degree accepted by heat_apply
MAX_HEAT_DEGREE = 12


def cyclic_canonical(word: Sequence[int]) -> Word:
    """Least cyclic rotation of a word (the TracedWord representative)."""
    word = tuple(word)
    if not word:
        return word
    return min(word[i:] + word[:i] for i in range(len(word)))


def _order(word: Word) -> Tuple[int, Word]:
    return (len(word), word)


def _canonical_trace_key(words: Iterable[Sequence[int]]) -> TraceKey:
    traced = [cyclic_canonical(w) for w in words]
    return tuple(sorted((w for w in traced if w), key=_order))


def _key_degree(key: TraceKey) -> int:
    return sum(len(w) for w in key)


def _rotation_after(word: Word, p: int) -> Word:
    """The word w[p+1:] w[:p] left after cutting w at position p."""
    return word[p + 1:] + word[:p]


def _accumulate(target: Dict, key, coef: complex) -> None:
    target[key] = target.get(key, 0.0) + coef


def _prune(terms: Mapping) -> Dict:
    return {k: complex(c) for k, c in terms.items() if abs(c) > ZERO_TOL}


# ------------------------------------------------------------------
# Polynomial types
# ------------------------------------------------------------------

class ScalarTracePoly:
    """
    Scalar-valued trace polynomial (element of TrP⁰_m).

    Immutable; the constructor canonicalizes keys, merges equal terms and
    drops zero coefficients.
    """

    __slots__ = ('nvars', '_terms')

    def __init__(self, terms: Mapping[Iterable[Sequence[int]], Number], nvars: int):
        if nvars < 0:
            raise TracePolyError(f"Invalid variable count: {nvars} (must be >= 0)")
        merged: Dict[TraceKey, complex] = {}
        for key, coef in terms.items():
            ckey = _canonical_trace_key(key)
            for w in ckey:
                _check_letters(w, nvars)
            _accumulate(merged, ckey, coef)
        pruned = _prune(merged)
        object.__setattr__(self, 'nvars', nvars)
        object.__setattr__(self, '_terms',
                           dict(sorted(pruned.items(), key=lambda kv: (_key_degree(kv[0]), kv[0]))))

    def __setattr__(self, name, value):
        raise AttributeError("ScalarTracePoly is immutable")

    @classmethod
    def constant(cls, value: Number, nvars: int) -> 'ScalarTracePoly':
        return cls({(): value}, nvars)

    @classmethod
    def trace(cls, word: Sequence[int], nvars: int, coef: Number = 1.0) -> 'ScalarTracePoly':
        """The monomial coef·τ(word)."""
        return cls({(tuple(word),): coef}, nvars)

    @property
    def terms(self) -> Dict[TraceKey, complex]:
        return dict(self._terms)

    @property
    def degree(self) -> int:
        return max((_key_degree(k) for k in self._terms), default=0)

    def adjoint(self) -> 'ScalarTracePoly':
        return ScalarTracePoly(
            {tuple(w[::-1] for w in key): np.conj(c) for key, c in self._terms.items()},
            self.nvars)

    def is_self_adjoint(self, tol: float = 1e-12) -> bool:
        return self.allclose(self.adjoint(), tol)

    def allclose(self, other: 'ScalarTracePoly', tol: float = 1e-12) -> bool:
        diff = self - other
        return all(abs(c) <= tol for c in diff._terms.values())

    def __add__(self, other):
        other = _lift(other, self)
        if isinstance(other, OperatorTracePoly):
            return self.as_operator() + other
        _check_nvars(self, other)
        merged = dict(self._terms)
        for k, c in other._terms.items():
            _accumulate(merged, k, c)
        return ScalarTracePoly(merged, self.nvars)

    __radd__ = __add__

    def __neg__(self):
        return ScalarTracePoly({k: -c for k, c in self._terms.items()}, self.nvars)

    def __sub__(self, other):
        return self + (-_lift(other, self))

    def __rsub__(self, other):
        return _lift(other, self) - self

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return ScalarTracePoly({k: c * other for k, c in self._terms.items()}, self.nvars)
        if isinstance(other, OperatorTracePoly):
            return self.as_operator() * other
        if not isinstance(other, ScalarTracePoly):
            return NotImplemented
        _check_nvars(self, other)
        out: Dict[TraceKey, complex] = {}
        for k1, c1 in self._terms.items():
            for k2, c2 in other._terms.items():
                _accumulate(out, k1 + k2, c1 * c2)
        return ScalarTracePoly(out, self.nvars)

    def __rmul__(self, other):
        return self * other

    def __eq__(self, other):
        if not isinstance(other, ScalarTracePoly):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self):
        return hash((self.nvars, tuple(self._terms.items())))

    def as_operator(self) -> 'OperatorTracePoly':
        """The same polynomial times the identity word."""
        return OperatorTracePoly({(k, ()): c for k, c in self._terms.items()}, self.nvars)

    def __str__(self):
        return _format_terms(((k, ()) for k in self._terms), self._terms.values())

    def __repr__(self):
        return f"ScalarTracePoly({self}, nvars={self.nvars})"


class OperatorTracePoly:
    """
    Operator-valued trace polynomial (element of TrP¹_m).

    Terms are keyed by (traced multiset, word); the word factor keeps its
    letter order.
    """

    __slots__ = ('nvars', '_terms')

    def __init__(self, terms: Mapping[Tuple[Iterable[Sequence[int]], Sequence[int]], Number], nvars: int):
        if nvars < 0:
            raise TracePolyError(f"Invalid variable count: {nvars} (must be >= 0)")
        merged: Dict[OperatorKey, complex] = {}
        for (traced, word), coef in terms.items():
            ckey = _canonical_trace_key(traced)
            word = tuple(word)
            for w in ckey + (word,):
                _check_letters(w, nvars)
            _accumulate(merged, (ckey, word), coef)
        pruned = _prune(merged)
        object.__setattr__(self, 'nvars', nvars)
        object.__setattr__(self, '_terms', dict(sorted(
            pruned.items(),
            key=lambda kv: (_key_degree(kv[0][0]) + len(kv[0][1]), kv[0]))))

    def __setattr__(self, name, value):
        raise AttributeError("OperatorTracePoly is immutable")

    @classmethod
    def word(cls, word: Sequence[int], nvars: int, coef: Number = 1.0) -> 'OperatorTracePoly':
        return cls({((), tuple(word)): coef}, nvars)

    @property
    def terms(self) -> Dict[OperatorKey, complex]:
        return dict(self._terms)

    @property
    def degree(self) -> int:
        return max((_key_degree(k) + len(w) for k, w in self._terms), default=0)

    def adjoint(self) -> 'OperatorTracePoly':
        return OperatorTracePoly(
            {(tuple(t[::-1] for t in key), word[::-1]): np.conj(c)
             for (key, word), c in self._terms.items()},
            self.nvars)

    def is_self_adjoint(self, tol: float = 1e-12) -> bool:
        return self.allclose(self.adjoint(), tol)

    def allclose(self, other: 'OperatorTracePoly', tol: float = 1e-12) -> bool:
        diff = self - other
        return all(abs(c) <= tol for c in diff._terms.values())

    def trace(self) -> ScalarTracePoly:
        """τ applied termwise."""
        return ScalarTracePoly({key + (word,): c for (key, word), c in self._terms.items()},
                               self.nvars)

    def __add__(self, other):
        other = _lift(other, self)
        if isinstance(other, ScalarTracePoly):
            other = other.as_operator()
        _check_nvars(self, other)
        merged = dict(self._terms)
        for k, c in other._terms.items():
            _accumulate(merged, k, c)
        return OperatorTracePoly(merged, self.nvars)

    __radd__ = __add__

    def __neg__(self):
        return OperatorTracePoly({k: -c for k, c in self._terms.items()}, self.nvars)

    def __sub__(self, other):
        return self + (-_lift(other, self))

    def __rsub__(self, other):
        return _lift(other, self) - self

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return OperatorTracePoly({k: c * other for k, c in self._terms.items()}, self.nvars)
        if isinstance(other, ScalarTracePoly):
            other = other.as_operator()
        if not isinstance(other, OperatorTracePoly):
            return NotImplemented
        _check_nvars(self, other)
        out: Dict[OperatorKey, complex] = {}
        for (k1, w1), c1 in self._terms.items():
            for (k2, w2), c2 in other._terms.items():
                _accumulate(out, (k1 + k2, w1 + w2), c1 * c2)
        return OperatorTracePoly(out, self.nvars)

    def __rmul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return self * other
        if isinstance(other, ScalarTracePoly):
            return other.as_operator() * self
        return NotImplemented

    def __eq__(self, other):
        if not isinstance(other, OperatorTracePoly):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self):
        return hash((self.nvars, tuple(self._terms.items())))

    def __str__(self):
        return _format_terms(self._terms.keys(), self._terms.values())

    def __repr__(self):
        return f"OperatorTracePoly({self}, nvars={self.nvars})"


TracePoly = Union[ScalarTracePoly, OperatorTracePoly]


class BiWord:
    """Element of NCP_m ⊗ NCP_m: a linear combination of (left, right) word pairs."""

    __slots__ = ('nvars', '_terms')

    def __init__(self, terms: Mapping[Tuple[Sequence[int], Sequence[int]], Number], nvars: int):
        merged: Dict[Tuple[Word, Word], complex] = {}
        for (a, b), c in terms.items():
            _accumulate(merged, (tuple(a), tuple(b)), c)
        object.__setattr__(self, 'nvars', nvars)
        object.__setattr__(self, '_terms', dict(sorted(_prune(merged).items())))

    def __setattr__(self, name, value):
        raise AttributeError("BiWord is immutable")

    @property
    def terms(self) -> Dict[Tuple[Word, Word], complex]:
        return dict(self._terms)

    def __add__(self, other: 'BiWord') -> 'BiWord':
        _check_nvars(self, other)
        merged = dict(self._terms)
        for k, c in other._terms.items():
            _accumulate(merged, k, c)
        return BiWord(merged, self.nvars)

    def __mul__(self, scalar: Number) -> 'BiWord':
        return BiWord({k: c * scalar for k, c in self._terms.items()}, self.nvars)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, BiWord):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self):
        return hash((self.nvars, tuple(self._terms.items())))

    def left_multiply(self, word: Sequence[int]) -> 'BiWord':
        """(p ⊗ 1)·(a ⊗ b) = pa ⊗ b."""
        word = tuple(word)
        return BiWord({(word + a, b): c for (a, b), c in self._terms.items()}, self.nvars)

    def right_multiply(self, word: Sequence[int]) -> 'BiWord':
        """(a ⊗ b)·(1 ⊗ q) = a ⊗ bq."""
        word = tuple(word)
        return BiWord({(a, b + word): c for (a, b), c in self._terms.items()}, self.nvars)

    def evaluate_tau_tau(self, x: np.ndarray) -> Union[complex, np.ndarray]:
        """(τ_N ⊗ τ_N) of the evaluated element."""
        ev = _WordEvaluator(x, self.nvars)
        total = 0.0
        for (a, b), c in self._terms.items():
            total = total + c * ev.tau(a) * ev.tau(b)
        return _scalar_result(total, x)

    def __str__(self):
        if not self._terms:
            return "0"
        return " + ".join(f"{_format_coef(c)}*[{_format_word(a) or '1'} ⊗ {_format_word(b) or '1'}]"
                          for (a, b), c in self._terms.items())

    def __repr__(self):
        return f"BiWord({self}, nvars={self.nvars})"


def _check_letters(word: Word, nvars: int) -> None:
    for letter in word:
        if not 0 <= letter < nvars:
            raise TracePolyError(f"Invalid variable index: {letter} (must be 0-{nvars - 1})")


def _check_nvars(a, b) -> None:
    if a.nvars != b.nvars:
        raise TracePolyError(f"Variable-count mismatch: {a.nvars} vs {b.nvars}")


def _lift(other, like):
    if isinstance(other, (int, float, complex, np.number)):
        return ScalarTracePoly.constant(other, like.nvars)
    if isinstance(other, (ScalarTracePoly, OperatorTracePoly)):
        return other
    raise TracePolyError(f"Cannot combine trace polynomial with {type(other).__name__}")


# ------------------------------------------------------------------
# Functional API
# ------------------------------------------------------------------

def canonicalize(poly: TracePoly) -> TracePoly:
    """Rebuild poly in canonical form (idempotent; constructors already canonicalize)."""
    if isinstance(poly, ScalarTracePoly):
        return ScalarTracePoly(poly.terms, poly.nvars)
    return OperatorTracePoly(poly.terms, poly.nvars)


def add(f: TracePoly, g: TracePoly) -> TracePoly:
    return f + g


def mul(f: TracePoly, g: TracePoly) -> TracePoly:
    return f * g


def scalar_mul(a: Number, f: TracePoly) -> TracePoly:
    return f * a


def adjoint(f: TracePoly) -> TracePoly:
    return f.adjoint()


def trace_pair(f: OperatorTracePoly, g: OperatorTracePoly) -> ScalarTracePoly:
    """τ(f g) as a scalar trace polynomial."""
    return (f * g).trace()


# === EVALUATION ===

class _WordEvaluator:
    """Memoized word products and traces for one tuple (batched over leading axes)."""

    def __init__(self, x: np.ndarray, nvars: int):
        x = np.asarray(x)
        if x.ndim < 3 or x.shape[-1] != x.shape[-2]:
            raise TracePolyError(f"Invalid matrix tuple shape: {x.shape} (must be (..., m, N, N))")
        if x.shape[-3] != nvars:
            raise TracePolyError(f"Dimension mismatch: tuple has {x.shape[-3]} matrices, polynomial has {nvars} variables")
        self.x = x
        self.N = x.shape[-1]
        self._products: Dict[Word, np.ndarray] = {}
        self._traces: Dict[Word, np.ndarray] = {}

    def product(self, word: Word) -> np.ndarray:
        if word in self._products:
            return self._products[word]
        if not word:
            result = np.broadcast_to(np.eye(self.N, dtype=np.complex128),
                                     self.x.shape[:-3] + (self.N, self.N))
        elif len(word) == 1:
            result = self.x[..., word[0], :, :]
        else:
            result = self.product(word[:-1]) @ self.x[..., word[-1], :, :]
        self._products[word] = result
        return result

    def tau(self, word: Word):
        if not word:
            return 1.0
        if word not in self._traces:
            self._traces[word] = np.trace(self.product(word), axis1=-2, axis2=-1) / self.N
        return self._traces[word]

    def traced(self, key: TraceKey):
        value = 1.0
        for w in key:
            value = value * self.tau(w)
        return value


def _scalar_result(total, x):
    if np.ndim(total) == 0:
        return complex(total)
    return np.asarray(total, dtype=np.complex128)


def evaluate_scalar(f: ScalarTracePoly, x: np.ndarray) -> Union[complex, np.ndarray]:
    """Evaluate f at a tuple of shape (..., m, N, N); batched input gives an array."""
    ev = _WordEvaluator(x, f.nvars)
    total = np.zeros(ev.x.shape[:-3], dtype=np.complex128)
    for key, c in f.terms.items():
        total = total + c * ev.traced(key)
    return _scalar_result(total, x)


def evaluate_operator(f: OperatorTracePoly, x: np.ndarray) -> np.ndarray:
    """Evaluate an operator-valued trace polynomial; returns shape (..., N, N)."""
    ev = _WordEvaluator(x, f.nvars)
    N = ev.N
    total = np.zeros(ev.x.shape[:-3] + (N, N), dtype=np.complex128)
    for (key, word), c in f.terms.items():
        scalar = c * ev.traced(key)
        total = total + np.asarray(scalar)[..., None, None] * ev.product(word)
    return total


# === DERIVATIVES ===

def cyclic_gradient(V: ScalarTracePoly, j: int) -> OperatorTracePoly:
    """
    D_{x_j}V with respect to ⟨·,·⟩₂.

    For self-adjoint V the directional derivative along h e_j equals
    ⟨D_{x_j}V(x), h⟩₂ for every Hermitian h.
    """
    if not 0 <= j < V.nvars:
        raise TracePolyError(f"Invalid variable index: {j} (must be 0-{V.nvars - 1})")
    if not V.is_self_adjoint():
        raise TracePolyError("Cyclic gradient requires a self-adjoint potential")
    out: Dict[OperatorKey, complex] = {}
    for key, c in V.terms.items():
        for k, w in enumerate(key):
            others = key[:k] + key[k + 1:]
            for p, letter in enumerate(w):
                if letter == j:
                    _accumulate(out, (others, _rotation_after(w, p)), c)
    G = OperatorTracePoly(out, V.nvars)
    return (G + G.adjoint()) * 0.5


def free_difference_quotient(p: Sequence[int], j: int, nvars: int) -> BiWord:
    """∂_{x_j} p = Σ over occurrences p = a x_j b of a ⊗ b."""
    p = tuple(p)
    _check_letters(p, nvars)
    terms: Dict[Tuple[Word, Word], complex] = {}
    for i, letter in enumerate(p):
        if letter == j:
            _accumulate(terms, (p[:i], p[i + 1:]), 1.0)
    return BiWord(terms, nvars)


# === LAPLACIANS ===

@dataclass(frozen=True)
class LaplacianMode:
    """FiniteN(N) when N is set, LargeN otherwise."""
    N: Optional[int] = None

    @classmethod
    def finite_n(cls, N: int) -> 'LaplacianMode':
        if N < 1:
            raise TracePolyError(f"Invalid matrix size: {N} (must be >= 1)")
        return cls(N)

    @classmethod
    def large_n(cls) -> 'LaplacianMode':
        return cls(None)

    @property
    def cross_weight(self) -> float:
        """Weight of the terms coupling two different cut points (1/N², or 0 in the limit)."""
        return 0.0 if self.N is None else 1.0 / self.N ** 2


def _laplacian_scalar_key(key: TraceKey, letters, cross: float) -> Dict[TraceKey, complex]:
    out: Dict[TraceKey, complex] = {}
    for k, w in enumerate(key):
        others = key[:k] + key[k + 1:]
        for p in range(len(w)):
            if w[p] not in letters:
                continue
            for q in range(p + 1, len(w)):
                if w[q] == w[p]:
                    _accumulate(out, _canonical_trace_key(others + (w[p + 1:q], w[q + 1:] + w[:p])), 2.0)
    if cross:
        for k in range(len(key)):
            for l in range(k + 1, len(key)):
                rest = tuple(w for i, w in enumerate(key) if i not in (k, l))
                wk, wl = key[k], key[l]
                for p, a in enumerate(wk):
                    if a not in letters:
                        continue
                    for q, b in enumerate(wl):
                        if b == a:
                            merged = _rotation_after(wk, p) + _rotation_after(wl, q)
                            _accumulate(out, _canonical_trace_key(rest + (merged,)), 2.0 * cross)
    return out


def _laplacian_operator_key(key: OperatorKey, letters, cross: float) -> Dict[OperatorKey, complex]:
    traced, word = key
    out: Dict[OperatorKey, complex] = {}
    for tkey, c in _laplacian_scalar_key(traced, letters, cross).items():
        _accumulate(out, (tkey, word), c)
    for p in range(len(word)):
        if word[p] not in letters:
            continue
        for q in range(p + 1, len(word)):
            if word[q] == word[p]:
                _accumulate(out, (_canonical_trace_key(traced + (word[p + 1:q],)), word[:p] + word[q + 1:]), 2.0)
    if cross:
        for k, w in enumerate(traced):
            others = traced[:k] + traced[k + 1:]
            for p, a in enumerate(w):
                if a not in letters:
                    continue
                for q, b in enumerate(word):
                    if b == a:
                        _accumulate(out, (others, word[:q] + _rotation_after(w, p) + word[q + 1:]), 2.0 * cross)
    return out


def _letters(nvars: int, variables: Optional[Iterable[int]]) -> frozenset:
    if variables is None:
        return frozenset(range(nvars))
    letters = frozenset(variables)
    for j in letters:
        if not 0 <= j < nvars:
            raise TracePolyError(f"Invalid variable index: {j} (must be 0-{nvars - 1})")
    return letters


def laplacian(f: TracePoly, mode: LaplacianMode,
              variables: Optional[Iterable[int]] = None) -> TracePoly:
    """
    L^(N) f (finite N) or L f (large N), summed over the given variables.

    Defining property at finite N: L^(N) f = (1/N) Δ f where Δ is the
    Laplacian in Tr-orthonormal coordinates.
    """
    letters = _letters(f.nvars, variables)
    cross = mode.cross_weight
    out: Dict = {}
    if isinstance(f, ScalarTracePoly):
        for key, c in f.terms.items():
            for k2, c2 in _laplacian_scalar_key(key, letters, cross).items():
                _accumulate(out, k2, c * c2)
        return ScalarTracePoly(out, f.nvars)
    for key, c in f.terms.items():
        for k2, c2 in _laplacian_operator_key(key, letters, cross).items():
            _accumulate(out, k2, c * c2)
    return OperatorTracePoly(out, f.nvars)


def heat_apply(f: TracePoly, t: float, mode: LaplacianMode,
               variables: Optional[Iterable[int]] = None,
               max_degree: int = MAX_HEAT_DEGREE) -> TracePoly:
    """
    e^{tL/2} f computed exactly.

    L restricted to the span of monomials reachable from f is nilpotent;
    the dense matrix exponential of that restriction is applied to f's
    coefficient vector.
    """
    if t < 0:
        raise TracePolyError(f"Invalid heat time: {t} (must be >= 0)")
    if f.degree > max_degree:
        raise TracePolyError(f"Invalid degree for heat_apply: {f.degree} (must be <= {max_degree})")
    letters = _letters(f.nvars, variables)
    cross = mode.cross_weight
    is_scalar = isinstance(f, ScalarTracePoly)
    step: Callable = _laplacian_scalar_key if is_scalar else _laplacian_operator_key

    basis: List = list(f.terms.keys())
    index = {k: i for i, k in enumerate(basis)}
    images: List[Dict] = []
    i = 0
    while i < len(basis):
        image = step(basis[i], letters, cross)
        images.append(image)
        for k in image:
            if k not in index:
                index[k] = len(basis)
                basis.append(k)
        i += 1

    n = len(basis)
    M = np.zeros((n, n), dtype=np.complex128)
    for col, image in enumerate(images):
        for k, c in image.items():
            M[index[k], col] += c
    v = np.zeros(n, dtype=np.complex128)
    for k, c in f.terms.items():
        v[index[k]] = c
    coeffs = expm(0.5 * t * M) @ v
    logger.debug("heat_apply: %d basis monomials, t=%g", n, t)
    terms = {k: coeffs[index[k]] for k in basis}
    return ScalarTracePoly(terms, f.nvars) if is_scalar else OperatorTracePoly(terms, f.nvars)


# ------------------------------------------------------------------
# Text format
# ------------------------------------------------------------------

def _format_word(word: Word) -> str:
    return " ".join(f"x{i + 1}" for i in word)


def _format_coef(c: complex) -> str:
    c = complex(c)
    if c.imag == 0:
        return f"{c.real:.17g}"
    return f"({c.real:.17g}{c.imag:+.17g}j)"


def _format_terms(keys, coefs) -> str:
    out = ""
    for (traced, word), c in zip(keys, coefs):
        c = complex(c)
        sign = " + "
        if c.imag == 0 and c.real < 0:
            sign, c = " - ", -c
        factors = [_format_coef(c)]
        factors += [f"tr({_format_word(w)})" for w in traced]
        if word:
            factors.append(_format_word(word))
        term = "*".join(factors)
        if not out:
            out = term if sign == " + " else "-" + term
        else:
            out += sign + term
    return out or "0"


_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?j?)
  | (?P<tr>tr|τ)(?=\s*\()
  | (?P<var>[xy]\d*)
  | (?P<op>[-+*^()])
""", re.VERBOSE)


@dataclass
class _Token:
    kind: str
    text: str
    column: int


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise TracePolyParseError("Unexpected character", text[pos], pos + 1)
        kind = match.lastgroup
        if kind != 'ws':
            tokens.append(_Token(kind, match.group(), pos + 1))
        pos = match.end()
    tokens.append(_Token('end', '', len(text) + 1))
    return tokens


class _Parser:
    """Recursive-descent parser producing OperatorTracePoly plus an 'operator seen' flag."""

    def __init__(self, text: str, n_x: Optional[int], n_y: int):
        self.tokens = _tokenize(text)
        self.pos = 0
        var_tokens = [t for t in self.tokens if t.kind == 'var']
        x_max = max((self._index(t) for t in var_tokens if t.text[0] == 'x'), default=0)
        y_max = max((self._index(t) for t in var_tokens if t.text[0] == 'y'), default=0)
        self.n_x = x_max if n_x is None else n_x
        self.n_y = max(n_y, y_max) if n_y == 0 else n_y
        if x_max > self.n_x:
            bad = next(t for t in var_tokens if t.text[0] == 'x' and self._index(t) > self.n_x)
            raise TracePolyParseError("Variable out of range", bad.text, bad.column)
        if y_max > self.n_y:
            bad = next(t for t in var_tokens if t.text[0] == 'y' and self._index(t) > self.n_y)
            raise TracePolyParseError("Variable out of range", bad.text, bad.column)
        self.nvars = self.n_x + self.n_y
        self.operator_seen = False

    @staticmethod
    def _index(token: _Token) -> int:
        digits = token.text[1:]
        if digits == '':
            return 1
        value = int(digits)
        if value < 1:
            raise TracePolyParseError("Variable indices start at 1", token.text, token.column)
        return value

    def _letter(self, token: _Token) -> int:
        i = self._index(token) - 1
        return i if token.text[0] == 'x' else self.n_x + i

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self, kind: str, text: Optional[str] = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            raise TracePolyParseError("Unexpected token", tok.text or '<end>', tok.column)
        self.pos += 1
        return tok

    def parse(self) -> OperatorTracePoly:
        if self.peek().kind == 'end':
            raise TracePolyParseError("Empty expression", '<end>', 1)
        result = self.expr()
        self.take('end')
        return result

    def expr(self) -> OperatorTracePoly:
        sign = 1.0
        if self.peek().text in ('+', '-'):
            sign = -1.0 if self.take('op').text == '-' else 1.0
        result = self.term() * sign
        while self.peek().text in ('+', '-'):
            sign = -1.0 if self.take('op').text == '-' else 1.0
            result = result + self.term() * sign
        return result

    def term(self) -> OperatorTracePoly:
        result = self.factor()
        while self.peek().text == '*':
            self.take('op', '*')
            result = result * self.factor()
        return result

    def _power(self) -> int:
        if self.peek().text != '^':
            return 1
        self.take('op', '^')
        tok = self.take('number')
        if not tok.text.isdigit() or int(tok.text) < 0:
            raise TracePolyParseError("Exponent must be a non-negative integer", tok.text, tok.column)
        return int(tok.text)

    def _word(self) -> Word:
        letters: List[int] = []
        while self.peek().kind == 'var':
            letter = self._letter(self.take('var'))
            letters.extend([letter] * self._power())
        return tuple(letters)

    def factor(self) -> OperatorTracePoly:
        tok = self.peek()
        if tok.kind == 'number':
            self.take('number')
            value = complex(tok.text) if tok.text.endswith('j') else float(tok.text)
            return OperatorTracePoly({((), ()): value}, self.nvars)
        if tok.kind == 'tr':
            self.take('tr')
            self.take('op', '(')
            word = self._word()
            if self.peek().text != ')':
                bad = self.peek()
                raise TracePolyParseError("Only a word may appear inside tr()", bad.text or '<end>', bad.column)
            self.take('op', ')')
            power = self._power()
            return OperatorTracePoly({(tuple([word] * power), ()): 1.0}, self.nvars)
        if tok.kind == 'var':
            self.operator_seen = True
            return OperatorTracePoly.word(self._word(), self.nvars)
        if tok.text == '(':
            self.take('op', '(')
            inner_poly = self.expr()
            self.take('op', ')')
            power = self._power()
            result = OperatorTracePoly({((), ()): 1.0}, self.nvars)
            for _ in range(power):
                result = result * inner_poly
            return result
        raise TracePolyParseError("Unexpected token", tok.text or '<end>', tok.column)


def parse_trace_poly(text: str, n_x: Optional[int] = None, n_y: int = 0) -> TracePoly:
    """
    Parse the text grammar.

    Variables x1..x{n_x} map to indices 0..n_x-1 and y1..y{n_y} follow them;
    bare `x` / `y` mean x1 / y1. Returns a ScalarTracePoly unless an
    untraced word appears.

    Raises:
        TracePolyParseError: naming the offending token and its column
    """
    parser = _Parser(text, n_x, n_y)
    poly = parser.parse()
    if parser.operator_seen:
        return poly
    return ScalarTracePoly({traced: c for (traced, word), c in poly.terms.items()}, poly.nvars)


def parse_potential(text: str, n_x: Optional[int] = None, n_y: int = 0) -> ScalarTracePoly:
    """Parse a potential; it must be scalar-valued and self-adjoint."""
    poly = parse_trace_poly(text, n_x, n_y)
    if not isinstance(poly, ScalarTracePoly):
        raise TracePolyError("Potential must be scalar-valued (every word inside tr())")
    if not poly.is_self_adjoint():
        logger.error("Rejected non-self-adjoint potential: %s", text)
        raise TracePolyError(f"Potential is not self-adjoint: {text}")
    return poly
