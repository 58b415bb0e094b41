"""Covariance functions for the Gaussian-process membership model.

Hyperparameters are optimised in log space. Every kernel exposes the
free log-hyperparameters as a flat vector (``theta``) together with
the analytic derivative matrices dK/dtheta_j.

Expression grammar (used by configs and model artifacts)::

    expr   := term ("+" term)*
    term   := factor ("*" factor)*
    factor := call | "(" expr ")"
    call   := NAME "(" [arg ("," arg)*] ")"
    arg    := NUMBER | KEY "=" (NUMBER | "[" NUMBER ("," NUMBER)* "]" | NAME | "[" NAME ("," NAME)* "]")

with NAME one of ``se``/``rbf``, ``matern``, ``constant``. Keyword
``fixed=`` lists hyperparameters held constant during optimisation, e.g.
``matern(nu=1.5, lengthscale=1.0, fixed=variance)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, LinAlgError
from scipy.spatial.distance import cdist

from .errors import ConditioningError, ShapeError

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)

_MAX_JITTER_FACTOR = 1e-2
_BASE_JITTER_FACTOR = 1e-8


def _as_lengthscale(ls):
    if np.ndim(ls) == 0:
        return float(ls)
    return tuple(float(v) for v in np.ravel(ls))


class Kernel:
    """Base class. Subclasses are immutable dataclasses."""

    def __add__(self, other: "Kernel") -> "Sum":
        return Sum(self, other)

    def __mul__(self, other: "Kernel") -> "Product":
        return Product(self, other)

    # subclasses implement: __call__, gradients, hyper_names, theta, with_theta, n_counted, expr

    @property
    def n_free(self) -> int:
        return len(self.hyper_names())

    def __call__(self, A, B=None) -> np.ndarray:
        raise NotImplementedError


def _check_dims(A, B, lengthscale):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = A if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    if isinstance(lengthscale, tuple) and len(lengthscale) != A.shape[1]:
        raise ShapeError(f"ARD length-scale has {len(lengthscale)} entries for {A.shape[1]} features")
    return A, B


def _scaled_sqdist(A, B, lengthscale):
    ls = np.asarray(lengthscale, dtype=float)
    return cdist(A / ls, B / ls, "sqeuclidean")


def _per_dim_sqdist(A, B, lengthscale):
    ls = np.asarray(lengthscale, dtype=float)
    As, Bs = A / ls, B / ls
    return [(As[:, d, None] - Bs[None, :, d]) ** 2 for d in range(A.shape[1])]


@dataclass(frozen=True)
class _Stationary(Kernel):
    variance: float = 1.0
    lengthscale: float | tuple = 1.0
    fixed: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _as_lengthscale(self.lengthscale))
        object.__setattr__(self, "fixed", frozenset(self.fixed))
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        if np.any(np.asarray(self.lengthscale) <= 0):
            raise ValueError("length-scales must be positive")
        unknown = self.fixed - {"variance", "lengthscale"}
        if unknown:
            raise ValueError(f"unknown hyperparameter(s) to fix: {sorted(unknown)}")

    @property
    def ard(self) -> bool:
        return isinstance(self.lengthscale, tuple)

    def _shape(self, u2):
        raise NotImplementedError

    def _dshape(self, u2):
        """Profile factor g with dk/dlog(l_d) = variance * g(u) * q_d."""
        raise NotImplementedError

    def __call__(self, A, B=None):
        A, B = _check_dims(A, B, self.lengthscale)
        return self.variance * self._shape(_scaled_sqdist(A, B, self.lengthscale))

    def diag(self, A):
        return np.full(np.atleast_2d(A).shape[0], self.variance)

    def hyper_names(self):
        names = []
        if "variance" not in self.fixed:
            names.append("variance")
        if "lengthscale" not in self.fixed:
            if self.ard:
                names += [f"lengthscale[{d}]" for d in range(len(self.lengthscale))]
            else:
                names.append("lengthscale")
        return names

    @property
    def theta(self):
        vals = []
        if "variance" not in self.fixed:
            vals.append(math.log(self.variance))
        if "lengthscale" not in self.fixed:
            vals += [math.log(v) for v in np.atleast_1d(self.lengthscale)]
        return np.array(vals)

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_free,):
            raise ShapeError(f"expected {self.n_free} log-hyperparameters, got shape {theta.shape}")
        i = 0
        var, ls = self.variance, self.lengthscale
        if "variance" not in self.fixed:
            var = float(np.exp(theta[0]))
            i = 1
        if "lengthscale" not in self.fixed:
            vals = np.exp(theta[i:])
            ls = tuple(float(v) for v in vals) if self.ard else float(vals[0])
        return replace(self, variance=var, lengthscale=ls)

    def gradients(self, S):
        S, _ = _check_dims(S, None, self.lengthscale)
        u2 = _scaled_sqdist(S, S, self.lengthscale)
        out = []
        if "variance" not in self.fixed:
            out.append(self.variance * self._shape(u2))
        if "lengthscale" not in self.fixed:
            g = self.variance * self._dshape(u2)
            if self.ard:
                out += [g * q for q in _per_dim_sqdist(S, S, self.lengthscale)]
            else:
                out.append(g * u2)
        return out

    def _common_args(self):
        parts = [f"variance={self.variance!r}"]
        if self.ard:
            parts.append("lengthscale=[" + ", ".join(repr(v) for v in self.lengthscale) + "]")
        else:
            parts.append(f"lengthscale={self.lengthscale!r}")
        if self.fixed:
            parts.append("fixed=[" + ", ".join(sorted(self.fixed)) + "]")
        return parts


@dataclass(frozen=True)
class SquaredExponential(_Stationary):
    """variance * exp(-r^2 / (2 l^2))."""

    def _shape(self, u2):
        return np.exp(-0.5 * u2)

    def _dshape(self, u2):
        return np.exp(-0.5 * u2)

    @property
    def n_counted(self) -> int:
        return self.n_free

    def expr(self):
        return "se(" + ", ".join(self._common_args()) + ")"


@dataclass(frozen=True)
class Matern(_Stationary):
    """Matérn covariance for smoothness 3/2 or 5/2 (closed forms)."""

    nu: float = 1.5

    def __post_init__(self):
        super().__post_init__()
        if self.nu not in (1.5, 2.5):
            raise ValueError("Matérn smoothness must be 1.5 or 2.5")

    def _shape(self, u2):
        u = np.sqrt(u2)
        if self.nu == 1.5:
            return (1.0 + SQRT3 * u) * np.exp(-SQRT3 * u)
        return (1.0 + SQRT5 * u + (5.0 / 3.0) * u2) * np.exp(-SQRT5 * u)

    def _dshape(self, u2):
        u = np.sqrt(u2)
        if self.nu == 1.5:
            return 3.0 * np.exp(-SQRT3 * u)
        return (5.0 / 3.0) * (1.0 + SQRT5 * u) * np.exp(-SQRT5 * u)

    @property
    def n_counted(self) -> int:
        # smoothness is a structural choice but is tallied as a hyperparameter
        return self.n_free + 1

    def expr(self):
        return f"matern(nu={self.nu!r}, " + ", ".join(self._common_args()) + ")"


@dataclass(frozen=True)
class Constant(Kernel):
    value: float = 1.0
    fixed: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "fixed", frozenset(self.fixed))
        if not self.value > 0:
            raise ValueError("constant kernel value must be positive")
        if self.fixed - {"value"}:
            raise ValueError("Constant only has the 'value' hyperparameter")

    def __call__(self, A, B=None):
        A, B = _check_dims(A, B, 1.0)
        return np.full((A.shape[0], B.shape[0]), self.value)

    def diag(self, A):
        return np.full(np.atleast_2d(A).shape[0], self.value)

    def hyper_names(self):
        return [] if "value" in self.fixed else ["value"]

    @property
    def theta(self):
        return np.array([] if "value" in self.fixed else [math.log(self.value)])

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_free,):
            raise ShapeError(f"expected {self.n_free} log-hyperparameters, got shape {theta.shape}")
        if self.n_free == 0:
            return self
        return replace(self, value=float(np.exp(theta[0])))

    def gradients(self, S):
        S = np.atleast_2d(S)
        if "value" in self.fixed:
            return []
        return [np.full((S.shape[0], S.shape[0]), self.value)]

    @property
    def n_counted(self) -> int:
        return self.n_free

    def expr(self):
        fixed = ", fixed=value" if self.fixed else ""
        return f"constant({self.value!r}{fixed})"


@dataclass(frozen=True)
class _Binary(Kernel):
    left: Kernel
    right: Kernel

    def hyper_names(self):
        return [f"left.{n}" for n in self.left.hyper_names()] + [f"right.{n}" for n in self.right.hyper_names()]

    @property
    def theta(self):
        return np.concatenate([self.left.theta, self.right.theta])

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_free,):
            raise ShapeError(f"expected {self.n_free} log-hyperparameters, got shape {theta.shape}")
        k = self.left.n_free
        return replace(self, left=self.left.with_theta(theta[:k]), right=self.right.with_theta(theta[k:]))

    @property
    def n_counted(self) -> int:
        return self.left.n_counted + self.right.n_counted


@dataclass(frozen=True)
class Sum(_Binary):
    def __call__(self, A, B=None):
        return self.left(A, B) + self.right(A, B)

    def diag(self, A):
        return self.left.diag(A) + self.right.diag(A)

    def gradients(self, S):
        return self.left.gradients(S) + self.right.gradients(S)

    def expr(self):
        return f"{self.left.expr()} + {self.right.expr()}"


@dataclass(frozen=True)
class Product(_Binary):
    def __call__(self, A, B=None):
        return self.left(A, B) * self.right(A, B)

    def diag(self, A):
        return self.left.diag(A) * self.right.diag(A)

    def gradients(self, S):
        kl, kr = self.left(S), self.right(S)
        return [g * kr for g in self.left.gradients(S)] + [kl * g for g in self.right.gradients(S)]

    def expr(self):
        def wrap(k):
            return f"({k.expr()})" if isinstance(k, Sum) else k.expr()

        return f"{wrap(self.left)} * {wrap(self.right)}"


# ---------------------------------------------------------------------------
# functional surface


def kernel_eval(spec: Kernel, a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(1, -1)
    b = np.asarray(b, dtype=float).reshape(1, -1)
    return float(spec(a, b)[0, 0])


def default_jitter(spec: Kernel, S) -> float:
    return _BASE_JITTER_FACTOR * float(np.mean(spec.diag(S)))


def kernel_matrix(spec: Kernel, S, jitter: float | None = None) -> np.ndarray:
    """Covariance matrix over the rows of ``S`` with jitter on the diagonal.

    With ``jitter=0`` the raw matrix is returned unchecked. Otherwise the
    jitter is multiplied by 10 until a Cholesky factorisation succeeds, up
    to 1e-2 times the mean prior variance.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    K = spec(S)
    if jitter is None:
        jitter = default_jitter(spec, S)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if jitter == 0:
        return K
    ceiling = _MAX_JITTER_FACTOR * float(np.mean(spec.diag(S)))
    eye = np.eye(K.shape[0])
    j = jitter
    while True:
        Kj = K + j * eye
        try:
            cho_factor(Kj, lower=True)
            return Kj
        except LinAlgError:
            if j * 10 > ceiling * (1 + 1e-12):
                raise ConditioningError(
                    f"covariance matrix not positive definite even with jitter {j:.3g}", jitter=j
                ) from None
            j *= 10


def kernel_gradients(spec: Kernel, S) -> list[np.ndarray]:
    return spec.gradients(np.atleast_2d(np.asarray(S, dtype=float)))


def pack(spec: Kernel) -> np.ndarray:
    return spec.theta


def unpack(spec: Kernel, theta) -> Kernel:
    return spec.with_theta(theta)


def leaves(spec: Kernel) -> list[Kernel]:
    if isinstance(spec, _Binary):
        return leaves(spec.left) + leaves(spec.right)
    return [spec]


# ---------------------------------------------------------------------------
# expression parsing

_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[()\[\],=+*]))")


def _tokenize(text: str):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValueError(f"cannot parse kernel expression at {text[pos:]!r}")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return out


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, value=None):
        tok = self.peek()
        if tok[0] is None or (value is not None and tok[1] != value):
            raise ValueError(f"expected {value!r} in kernel expression, found {tok[1]!r}")
        self.i += 1
        return tok

    def parse(self):
        k = self.expr()
        if self.i != len(self.tokens):
            raise ValueError(f"trailing input in kernel expression: {self.tokens[self.i:]}")
        return k

    def expr(self):
        k = self.term()
        while self.peek()[1] == "+":
            self.take("+")
            k = Sum(k, self.term())
        return k

    def term(self):
        k = self.factor()
        while self.peek()[1] == "*":
            self.take("*")
            k = Product(k, self.factor())
        return k

    def factor(self):
        if self.peek()[1] == "(":
            self.take("(")
            k = self.expr()
            self.take(")")
            return k
        kind, name = self.take()
        if kind != "name":
            raise ValueError(f"expected a kernel name, found {name!r}")
        self.take("(")
        args, kwargs = [], {}
        while self.peek()[1] != ")":
            if self.peek()[0] == "name" and self.tokens[self.i + 1][1] == "=":
                key = self.take()[1]
                self.take("=")
                kwargs[key] = self.value()
            else:
                args.append(self.value())
            if self.peek()[1] == ",":
                self.take(",")
        self.take(")")
        return _build(name.lower(), args, kwargs)

    def value(self):
        if self.peek()[1] == "[":
            self.take("[")
            items = []
            while self.peek()[1] != "]":
                items.append(self.scalar())
                if self.peek()[1] == ",":
                    self.take(",")
            self.take("]")
            return items
        return self.scalar()

    def scalar(self):
        kind, v = self.take()
        if kind == "num":
            return float(v)
        if kind == "name":
            return v
        raise ValueError(f"unexpected token {v!r}")


def _build(name, args, kwargs):
    fixed = kwargs.pop("fixed", [])
    fixed = frozenset([fixed] if isinstance(fixed, str) else fixed)
    if name in ("se", "rbf", "squared_exponential"):
        return SquaredExponential(fixed=fixed, **_stationary_kwargs(args, kwargs))
    if name == "matern":
        nu = float(kwargs.pop("nu", 1.5))
        return Matern(nu=nu, fixed=fixed, **_stationary_kwargs(args, kwargs))
    if name == "constant":
        value = kwargs.pop("value", args[0] if args else 1.0)
        if kwargs:
            raise ValueError(f"unknown constant() arguments {sorted(kwargs)}")
        return Constant(float(value), fixed=fixed)
    raise ValueError(f"unknown kernel {name!r}")


def _stationary_kwargs(args, kwargs):
    if args:
        raise ValueError("stationary kernels take keyword arguments only")
    out = {}
    if "variance" in kwargs:
        out["variance"] = float(kwargs.pop("variance"))
    if "lengthscale" in kwargs:
        ls = kwargs.pop("lengthscale")
        out["lengthscale"] = tuple(ls) if isinstance(ls, list) else float(ls)
    if kwargs:
        raise ValueError(f"unknown kernel arguments {sorted(kwargs)}")
    return out


def parse_kernel(text: str) -> Kernel:
    """Build a kernel from its expression string (see module docstring)."""
    return _Parser(text).parse()


def ard(spec: Kernel, n_features: int) -> Kernel:
    """Copy of ``spec`` with every stationary leaf given a per-feature length-scale."""
    if isinstance(spec, _Binary):
        return replace(spec, left=ard(spec.left, n_features), right=ard(spec.right, n_features))
    if isinstance(spec, _Stationary) and not spec.ard:
        return replace(spec, lengthscale=(spec.lengthscale,) * n_features)
    return spec


def stack_theta(specs: Sequence[Kernel]) -> np.ndarray:
    return np.concatenate([s.theta for s in specs]) if specs else np.array([])
