"""Covariance kernels with analytic hyperparameter gradients.

Every kernel evaluates a Gram matrix between two input sets and exposes
closed-form derivatives of that matrix with respect to each named
hyperparameter.  Kernels can be restricted to a subset of input columns
through ``active_dims`` and combined with ``+`` and ``*``.
"""

from __future__ import annotations

import copy
from abc import ABC, abstractmethod

import numpy as np
from scipy.spatial.distance import cdist


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"kernel inputs must be 1-d or 2-d, got shape {x.shape}")
    return x


class Kernel(ABC):
    """Base class for covariance functions.

    Parameters live on the instance as named positive reals (except where
    a subclass documents otherwise).  ``gram_grad`` returns the derivative
    of the Gram matrix with respect to one named parameter, which is the
    building block for marginal-likelihood gradients.

    Attributes
    ----------
    active_dims : tuple of int or None
        Input columns this kernel reads. ``None`` means all columns.
    frozen : bool
        When True the kernel contributes no free parameters to a fit.
    """

    def __init__(self, active_dims=None, frozen: bool = False):
        self.active_dims = None if active_dims is None else tuple(int(d) for d in active_dims)
        self.frozen = bool(frozen)

    # -- parameter plumbing -------------------------------------------------

    @abstractmethod
    def param_names(self) -> list[str]:
        """Names of this kernel's parameters, in canonical order."""

    @abstractmethod
    def get_param(self, name: str) -> float:
        """Return the value of the named parameter."""

    @abstractmethod
    def set_param(self, name: str, value: float) -> None:
        """Set the named parameter. Raises ValueError for invalid values."""

    @property
    def n_params(self) -> int:
        return len(self.param_names())

    def free_param_names(self) -> list[str]:
        return [] if self.frozen else self.param_names()

    def clone(self) -> "Kernel":
        return copy.deepcopy(self)

    # -- evaluation ---------------------------------------------------------

    @abstractmethod
    def gram(self, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
        """Evaluate the (na, nb) Gram matrix between two input sets."""

    @abstractmethod
    def gram_grad(self, xa: np.ndarray, xb: np.ndarray, wrt: str) -> np.ndarray:
        """Derivative of ``gram(xa, xb)`` with respect to parameter ``wrt``."""

    def _select(self, x: np.ndarray) -> np.ndarray:
        x = _as_matrix(x)
        if self.active_dims is None:
            return x
        return x[:, list(self.active_dims)]

    # -- composition --------------------------------------------------------

    def __add__(self, other: "Kernel") -> "SumKernel":
        return SumKernel([self, other])

    def __mul__(self, other: "Kernel") -> "ProductKernel":
        return ProductKernel([self, other])

    # -- serialization ------------------------------------------------------

    @abstractmethod
    def to_dict(self) -> dict:
        """Plain-data description suitable for a config file."""

    @staticmethod
    def from_dict(spec: dict) -> "Kernel":
        kind = spec.get("kind")
        if kind not in _KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind: {kind!r}")
        return _KERNEL_KINDS[kind]._build(spec)


def _check_positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite real, got {value}")
    return value


class RBF(Kernel):
    """Squared-exponential kernel, optionally with per-dimension lengthscales.

    k(x, x') = variance * exp(-0.5 * sum_r (x_r - x'_r)^2 / lengthscale_r^2)

    Parameters
    ----------
    variance : float
        Signal variance, the value of k at zero separation.
    lengthscales : float or array-like
        A scalar gives one shared lengthscale for all active dimensions.
        An array gives one lengthscale per active dimension (automatic
        relevance determination).
    active_dims : sequence of int, optional
        Input columns the kernel reads.

    Examples
    --------
    >>> k = RBF(variance=1.0, lengthscales=[1.0, 2.0])
    >>> k.gram([[0.0, 0.0]], [[2.0, 0.0]])[0, 0]  # exp(-2)
    0.1353352832366127
    """

    kind = "rbf"

    def __init__(self, variance: float = 1.0, lengthscales=1.0, active_dims=None,
                 frozen: bool = False):
        super().__init__(active_dims, frozen)
        self.variance = _check_positive("variance", variance)
        if np.ndim(lengthscales) == 0:
            self.lengthscales = _check_positive("lengthscale", lengthscales)
            self.ard = False
        else:
            ls = np.asarray(lengthscales, dtype=float).copy()
            if ls.ndim != 1 or ls.size == 0:
                raise ValueError("lengthscales must be a scalar or 1-d array")
            for v in ls:
                _check_positive("lengthscale", v)
            self.lengthscales = ls
            self.ard = True

    def param_names(self) -> list[str]:
        if self.ard:
            return ["variance"] + [f"lengthscale{r}" for r in range(len(self.lengthscales))]
        return ["variance", "lengthscale"]

    def get_param(self, name: str) -> float:
        if name == "variance":
            return self.variance
        if not self.ard and name == "lengthscale":
            return float(self.lengthscales)
        if self.ard and name.startswith("lengthscale"):
            return float(self.lengthscales[int(name[len("lengthscale"):])])
        raise KeyError(name)

    def set_param(self, name: str, value: float) -> None:
        if name == "variance":
            self.variance = _check_positive(name, value)
        elif not self.ard and name == "lengthscale":
            self.lengthscales = _check_positive(name, value)
        elif self.ard and name.startswith("lengthscale"):
            self.lengthscales[int(name[len("lengthscale"):])] = _check_positive(name, value)
        else:
            raise KeyError(name)

    def _scaled_sqdist(self, xa, xb) -> np.ndarray:
        xa, xb = self._select(xa), self._select(xb)
        ls = self.lengthscales if self.ard else np.full(xa.shape[1], self.lengthscales)
        if xa.shape[1] != len(np.atleast_1d(ls)):
            if self.ard:
                raise ValueError(
                    f"kernel has {len(self.lengthscales)} lengthscales but "
                    f"inputs have {xa.shape[1]} active columns")
        return cdist(xa / ls, xb / ls, metric="sqeuclidean")

    def gram(self, xa, xb) -> np.ndarray:
        return self.variance * np.exp(-0.5 * self._scaled_sqdist(xa, xb))

    def gram_grad(self, xa, xb, wrt: str) -> np.ndarray:
        base = np.exp(-0.5 * self._scaled_sqdist(xa, xb))
        if wrt == "variance":
            return base
        if not self.ard and wrt == "lengthscale":
            xa_, xb_ = self._select(xa), self._select(xb)
            d2 = cdist(xa_, xb_, metric="sqeuclidean")
            return self.variance * base * d2 / self.lengthscales ** 3
        if self.ard and wrt.startswith("lengthscale"):
            r = int(wrt[len("lengthscale"):])
            xa_, xb_ = self._select(xa), self._select(xb)
            d2r = (xa_[:, r][:, None] - xb_[:, r][None, :]) ** 2
            return self.variance * base * d2r / self.lengthscales[r] ** 3
        raise KeyError(wrt)

    def to_dict(self) -> dict:
        ls = self.lengthscales.tolist() if self.ard else float(self.lengthscales)
        return {"kind": self.kind, "variance": float(self.variance), "lengthscales": ls,
                "active_dims": list(self.active_dims) if self.active_dims else None,
                "frozen": self.frozen}

    @classmethod
    def _build(cls, spec: dict) -> "RBF":
        return cls(spec.get("variance", 1.0), spec.get("lengthscales", 1.0),
                   spec.get("active_dims"), spec.get("frozen", False))


class Matern(Kernel):
    """Matern kernel on Euclidean distance for nu in {1/2, 3/2, 5/2}.

    nu = 1/2 gives the exponential kernel variance * exp(-r / lengthscale),
    whose draws are continuous but nowhere differentiable; larger nu gives
    smoother sample paths.
    """

    kind = "matern"
    _SUPPORTED_NU = (0.5, 1.5, 2.5)

    def __init__(self, variance: float = 1.0, lengthscale: float = 1.0, nu: float = 0.5,
                 active_dims=None, frozen: bool = False):
        super().__init__(active_dims, frozen)
        self.variance = _check_positive("variance", variance)
        self.lengthscale = _check_positive("lengthscale", lengthscale)
        if float(nu) not in self._SUPPORTED_NU:
            raise ValueError(f"nu must be one of {self._SUPPORTED_NU}, got {nu}")
        self.nu = float(nu)

    def param_names(self) -> list[str]:
        return ["variance", "lengthscale"]

    def get_param(self, name: str) -> float:
        if name in ("variance", "lengthscale"):
            return float(getattr(self, name))
        raise KeyError(name)

    def set_param(self, name: str, value: float) -> None:
        if name not in ("variance", "lengthscale"):
            raise KeyError(name)
        setattr(self, name, _check_positive(name, value))

    def _dist(self, xa, xb) -> np.ndarray:
        return cdist(self._select(xa), self._select(xb), metric="euclidean")

    def gram(self, xa, xb) -> np.ndarray:
        r = self._dist(xa, xb)
        ell = self.lengthscale
        if self.nu == 0.5:
            shape = np.exp(-r / ell)
        elif self.nu == 1.5:
            a = np.sqrt(3.0) * r / ell
            shape = (1.0 + a) * np.exp(-a)
        else:
            a = np.sqrt(5.0) * r / ell
            shape = (1.0 + a + 5.0 * r ** 2 / (3.0 * ell ** 2)) * np.exp(-a)
        return self.variance * shape

    def gram_grad(self, xa, xb, wrt: str) -> np.ndarray:
        r = self._dist(xa, xb)
        ell = self.lengthscale
        if wrt == "variance":
            return self.gram(xa, xb) / self.variance
        if wrt != "lengthscale":
            raise KeyError(wrt)
        if self.nu == 0.5:
            return self.variance * np.exp(-r / ell) * r / ell ** 2
        if self.nu == 1.5:
            a = np.sqrt(3.0) * r / ell
            return self.variance * (3.0 * r ** 2 / ell ** 3) * np.exp(-a)
        a = np.sqrt(5.0) * r / ell
        return self.variance * (5.0 * r ** 2 / (3.0 * ell ** 3)) * (1.0 + a) * np.exp(-a)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "variance": float(self.variance),
                "lengthscale": float(self.lengthscale), "nu": self.nu,
                "active_dims": list(self.active_dims) if self.active_dims else None,
                "frozen": self.frozen}

    @classmethod
    def _build(cls, spec: dict) -> "Matern":
        return cls(spec.get("variance", 1.0), spec.get("lengthscale", 1.0),
                   spec.get("nu", 0.5), spec.get("active_dims"), spec.get("frozen", False))


class OrnsteinUhlenbeck(Kernel):
    """Stationary covariance of an Ornstein-Uhlenbeck process on one input column.

    k(s, t) = variance / (2 * drift) * exp(-drift * |s - t|)

    The marginal variance at zero separation is variance / (2 * drift), the
    stationary variance of a mean-reverting diffusion with reversion rate
    ``drift`` and diffusion coefficient ``variance``.
    """

    kind = "ou"

    def __init__(self, variance: float = 1.0, drift: float = 1.0, active_dims=None,
                 frozen: bool = False):
        super().__init__(active_dims, frozen)
        self.variance = _check_positive("variance", variance)
        self.drift = _check_positive("drift", drift)

    def param_names(self) -> list[str]:
        return ["variance", "drift"]

    def get_param(self, name: str) -> float:
        if name in ("variance", "drift"):
            return float(getattr(self, name))
        raise KeyError(name)

    def set_param(self, name: str, value: float) -> None:
        if name not in ("variance", "drift"):
            raise KeyError(name)
        setattr(self, name, _check_positive(name, value))

    def _absdiff(self, xa, xb) -> np.ndarray:
        xa, xb = self._select(xa), self._select(xb)
        if xa.shape[1] != 1:
            raise ValueError("OrnsteinUhlenbeck reads exactly one input column; "
                             f"got {xa.shape[1]} (set active_dims)")
        return np.abs(xa[:, 0][:, None] - xb[:, 0][None, :])

    def gram(self, xa, xb) -> np.ndarray:
        d = self._absdiff(xa, xb)
        return self.variance / (2.0 * self.drift) * np.exp(-self.drift * d)

    def gram_grad(self, xa, xb, wrt: str) -> np.ndarray:
        d = self._absdiff(xa, xb)
        k = self.variance / (2.0 * self.drift) * np.exp(-self.drift * d)
        if wrt == "variance":
            return k / self.variance
        if wrt == "drift":
            return -k * (1.0 / self.drift + d)
        raise KeyError(wrt)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "variance": float(self.variance), "drift": float(self.drift),
                "active_dims": list(self.active_dims) if self.active_dims else None,
                "frozen": self.frozen}

    @classmethod
    def _build(cls, spec: dict) -> "OrnsteinUhlenbeck":
        return cls(spec.get("variance", 1.0), spec.get("drift", 1.0),
                   spec.get("active_dims"), spec.get("frozen", False))


class Linear(Kernel):
    """Dot-product kernel k(x, x') = variance * x . x' (not stationary)."""

    kind = "linear"

    def __init__(self, variance: float = 1.0, active_dims=None, frozen: bool = False):
        super().__init__(active_dims, frozen)
        self.variance = _check_positive("variance", variance)

    def param_names(self) -> list[str]:
        return ["variance"]

    def get_param(self, name: str) -> float:
        if name == "variance":
            return float(self.variance)
        raise KeyError(name)

    def set_param(self, name: str, value: float) -> None:
        if name != "variance":
            raise KeyError(name)
        self.variance = _check_positive(name, value)

    def gram(self, xa, xb) -> np.ndarray:
        return self.variance * (self._select(xa) @ self._select(xb).T)

    def gram_grad(self, xa, xb, wrt: str) -> np.ndarray:
        if wrt != "variance":
            raise KeyError(wrt)
        return self._select(xa) @ self._select(xb).T

    def to_dict(self) -> dict:
        return {"kind": self.kind, "variance": float(self.variance),
                "active_dims": list(self.active_dims) if self.active_dims else None,
                "frozen": self.frozen}

    @classmethod
    def _build(cls, spec: dict) -> "Linear":
        return cls(spec.get("variance", 1.0), spec.get("active_dims"),
                   spec.get("frozen", False))


class _Composite(Kernel):
    """Shared parameter routing for sum and product nodes.

    Child parameters are addressed as "<child index>.<name>".
    """

    def __init__(self, parts: list[Kernel]):
        super().__init__(active_dims=None)
        if len(parts) < 2:
            raise ValueError("composite kernels need at least two parts")
        self.parts = list(parts)

    def param_names(self) -> list[str]:
        return [f"{i}.{n}" for i, p in enumerate(self.parts) for n in p.param_names()]

    def free_param_names(self) -> list[str]:
        return [f"{i}.{n}" for i, p in enumerate(self.parts) for n in p.free_param_names()]

    def _route(self, name: str) -> tuple[Kernel, str]:
        idx, _, rest = name.partition(".")
        try:
            part = self.parts[int(idx)]
        except (ValueError, IndexError):
            raise KeyError(name) from None
        return part, rest

    def get_param(self, name: str) -> float:
        part, rest = self._route(name)
        return part.get_param(rest)

    def set_param(self, name: str, value: float) -> None:
        part, rest = self._route(name)
        part.set_param(rest, value)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}

    @classmethod
    def _build(cls, spec: dict):
        return cls([Kernel.from_dict(p) for p in spec["parts"]])


class SumKernel(_Composite):
    """Sum of kernels, evaluated part by part on the full input."""

    kind = "sum"

    def gram(self, xa, xb) -> np.ndarray:
        out = self.parts[0].gram(xa, xb)
        for p in self.parts[1:]:
            out = out + p.gram(xa, xb)
        return out

    def gram_grad(self, xa, xb, wrt: str) -> np.ndarray:
        part, rest = self._route(wrt)
        return part.gram_grad(xa, xb, rest)


class ProductKernel(_Composite):
    """Elementwise product of kernels."""

    kind = "product"

    def gram(self, xa, xb) -> np.ndarray:
        out = self.parts[0].gram(xa, xb)
        for p in self.parts[1:]:
            out = out * p.gram(xa, xb)
        return out

    def gram_grad(self, xa, xb, wrt: str) -> np.ndarray:
        idx = int(wrt.partition(".")[0])
        part, rest = self._route(wrt)
        out = part.gram_grad(xa, xb, rest)
        for i, p in enumerate(self.parts):
            if i != idx:
                out = out * p.gram(xa, xb)
        return out


_KERNEL_KINDS: dict[str, type] = {
    k.kind: k for k in (RBF, Matern, OrnsteinUhlenbeck, Linear, SumKernel, ProductKernel)
}
