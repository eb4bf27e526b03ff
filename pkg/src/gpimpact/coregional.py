"""Multi-output covariance structures built from coregionalized kernel terms.

A structure holds Q terms; each term pairs an m x m coregionalization
matrix B_q = loadings loadings' + diag(nuggets) with an input kernel. The
covariance between a row of series i and a row of series j is

    sum_q B_q[i, j] * k_q(x_row_i, x_row_j)

which for series observed on unequal grids produces ragged blocks rather
than a Kronecker product. Observation noise is a per-series variance added
on the diagonal by the inference engine.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .dataset import HeterotopicDataset, TaggedInputs
from .kernels import RBF, Kernel, Matern

VARIANTS = ("2FGP", "1FGP", "2RBF", "INGP", "SOGP")

_SLICES = ("time", "covariates", "all")


@dataclass
class CoregionalizationMatrix:
    """Rank-one plus diagonal output covariance B = ll' + diag(k).

    The rank-one part carries cross-series covariance through the shared
    loading vector; the positive nugget vector keeps B positive definite
    and gives each series idiosyncratic variance. ``frozen`` pins B (used
    for the independent-series and single-output variants).
    """

    loadings: np.ndarray
    nuggets: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        self.loadings = np.asarray(self.loadings, dtype=float).copy()
        self.nuggets = np.asarray(self.nuggets, dtype=float).copy()
        if self.loadings.ndim != 1 or self.loadings.shape != self.nuggets.shape:
            raise ValueError("loadings and nuggets must be 1-d with equal length")
        if not np.all(np.isfinite(self.loadings)):
            raise ValueError("loadings must be finite")
        if not (np.all(np.isfinite(self.nuggets)) and np.all(self.nuggets > 0)):
            raise ValueError("nuggets must be positive")

    @property
    def m(self) -> int:
        return len(self.loadings)

    @property
    def matrix(self) -> np.ndarray:
        return np.outer(self.loadings, self.loadings) + np.diag(self.nuggets)

    def loading_grad(self, j: int) -> np.ndarray:
        """dB / d loadings[j] = e_j l' + l e_j'."""
        g = np.zeros((self.m, self.m))
        g[j, :] += self.loadings
        g[:, j] += self.loadings
        return g

    def nugget_grad(self, j: int) -> np.ndarray:
        g = np.zeros((self.m, self.m))
        g[j, j] = 1.0
        return g


@dataclass
class MogpTerm:
    """One coregionalized kernel term with its input-column slice."""

    coreg: CoregionalizationMatrix
    kernel: Kernel
    input_slice: str = "all"

    def __post_init__(self):
        if self.input_slice not in _SLICES:
            raise ValueError(f"input_slice must be one of {_SLICES}")

    def columns(self, d: int) -> list[int]:
        if self.input_slice == "time":
            return [0]
        if self.input_slice == "covariates":
            if d == 0:
                raise ValueError("covariates slice on a panel without covariates")
            return list(range(1, d + 1))
        return list(range(d + 1))


@dataclass
class MogpStructure:
    """Full model structure: terms, per-series noise, and freezing state."""

    terms: list[MogpTerm]
    noise: np.ndarray
    variant: str = "custom"
    noise_frozen: bool = False
    noise_floor: float = 0.0

    def __post_init__(self):
        if not self.terms:
            raise ValueError("structure needs at least one term")
        self.noise = np.asarray(self.noise, dtype=float).copy()
        m = self.terms[0].coreg.m
        for t in self.terms:
            if t.coreg.m != m:
                raise ValueError("terms disagree on the number of series")
        if self.noise.shape != (m,):
            raise ValueError(f"noise must have shape ({m},)")
        # zero is allowed (noise-free interpolation); fits keep it positive
        # through log-space bounds
        if not (np.all(np.isfinite(self.noise)) and np.all(self.noise >= 0)):
            raise ValueError("noise variances must be nonnegative")
        if self.noise_floor > 0 and np.any(self.noise < self.noise_floor):
            raise ValueError(f"noise below the floor {self.noise_floor}")

    @property
    def m(self) -> int:
        return self.terms[0].coreg.m

    def clone(self) -> "MogpStructure":
        return copy.deepcopy(self)

    # -- parameter catalogue ------------------------------------------------

    def free_param_specs(self) -> list["ParamSpec"]:
        """Free parameters in canonical order with their natural-scale bounds.

        Loadings are unconstrained reals except the first series' loading
        in each term, which is kept nonnegative to pin the sign of the
        rank-one factor. Everything else is positive (log-transformable);
        noise respects the configured floor.
        """
        specs: list[ParamSpec] = []
        for q, term in enumerate(self.terms):
            if not term.coreg.frozen:
                for j in range(self.m):
                    specs.append(ParamSpec(f"term{q}.loading{j}", positive=False,
                                           lower=0.0 if j == 0 else -np.inf))
                for j in range(self.m):
                    specs.append(ParamSpec(f"term{q}.nugget{j}", positive=True))
            for name in term.kernel.free_param_names():
                specs.append(ParamSpec(f"term{q}.kernel.{name}", positive=True))
        if not self.noise_frozen:
            for i in range(self.m):
                specs.append(ParamSpec(f"noise{i}", positive=True,
                                       lower=self.noise_floor if self.noise_floor > 0 else 0.0))
        return specs

    def free_param_names(self) -> list[str]:
        return [s.name for s in self.free_param_specs()]

    def loading_param_names(self) -> list[str]:
        return [s.name for s in self.free_param_specs() if ".loading" in s.name]

    def noise_param_names(self) -> list[str]:
        return [] if self.noise_frozen else [f"noise{i}" for i in range(self.m)]

    def get_param(self, name: str) -> float:
        kind, q, j, rest = _parse(name)
        if kind == "noise":
            return float(self.noise[j])
        term = self.terms[q]
        if kind == "loading":
            return float(term.coreg.loadings[j])
        if kind == "nugget":
            return float(term.coreg.nuggets[j])
        return term.kernel.get_param(rest)

    def set_param(self, name: str, value: float) -> None:
        kind, q, j, rest = _parse(name)
        value = float(value)
        if kind == "noise":
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive")
            self.noise[j] = value
        elif kind == "loading":
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite")
            self.terms[q].coreg.loadings[j] = value
        elif kind == "nugget":
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive")
            self.terms[q].coreg.nuggets[j] = value
        else:
            self.terms[q].kernel.set_param(rest, value)

    def get_values(self, names: list[str]) -> np.ndarray:
        return np.array([self.get_param(n) for n in names])

    def set_values(self, names: list[str], values: np.ndarray) -> None:
        for n, v in zip(names, values):
            self.set_param(n, v)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "noise": self.noise.tolist(),
            "noise_frozen": self.noise_frozen,
            "noise_floor": self.noise_floor,
            "terms": [{
                "loadings": t.coreg.loadings.tolist(),
                "nuggets": t.coreg.nuggets.tolist(),
                "frozen": t.coreg.frozen,
                "input_slice": t.input_slice,
                "kernel": t.kernel.to_dict(),
            } for t in self.terms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MogpStructure":
        terms = [MogpTerm(CoregionalizationMatrix(t["loadings"], t["nuggets"], t["frozen"]),
                          Kernel.from_dict(t["kernel"]), t["input_slice"])
                 for t in d["terms"]]
        return cls(terms, np.asarray(d["noise"], dtype=float), d.get("variant", "custom"),
                   d.get("noise_frozen", False), d.get("noise_floor", 0.0))


@dataclass(frozen=True)
class ParamSpec:
    """Optimizer-facing description of one free parameter."""

    name: str
    positive: bool
    lower: float = 0.0
    upper: float = np.inf


def _parse(name: str) -> tuple[str, int, int, str]:
    if name.startswith("noise"):
        return "noise", -1, int(name[len("noise"):]), ""
    if not name.startswith("term"):
        raise KeyError(name)
    head, _, rest = name.partition(".")
    q = int(head[len("term"):])
    if rest.startswith("loading"):
        return "loading", q, int(rest[len("loading"):]), ""
    if rest.startswith("nugget"):
        return "nugget", q, int(rest[len("nugget"):]), ""
    if rest.startswith("kernel."):
        return "kernel", q, -1, rest[len("kernel."):]
    raise KeyError(name)


# --------------------------------------------------------------------------
# covariance assembly


def _term_inputs(term: MogpTerm, x: np.ndarray) -> np.ndarray:
    return x[:, term.columns(x.shape[1] - 1)]


def term_grams(structure: MogpStructure, a: TaggedInputs,
               b: TaggedInputs | None = None) -> list[np.ndarray]:
    """Per-term kernel Gram matrices between two tagged input sets.

    These depend only on kernel hyperparameters, so they can be cached and
    reused across changes to loadings, nuggets, and noise.
    """
    b = a if b is None else b
    return [term.kernel.gram(_term_inputs(term, a.X), _term_inputs(term, b.X))
            for term in structure.terms]


def assemble_covariance(structure: MogpStructure, data: TaggedInputs | HeterotopicDataset,
                        grams: list[np.ndarray] | None = None) -> np.ndarray:
    """Noise-free covariance of the stacked observations."""
    tagged = data.tagged_inputs() if isinstance(data, HeterotopicDataset) else data
    return cross_covariance(structure, tagged, tagged, grams)


def cross_covariance(structure: MogpStructure, a: TaggedInputs, b: TaggedInputs,
                     grams: list[np.ndarray] | None = None) -> np.ndarray:
    """Covariance between two tagged input sets under the structure."""
    if grams is None:
        grams = term_grams(structure, a, b)
    out = np.zeros((len(a), len(b)))
    for term, g in zip(structure.terms, grams):
        bmat = term.coreg.matrix
        out += bmat[np.ix_(a.series_index, b.series_index)] * g
    return out


def noise_diagonal(structure: MogpStructure, tagged: TaggedInputs) -> np.ndarray:
    return structure.noise[tagged.series_index]


def covariance_grad(structure: MogpStructure, tagged: TaggedInputs, name: str,
                    grams: list[np.ndarray] | None = None) -> np.ndarray:
    """Derivative of the full covariance (kernel part plus noise) wrt one parameter."""
    kind, q, j, rest = _parse(name)
    n = len(tagged)
    if kind == "noise":
        return np.diag((tagged.series_index == j).astype(float))
    term = structure.terms[q]
    ix = np.ix_(tagged.series_index, tagged.series_index)
    if kind == "loading":
        g = grams[q] if grams is not None else term_grams(structure, tagged)[q]
        return term.coreg.loading_grad(j)[ix] * g
    if kind == "nugget":
        g = grams[q] if grams is not None else term_grams(structure, tagged)[q]
        return term.coreg.nugget_grad(j)[ix] * g
    x = _term_inputs(term, tagged.X)
    return term.coreg.matrix[ix] * term.kernel.gram_grad(x, x, rest)


# --------------------------------------------------------------------------
# model variants


@dataclass
class VariantDefaults:
    """Starting hyperparameter values shared by the model variants."""

    variance: float = 1.0
    loading: float = 1.0
    nugget: float = 0.5
    noise: float = 0.1
    time_lengthscale: float = 1.0
    cov_lengthscales: np.ndarray | None = None
    matern_nu: float = 0.5
    noise_floor: float = 0.0

    @classmethod
    def from_dataset(cls, ds: HeterotopicDataset, **overrides) -> "VariantDefaults":
        """Lengthscales from pooled median pairwise distances per input column."""
        x = ds.tagged_inputs().X
        if x.shape[0] > 500:
            x = x[np.random.default_rng(0).choice(x.shape[0], 500, replace=False)]
        meds = []
        for c in range(x.shape[1]):
            col = x[:, c]
            dist = np.abs(col[:, None] - col[None, :])
            med = float(np.median(dist[np.triu_indices_from(dist, k=1)]))
            meds.append(med if med > 0 else 1.0)
        base = cls(time_lengthscale=meds[0],
                   cov_lengthscales=np.array(meds[1:]) if len(meds) > 1 else None)
        for k, v in overrides.items():
            setattr(base, k, v)
        return base

    def cov_ls(self, d: int) -> np.ndarray:
        if self.cov_lengthscales is None:
            return np.ones(d)
        ls = np.asarray(self.cov_lengthscales, dtype=float)
        if ls.shape != (d,):
            raise ValueError(f"need {d} covariate lengthscales, got shape {ls.shape}")
        return ls


def _free_coreg(m: int, defaults: VariantDefaults) -> CoregionalizationMatrix:
    return CoregionalizationMatrix(np.full(m, defaults.loading), np.full(m, defaults.nugget))


def _identity_coreg(m: int) -> CoregionalizationMatrix:
    return CoregionalizationMatrix(np.zeros(m), np.ones(m), frozen=True)


def build_variant(tag: str, m: int, d: int,
                  defaults: VariantDefaults | None = None) -> MogpStructure:
    """Construct one of the named model variants.

    Parameters
    ----------
    tag : str
        One of "2FGP" (separate covariate and time factors), "1FGP" (a
        single factor whose kernel is the sum of both), "2RBF" (like 2FGP
        with the time kernel swapped for an RBF), "INGP" (identity output
        covariance: independent series), "SOGP" (single series, one RBF
        over its covariates; requires m = 1).
    m : int
        Number of series.
    d : int
        Number of covariate columns (excluding time).
    """
    defaults = defaults or VariantDefaults()
    if tag != "SOGP" and m < 2:
        raise ValueError(f"{tag} needs at least two series")
    if d < 1:
        raise ValueError(f"{tag} needs at least one covariate column")
    noise = np.full(m, max(defaults.noise, defaults.noise_floor))

    def cov_kernel():
        return RBF(defaults.variance, defaults.cov_ls(d))

    def time_kernel():
        return Matern(defaults.variance, defaults.time_lengthscale, nu=defaults.matern_nu)

    if tag == "2FGP":
        terms = [MogpTerm(_free_coreg(m, defaults), cov_kernel(), "covariates"),
                 MogpTerm(_free_coreg(m, defaults), time_kernel(), "time")]
    elif tag == "2RBF":
        terms = [MogpTerm(_free_coreg(m, defaults), cov_kernel(), "covariates"),
                 MogpTerm(_free_coreg(m, defaults),
                          RBF(defaults.variance, defaults.time_lengthscale), "time")]
    elif tag == "1FGP":
        shared = RBF(defaults.variance,
                     np.concatenate([[defaults.time_lengthscale], defaults.cov_ls(d)])) \
            + Matern(defaults.variance, defaults.time_lengthscale, nu=defaults.matern_nu)
        terms = [MogpTerm(_free_coreg(m, defaults), shared, "all")]
    elif tag == "INGP":
        terms = [MogpTerm(_identity_coreg(m), cov_kernel(), "covariates"),
                 MogpTerm(_identity_coreg(m), time_kernel(), "time")]
    elif tag == "SOGP":
        if m != 1:
            raise ValueError("SOGP is a single-series model (m = 1)")
        terms = [MogpTerm(_identity_coreg(1),
                          RBF(defaults.variance, float(np.mean(defaults.cov_ls(d)))),
                          "covariates")]
    else:
        raise ValueError(f"unknown model tag {tag!r}; known: {VARIANTS}")
    return MogpStructure(terms, noise, variant=tag, noise_floor=defaults.noise_floor)


def count_parameters(structure: MogpStructure) -> int:
    """Number of free parameters under this package's counting convention.

    Counts exactly what a fit would optimize: unfrozen loadings and
    nuggets (m each per term), unfrozen kernel hyperparameters, and
    unfrozen per-series noise variances.
    """
    return len(structure.free_param_specs())
