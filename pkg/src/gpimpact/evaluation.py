"""Model evaluation: holdout splits, scoring rules, donor screening,
and the donor-combination model search.

Scores are oriented so that smaller is better. The energy score is
computed against joint predictive samples, with an exact sorted-sum
short cut in one dimension; for scalar forecasts it reduces to the
sample CRPS. Donor screening ranks control series by dynamic time
warping distance between standardized outcome paths over the treated
unit's pre-intervention window.
"""

from __future__ import annotations

import itertools
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .coregional import VARIANTS, VariantDefaults, build_variant
from .dataset import HeterotopicDataset, SeriesRecord, TaggedInputs
from .engine import sample_predictive
from .optimize import Ml2Config, fit_ml2


def train_test_split(data: HeterotopicDataset, ratio: float):
    """Hold out the tail of the treated pre-intervention window.

    The cut point is ``floor(ratio * t0)`` in the treated series' own
    index. Training keeps everything strictly before it; the holdout
    runs from there to the end of the pre-intervention window. Control
    series are truncated at the intervention boundary time but are never
    shortened to the cut point, since their later observations remain
    usable for conditioning.

    Returns (train panel, holdout inputs, holdout outcomes, holdout times).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("holdout ratio must lie strictly between 0 and 1")
    treated = data.treated
    t0 = treated.t0
    t_star = int(np.floor(ratio * t0))
    n_train = t_star - 1
    if n_train < 6:
        raise ValueError(
            f"treated training segment has {max(n_train, 0)} points; need at least 6")
    boundary = treated.times[t0 - 1]

    series = []
    for rec in data.series:
        if rec.is_treated:
            series.append(rec.head(n_train))
        else:
            keep = int(np.sum(rec.times <= boundary))
            if keep == 0:
                warnings.warn(f"control {rec.series_id!r} has no data before "
                              "the intervention; dropping it")
                continue
            series.append(rec.head(keep))
    train = HeterotopicDataset(series, data.covariate_names,
                               alignment_rule=data.alignment_rule,
                               attrs=dict(data.attrs))

    pos = train.treated_pos
    x_all = treated.input_matrix()
    test_rows = slice(n_train, t0)
    test = TaggedInputs(np.full(t0 - n_train, pos, dtype=int), x_all[test_rows])
    return train, test, treated.y[test_rows].copy(), treated.times[test_rows].copy()


def mse(prediction: np.ndarray, truth: np.ndarray) -> float:
    prediction = np.asarray(prediction, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if prediction.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    return float(np.mean((prediction - truth) ** 2))


def log_score(truth, mean, sd) -> float:
    """Mean negative log density under independent normal marginals."""
    truth = np.asarray(truth, dtype=float)
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("predictive standard deviations must be positive")
    z = (truth - mean) / sd
    return float(np.mean(0.5 * np.log(2.0 * np.pi) + np.log(sd) + 0.5 * z * z))


def energy_score(samples: np.ndarray, truth: np.ndarray, chunk: int = 256) -> float:
    """Sample energy score of a joint forecast against one outcome.

    samples has one forecast draw per row. In one dimension the pairwise
    spread term uses the exact sorted cumulative identity instead of the
    quadratic pairwise sum.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    n, h = samples.shape
    if truth.shape != (h,):
        raise ValueError("outcome dimension does not match the draws")
    if n < 2:
        raise ValueError("need at least two draws for the spread term")

    term1 = float(np.mean(np.sqrt(np.sum((samples - truth) ** 2, axis=1))))
    if h == 1:
        x = np.sort(samples[:, 0])
        k = np.arange(n)
        pair_total = 2.0 * float(np.sum((2 * k - n + 1) * x))
    else:
        pair_total = 0.0
        for i in range(0, n, chunk):
            a = samples[i:i + chunk]
            for j in range(0, n, chunk):
                pair_total += float(np.sum(cdist(a, samples[j:j + chunk])))
    return term1 - pair_total / (2.0 * n * n)


def crps(samples, truth: float) -> float:
    """Sample CRPS for a scalar forecast."""
    return energy_score(np.asarray(samples, dtype=float).reshape(-1, 1),
                        np.array([float(truth)]))


def dtw_distance(a, b) -> float:
    """Dynamic time warping distance with absolute-difference cost."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or b.ndim != 1 or len(a) == 0 or len(b) == 0:
        raise ValueError("inputs must be non-empty vectors")
    n, m = len(a), len(b)
    prev = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur = np.full(m + 1, np.inf)
        cost = np.abs(a[i - 1] - b)
        for j in range(1, m + 1):
            cur[j] = cost[j - 1] + min(prev[j], cur[j - 1], prev[j - 1])
        prev = cur
    return float(prev[m])


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    centered = x - x.mean()
    return centered / sd if sd > 0 else centered


@dataclass
class ScreeningResult:
    ranked: list[str]
    distances: dict[str, float]
    window_end: float


def screen_donors(data: HeterotopicDataset, k: int = 8) -> ScreeningResult:
    """Rank control series by shape similarity to the treated unit.

    Distances are dynamic time warping on standardized outcomes, the
    treated side restricted to its pre-intervention window and every
    control restricted to data observed up to that window's end. Ties
    break on series id. Returns at most k ids, closest first.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    treated = data.treated
    window = _zscore(treated.y[: treated.t0])
    end = float(treated.times[treated.t0 - 1])
    distances = {}
    for rec in data.series:
        if rec.is_treated:
            continue
        mask = rec.times <= end
        if int(mask.sum()) < 2:
            warnings.warn(f"control {rec.series_id!r} has fewer than 2 points "
                          "before the intervention; excluded from screening")
            continue
        distances[rec.series_id] = dtw_distance(window, _zscore(rec.y[mask]))
    ranked = sorted(distances, key=lambda sid: (distances[sid], sid))[:k]
    return ScreeningResult(ranked, distances, end)


def make_sogp_dataset(data: HeterotopicDataset) -> HeterotopicDataset:
    """Collapse a panel into a single treated series for the SOGP model.

    Control outcomes become covariate columns, joined on times shared by
    the treated unit and every control; the treated unit's own
    covariates are kept as additional columns. Time itself is not an
    input to the SOGP kernel, which only sees the covariate block.
    """
    treated = data.treated
    donors = [rec for rec in data.series if not rec.is_treated]
    if not donors:
        raise ValueError("no control series to use as covariates")
    common = treated.times
    for rec in donors:
        common = np.intersect1d(common, rec.times)
    if len(common) < 2:
        raise ValueError("treated and controls share fewer than 2 time points")

    boundary = treated.times[treated.t0 - 1]
    t0_new = int(np.sum(common <= boundary))
    if t0_new < 1:
        raise ValueError("no shared pre-intervention time points")

    def at(rec, values):
        idx = np.searchsorted(rec.times, common)
        return values[idx]

    columns = [at(rec, rec.y) for rec in donors]
    names = [rec.series_id for rec in donors]
    if data.covariate_names:
        own = at(treated, treated.input_matrix()[:, 1:])
        columns.extend(own.T)
        names.extend(data.covariate_names)
    rec = SeriesRecord(treated.series_id, common, at(treated, treated.y),
                       np.column_stack(columns), is_treated=True, t0=t0_new)
    return HeterotopicDataset([rec], covariate_names=names,
                              alignment_rule=data.alignment_rule,
                              attrs=dict(data.attrs))


@dataclass
class ScoreCard:
    """Outcome of one fit-and-score attempt in the model search."""

    combo: tuple[str, ...]
    tag: str
    status: str = "ok"
    es: float = float("nan")
    log_s: float = float("nan")
    mse: float = float("nan")
    seconds: float = 0.0
    message: str = ""

    @property
    def key(self):
        return (self.combo, self.tag)

    def to_dict(self) -> dict:
        return {
            "combo": list(self.combo),
            "tag": self.tag,
            "status": self.status,
            "es": self.es,
            "log_s": self.log_s,
            "mse": self.mse,
            "seconds": self.seconds,
            "message": self.message,
        }


@dataclass
class SearchResult:
    cards: list[ScoreCard]
    ranking: list[ScoreCard] = field(default_factory=list)

    def best(self) -> ScoreCard | None:
        return self.ranking[0] if self.ranking else None

    @property
    def n_attempts(self) -> int:
        return len(self.cards)


def _score_one(data, combo, tag, ratio, n_score_samples, ml2, seed_seq):
    start = time.perf_counter()
    card = ScoreCard(combo=combo, tag=tag)
    try:
        sub = data.subset([data.treated.series_id, *combo])
        if tag == "SOGP":
            sub = make_sogp_dataset(sub)
        train, test, test_y, _ = train_test_split(sub, ratio)
        defaults = VariantDefaults.from_dataset(train)
        d = len(train.covariate_names)
        structure = build_variant(tag, train.m, d, defaults)
        seeds = seed_seq.generate_state(2)
        out = fit_ml2(structure, train, ml2, seed=int(seeds[0]))
        dist = out.fitted.predictive(test, include_noise=True)
        rng = np.random.default_rng(int(seeds[1]))
        draws = sample_predictive(dist, n_score_samples, rng)
        card.es = energy_score(draws, test_y)
        card.log_s = log_score(test_y, dist.mean, dist.sd)
        card.mse = mse(dist.mean, test_y)
    except Exception as exc:
        card.status = "error"
        card.message = f"{type(exc).__name__}: {exc}"
    card.seconds = time.perf_counter() - start
    return card


def combination_search(data: HeterotopicDataset, tags=VARIANTS, donors=None,
                       combo_size: int = 4, ratio: float = 2.0 / 3.0,
                       jobs: int = 1, seed: int = 0, n_score_samples: int = 200,
                       ml2: Ml2Config | None = None) -> SearchResult:
    """Fit and score every donor combination under every model tag.

    Combinations are all ``combo_size``-subsets of the donor list
    (screened top 8 by default). Each attempt gets its own derived seed,
    so results do not depend on scheduling; failures are recorded as
    error cards rather than raised. Cards come back sorted by
    (combination, tag), with a ranking of the successful ones by energy
    score.
    """
    if donors is None:
        donors = screen_donors(data).ranked
    donors = list(donors)
    if combo_size < 1 or combo_size > len(donors):
        raise ValueError("combination size must be between 1 and the donor count")
    combos = [tuple(c) for c in itertools.combinations(donors, combo_size)]
    tasks = [(combo, tag) for combo in combos for tag in tags]
    seq = np.random.SeedSequence(seed)
    child_seqs = seq.spawn(len(tasks))

    def run(idx):
        combo, tag = tasks[idx]
        return _score_one(data, combo, tag, ratio, n_score_samples, ml2,
                          child_seqs[idx])

    if jobs <= 1:
        cards = [run(i) for i in range(len(tasks))]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cards = list(pool.map(run, range(len(tasks))))

    cards.sort(key=lambda c: c.key)
    ranking = sorted((c for c in cards if c.status == "ok"), key=lambda c: c.es)
    return SearchResult(cards, ranking)
