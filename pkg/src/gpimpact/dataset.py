"""Panel containers and data preparation for multi-series GP models.

A panel holds one treated series and its control series. Series may be
observed on different time grids and different lengths; models consume the
panel through a stacked representation that tags every row with its series
index. Preparation steps (calendar alignment, log scaling, covariate
standardization, principal-component compression) are plain functions that
return new containers and leave their inputs untouched.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd


# --------------------------------------------------------------------------
# containers


@dataclass
class SeriesRecord:
    """One observed series: outcome, time stamps, and per-row covariates.

    Parameters
    ----------
    series_id : str
        Unique identifier within a panel.
    times : ndarray, shape (T,)
        Strictly increasing observation times (arbitrary reals).
    y : ndarray, shape (T,)
        Outcome values.
    covariates : ndarray, shape (T, d)
        Per-row covariate matrix; d may be zero.
    is_treated : bool
        Whether this series receives the intervention.
    t0 : int or None
        Number of pre-intervention observations. Present only on the
        treated series, with 1 <= t0 < T.
    """

    series_id: str
    times: np.ndarray
    y: np.ndarray
    covariates: np.ndarray
    is_treated: bool = False
    t0: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates[:, None]
        if self.covariates.size == 0:
            self.covariates = self.covariates.reshape(len(self.times), 0)
        t = len(self.times)
        if t == 0:
            raise ValueError(f"series {self.series_id!r} is empty")
        if self.y.shape != (t,) or self.covariates.shape[0] != t:
            raise ValueError(f"series {self.series_id!r}: inconsistent lengths "
                             f"(times {t}, y {self.y.shape}, X {self.covariates.shape})")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"series {self.series_id!r}: times must be strictly increasing")
        for label, arr in (("times", self.times), ("y", self.y), ("covariates", self.covariates)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"series {self.series_id!r}: non-finite values in {label}")
        if self.is_treated:
            if self.t0 is None:
                raise ValueError(f"treated series {self.series_id!r} needs t0")
            self.t0 = int(self.t0)
            # t0 == T marks a series truncated at the intervention: every
            # row is pre-intervention
            if not 1 <= self.t0 <= t:
                raise ValueError(f"series {self.series_id!r}: t0={self.t0} outside [1, {t}]")
        elif self.t0 is not None:
            raise ValueError(f"control series {self.series_id!r} must not carry t0")

    @property
    def length(self) -> int:
        return len(self.times)

    def input_matrix(self) -> np.ndarray:
        """Model inputs as (T, 1 + d): time in column 0, covariates after."""
        return np.column_stack([self.times, self.covariates])

    def head(self, n: int) -> "SeriesRecord":
        """First n rows; a treated series stays treated with t0 capped at n."""
        if not 1 <= n <= self.length:
            raise ValueError(f"cannot keep {n} of {self.length} rows")
        t0 = min(self.t0, n) if self.t0 is not None else None
        return SeriesRecord(self.series_id, self.times[:n].copy(), self.y[:n].copy(),
                            self.covariates[:n].copy(), is_treated=self.is_treated, t0=t0)


@dataclass
class TaggedInputs:
    """Stacked model inputs with a series tag per row."""

    series_index: np.ndarray  # (n,) int
    X: np.ndarray             # (n, 1 + d)

    def __post_init__(self):
        self.series_index = np.asarray(self.series_index, dtype=int)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or len(self.series_index) != self.X.shape[0]:
            raise ValueError("series_index and X row counts differ")

    def __len__(self) -> int:
        return len(self.series_index)


@dataclass
class HeterotopicDataset:
    """A panel of series sharing covariate semantics but not time grids.

    Exactly one member series is treated. Series order is the model's
    output order; the stacked representation concatenates rows series by
    series in that order.
    """

    series: list[SeriesRecord]
    covariate_names: tuple[str, ...] = ()
    alignment_rule: str = "numeric passthrough"
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.covariate_names = tuple(self.covariate_names)
        if not self.series:
            raise ValueError("dataset has no series")
        ids = [s.series_id for s in self.series]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate series ids")
        d = len(self.covariate_names)
        for s in self.series:
            if s.covariates.shape[1] != d:
                raise ValueError(f"series {s.series_id!r} has {s.covariates.shape[1]} "
                                 f"covariate columns, panel declares {d}")
        n_treated = sum(s.is_treated for s in self.series)
        if n_treated != 1:
            raise ValueError(f"panel needs exactly one treated series, found {n_treated}")

    @property
    def m(self) -> int:
        return len(self.series)

    @property
    def total_T(self) -> int:
        return sum(s.length for s in self.series)

    @property
    def treated_pos(self) -> int:
        return next(i for i, s in enumerate(self.series) if s.is_treated)

    @property
    def treated(self) -> SeriesRecord:
        return self.series[self.treated_pos]

    def ids(self) -> list[str]:
        return [s.series_id for s in self.series]

    def by_id(self, series_id: str) -> SeriesRecord:
        for s in self.series:
            if s.series_id == series_id:
                return s
        raise KeyError(series_id)

    def tagged_inputs(self) -> TaggedInputs:
        idx = np.concatenate([np.full(s.length, i, dtype=int)
                              for i, s in enumerate(self.series)])
        x = np.vstack([s.input_matrix() for s in self.series])
        return TaggedInputs(idx, x)

    def stacked_y(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.series])

    def subset(self, ids: list[str]) -> "HeterotopicDataset":
        """Restrict to the given series ids (treated must be among them)."""
        keep = [self.by_id(i) for i in ids]
        return HeterotopicDataset(keep, self.covariate_names, self.alignment_rule,
                                  dict(self.attrs))

    def split_intervention(self) -> tuple["HeterotopicDataset", TaggedInputs, np.ndarray, np.ndarray]:
        """Training panel plus the treated series' post-intervention block.

        Returns
        -------
        training : HeterotopicDataset
            The panel with the treated series truncated at t0; controls keep
            their full length.
        post_inputs : TaggedInputs
            Treated post-intervention rows, tagged with the treated position.
        post_y : ndarray
            Observed treated outcomes after the intervention.
        post_times : ndarray
        """
        tr = self.treated
        if tr.t0 is None:
            raise ValueError("treated series has no intervention index")
        if tr.t0 >= tr.length:
            raise ValueError("treated series has no post-intervention rows")
        cut = [s.head(s.t0) if s.is_treated else s for s in self.series]
        training = HeterotopicDataset(cut, self.covariate_names, self.alignment_rule,
                                      dict(self.attrs))
        post = TaggedInputs(np.full(tr.length - tr.t0, self.treated_pos),
                            np.column_stack([tr.times[tr.t0:], tr.covariates[tr.t0:]]))
        return training, post, tr.y[tr.t0:].copy(), tr.times[tr.t0:].copy()

    def equals(self, other: "HeterotopicDataset") -> bool:
        if self.ids() != other.ids() or self.covariate_names != other.covariate_names:
            return False
        for a, b in zip(self.series, other.series):
            if (a.is_treated, a.t0) != (b.is_treated, b.t0):
                return False
            if not (np.array_equal(a.times, b.times) and np.array_equal(a.y, b.y)
                    and np.array_equal(a.covariates, b.covariates)):
                return False
        return True


# --------------------------------------------------------------------------
# transforms


def log_per_capita(y: np.ndarray, population: float | None = None, per: float = 1e6,
                   floor: float = 0.5) -> np.ndarray:
    """Log of the outcome after optional per-capita scaling.

    Computes log(y / population * per + floor); with population omitted,
    log(y + floor). The additive floor keeps zero counts finite.

    Raises
    ------
    ValueError
        On negative counts or a non-positive population.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("counts must be nonnegative")
    if population is not None:
        if not population > 0:
            raise ValueError(f"population must be positive, got {population}")
        y = y / population * per
    if floor < 0:
        raise ValueError("floor must be nonnegative")
    scaled = y + floor
    if np.any(scaled <= 0):
        raise ValueError("log transform needs y + floor > 0; raise the floor")
    return np.log(scaled)


def apply_log_transform(ds: HeterotopicDataset, populations: dict[str, float] | None = None,
                        per: float = 1e6, floor: float = 0.5) -> HeterotopicDataset:
    """Panel-wide log (per-capita) outcome transform."""
    out = []
    for s in ds.series:
        pop = None if populations is None else populations.get(s.series_id)
        if populations is not None and pop is None:
            raise ValueError(f"no population for series {s.series_id!r}")
        out.append(replace(s, y=log_per_capita(s.y, pop, per, floor)))
    attrs = dict(ds.attrs)
    attrs["log_transform"] = {"per_capita": populations is not None, "per": per, "floor": floor}
    return HeterotopicDataset(out, ds.covariate_names, ds.alignment_rule, attrs)


def standardize_covariates(ds: HeterotopicDataset) -> tuple[HeterotopicDataset, dict]:
    """Z-score each covariate column within each series.

    Constant columns are centered and left unscaled. Returns the new panel
    and the per-series (mean, sd) used, keyed by series id.
    """
    out, stats = [], {}
    for s in ds.series:
        if s.covariates.shape[1] == 0:
            out.append(s)
            stats[s.series_id] = (np.zeros(0), np.ones(0))
            continue
        mean = s.covariates.mean(axis=0)
        sd = s.covariates.std(axis=0, ddof=0)
        sd = np.where(sd > 0, sd, 1.0)
        out.append(replace(s, covariates=(s.covariates - mean) / sd))
        stats[s.series_id] = (mean, sd)
    return HeterotopicDataset(out, ds.covariate_names, ds.alignment_rule, dict(ds.attrs)), stats


def pca_first_component(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Scores on the first principal component of the correlation matrix.

    Columns are z-scored, constant columns dropped with a warning, and the
    leading eigenvector's sign fixed so its first nonzero loading is
    positive. Returns (scores, loadings, explained-variance ratio); the
    loadings vector carries zeros at dropped columns.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (rows >= 2, cols) matrix")
    sd = x.std(axis=0, ddof=0)
    keep = sd > 0
    if not np.any(keep):
        raise ValueError("all columns are constant")
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} constant column(s) before PCA")
    z = (x[:, keep] - x[:, keep].mean(axis=0)) / sd[keep]
    corr = z.T @ z / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(corr)
    v = eigvecs[:, -1]
    nz = np.nonzero(v)[0]
    if nz.size and v[nz[0]] < 0:
        v = -v
    loadings = np.zeros(x.shape[1])
    loadings[keep] = v
    ratio = float(eigvals[-1] / eigvals.sum())
    return z @ v, loadings, ratio


def apply_pca_compression(ds: HeterotopicDataset, columns: list[str],
                          new_name: str) -> HeterotopicDataset:
    """Replace a group of covariate columns with their first PC, per series."""
    missing = [c for c in columns if c not in ds.covariate_names]
    if missing:
        raise ValueError(f"unknown covariate columns: {missing}")
    idx = [ds.covariate_names.index(c) for c in columns]
    rest = [j for j in range(len(ds.covariate_names)) if j not in idx]
    out = []
    ratios = {}
    for s in ds.series:
        scores, _, ratio = pca_first_component(s.covariates[:, idx])
        ratios[s.series_id] = ratio
        out.append(replace(s, covariates=np.column_stack(
            [s.covariates[:, rest], scores] if rest else [scores])))
    names = tuple(ds.covariate_names[j] for j in rest) + (new_name,)
    attrs = dict(ds.attrs)
    attrs["pca"] = {"columns": list(columns), "name": new_name, "explained": ratios}
    return HeterotopicDataset(out, names, ds.alignment_rule, attrs)


# --------------------------------------------------------------------------
# calendar alignment


def align_times(dated: dict[str, tuple[list[_dt.date], np.ndarray]],
                threshold: float = 1.0) -> tuple[dict[str, np.ndarray], dict[str, int],
                                                 _dt.date, list[str]]:
    """Map calendar dates to a shared relative weekly index.

    A series enters the panel at its first observation with y >= threshold.
    The earliest such date anywhere in the panel becomes t = 1 and every
    date maps to 1 + days-elapsed / 7. Rows before a series' own entry date
    are dropped.

    Parameters
    ----------
    dated : dict
        series id -> (list of dates, y array), both in time order.
    threshold : float
        Entry rule: first row with y >= threshold.

    Returns
    -------
    times : dict of id -> float array (aligned times for kept rows)
    first_kept : dict of id -> index of the first kept row
    anchor : date mapped to t = 1
    excluded : ids with no qualifying row
    """
    first_kept, excluded = {}, []
    for sid, (dates, y) in dated.items():
        y = np.asarray(y, dtype=float)
        qualifying = np.nonzero(y >= threshold)[0]
        if qualifying.size == 0:
            excluded.append(sid)
        else:
            first_kept[sid] = int(qualifying[0])
    if not first_kept:
        raise ValueError(f"no series ever reaches the threshold {threshold}")
    anchor = min(dated[sid][0][k] for sid, k in first_kept.items())
    times = {}
    for sid, k in first_kept.items():
        dates = dated[sid][0]
        times[sid] = np.array([1.0 + (d - anchor).days / 7.0 for d in dates[k:]])
    return times, first_kept, anchor, excluded


# --------------------------------------------------------------------------
# CSV ingest / export


@dataclass
class CsvSchema:
    """Column mapping and panel metadata for long-format CSV ingest."""

    series_id: str = "series_id"
    time: str = "time"
    y: str = "y"
    covariates: tuple[str, ...] = ()
    treated: str | None = None
    intervention_time: float | str | None = None
    time_is_date: bool = False
    align_threshold: float = 1.0
    population: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        d = dict(d)
        if "covariates" in d:
            d["covariates"] = tuple(d["covariates"])
        return cls(**d)


def _numeric_column(frame: pd.DataFrame, col: str) -> np.ndarray:
    coerced = pd.to_numeric(frame[col], errors="coerce")
    bad = coerced.isna() & frame[col].notna()
    if bad.any():
        row = int(np.nonzero(bad.to_numpy())[0][0])
        raise ValueError(f"column {col!r} has a non-numeric value at row {row}: "
                         f"{frame[col].iloc[row]!r}")
    return coerced.to_numpy(dtype=float)


def ingest_csv(path, schema: CsvSchema) -> HeterotopicDataset:
    """Read a long-format CSV into a panel.

    Rows with missing outcome or covariates are dropped (count recorded in
    ``attrs['dropped_rows']``). Duplicate (series, time) pairs are an
    error. When the time column holds ISO dates the panel is aligned to a
    shared weekly index (see align_times); the intervention time may then
    be a date as well.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    needed = [schema.series_id, schema.time, schema.y, *schema.covariates]
    if schema.population:
        needed.append(schema.population)
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise ValueError(f"CSV is missing columns: {missing}")

    numeric_cols = {schema.y: _numeric_column(frame, schema.y)}
    for c in schema.covariates:
        numeric_cols[c] = _numeric_column(frame, c)
    if schema.population:
        numeric_cols[schema.population] = _numeric_column(frame, schema.population)
    if not schema.time_is_date:
        numeric_cols[schema.time] = _numeric_column(frame, schema.time)

    keep = np.ones(len(frame), dtype=bool)
    for c in (schema.y, *schema.covariates):
        keep &= np.isfinite(numeric_cols[c])
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"dropped {dropped} row(s) with missing values")

    sid_col = frame[schema.series_id].astype(str).to_numpy()
    attrs: dict = {"dropped_rows": dropped, "source": str(path)}
    order = []
    per_series: dict[str, dict] = {}
    for i in np.nonzero(keep)[0]:
        sid = sid_col[i]
        if sid not in per_series:
            per_series[sid] = {"rows": []}
            order.append(sid)
        per_series[sid]["rows"].append(i)

    if schema.time_is_date:
        def parse_date(v):
            try:
                return _dt.date.fromisoformat(str(v))
            except ValueError:
                raise ValueError(f"column {schema.time!r}: cannot parse date {v!r}") from None
        dated = {}
        for sid in order:
            rows = per_series[sid]["rows"]
            dates = [parse_date(frame[schema.time].iloc[i]) for i in rows]
            srt = np.argsort([d.toordinal() for d in dates], kind="stable")
            per_series[sid]["rows"] = [rows[j] for j in srt]
            dated[sid] = ([dates[j] for j in srt],
                          np.array([numeric_cols[schema.y][rows[j]] for j in srt]))
        times_map, first_kept, anchor, excluded = align_times(dated, schema.align_threshold)
        if excluded:
            warnings.warn(f"excluded series below threshold: {excluded}")
        attrs.update({"anchor_date": anchor.isoformat(), "excluded": excluded,
                      "align_threshold": schema.align_threshold})
        rule = (f"weekly index from dates; anchor {anchor.isoformat()} is t=1; "
                f"entry at first y >= {schema.align_threshold}")
        order = [sid for sid in order if sid not in excluded]
        for sid in order:
            rows = per_series[sid]["rows"][first_kept[sid]:]
            per_series[sid]["rows"] = rows
            per_series[sid]["times"] = times_map[sid]
    else:
        rule = "numeric passthrough"
        for sid in order:
            rows = per_series[sid]["rows"]
            t = np.array([numeric_cols[schema.time][i] for i in rows])
            srt = np.argsort(t, kind="stable")
            per_series[sid]["rows"] = [rows[j] for j in srt]
            per_series[sid]["times"] = t[srt]

    if schema.treated is not None and schema.treated not in order:
        raise ValueError(f"treated series {schema.treated!r} not in the panel")

    intervention_t = None
    if schema.intervention_time is not None:
        if schema.time_is_date:
            iv = _dt.date.fromisoformat(str(schema.intervention_time))
            intervention_t = 1.0 + (iv - anchor).days / 7.0
        else:
            intervention_t = float(schema.intervention_time)

    records, populations = [], {}
    for sid in order:
        rows = per_series[sid]["rows"]
        times = per_series[sid]["times"]
        if len(times) != len(set(times.tolist())):
            dup = times[np.nonzero(np.diff(times) == 0)[0][0]]
            raise ValueError(f"series {sid!r}: duplicate time {dup}")
        yv = np.array([numeric_cols[schema.y][i] for i in rows])
        cov = np.column_stack([[numeric_cols[c][i] for i in rows] for c in schema.covariates]) \
            if schema.covariates else np.zeros((len(rows), 0))
        treated = schema.treated is not None and sid == schema.treated
        t0 = None
        if treated:
            if intervention_t is None:
                raise ValueError("treated series given without an intervention time")
            t0 = int(np.sum(times <= intervention_t))
            if not 1 <= t0 < len(times):
                raise ValueError(f"intervention at t={intervention_t} leaves t0={t0} "
                                 f"outside series {sid!r} (length {len(times)})")
        if schema.population:
            pops = {numeric_cols[schema.population][i] for i in rows}
            if len(pops) != 1:
                raise ValueError(f"series {sid!r}: population column is not constant")
            populations[sid] = float(pops.pop())
        records.append(SeriesRecord(sid, times, yv, cov, is_treated=treated, t0=t0))
    if populations:
        attrs["populations"] = populations
    return HeterotopicDataset(records, schema.covariates, rule, attrs)


def fmt_float(x: float) -> str:
    """Shortest decimal string that parses back to exactly the same float."""
    return repr(float(x))


_fmt = fmt_float


def export_dataset(ds: HeterotopicDataset, csv_path, meta_path) -> None:
    """Write the panel as long-format CSV plus a JSON sidecar.

    Floats are written with shortest round-trip precision so a reload
    reproduces the panel bit for bit.
    """
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "time", "y", *ds.covariate_names])
        for s in ds.series:
            for r in range(s.length):
                w.writerow([s.series_id, _fmt(s.times[r]), _fmt(s.y[r]),
                            *(_fmt(v) for v in s.covariates[r])])
    meta = {
        "covariate_names": list(ds.covariate_names),
        "series_order": ds.ids(),
        "treated": ds.treated.series_id,
        "t0": ds.treated.t0,
        "alignment_rule": ds.alignment_rule,
        "attrs": {k: v for k, v in ds.attrs.items() if _json_safe(v)},
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _json_safe(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def load_exported(csv_path, meta_path) -> HeterotopicDataset:
    """Reload a panel written by export_dataset."""
    with open(meta_path) as fh:
        meta = json.load(fh)
    names = tuple(meta["covariate_names"])
    frame = pd.read_csv(csv_path, dtype={"series_id": str}, float_precision="round_trip")
    records = []
    for sid in meta["series_order"]:
        part = frame[frame["series_id"] == sid]
        treated = sid == meta["treated"]
        records.append(SeriesRecord(
            sid, part["time"].to_numpy(dtype=float), part["y"].to_numpy(dtype=float),
            part[list(names)].to_numpy(dtype=float) if names else np.zeros((len(part), 0)),
            is_treated=treated, t0=meta["t0"] if treated else None))
    return HeterotopicDataset(records, names, meta["alignment_rule"], dict(meta["attrs"]))
