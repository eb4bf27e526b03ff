"""Command line pipeline for panel causal inference.

Each subcommand runs one stage and persists its outputs under the run
directory, so stages can be re-run, inspected, or scripted separately:

    screen   ingest the CSV, rank donor series
    compare  fit and score donor combinations across model tags
    fit      maximum likelihood fit of the chosen model
    infer    posterior sampling over the mixing loadings
    effect   counterfactual paths and treatment effect summaries
    report   final roll-up of everything above

Stages read their inputs from the artifacts of earlier stages, never
from in-process state. Exit codes: 0 success, 2 configuration problem,
3 numerical failure inside a stage, 4 missing upstream artifact. Every
artifact is written deterministically; wall-clock timings are kept out
of the manifest so identical runs produce identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np
import yaml

from .coregional import (
    VARIANTS,
    MogpStructure,
    VariantDefaults,
    build_variant,
)
from .dataset import (
    CsvSchema,
    HeterotopicDataset,
    export_dataset,
    fmt_float,
    ingest_csv,
    load_exported,
)
from .effects import CausalEffects, credible_band
from .engine import FactorizationError, FittedGp
from .evaluation import combination_search, screen_donors
from .hmc import HmcConfig, counterfactual_posterior, hmc_sample, make_loading_target
from .optimize import Ml2Config, OptimizerConfig, fit_ml2

STAGES = ("screen", "compare", "fit", "infer", "effect", "report")


class ConfigError(Exception):
    """The run configuration cannot be used."""


class MissingArtifactError(Exception):
    """A required upstream artifact is absent from the run directory."""


# --------------------------------------------------------------------------
# configuration


def _require(mapping, allowed, where):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _positive_int(section, key, value, minimum=1):
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{section}.{key} must be an integer >= {minimum}")
    return value


def _fraction(section, key, value, lo=0.0, hi=1.0):
    if not isinstance(value, (int, float)) or not lo < float(value) < hi:
        raise ConfigError(f"{section}.{key} must lie strictly between {lo} and {hi}")
    return float(value)


class RunConfig:
    """Validated view of the YAML run configuration."""

    TOP_KEYS = ("data", "screen", "compare", "fit", "infer", "effect",
                "seed", "jobs")

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be a mapping")
        _require(raw, self.TOP_KEYS, "configuration")

        data = raw.get("data")
        if not isinstance(data, dict):
            raise ConfigError("data section is required")
        _require(data, ("csv", "schema"), "data")
        self.csv_path = data.get("csv")
        if not isinstance(self.csv_path, str) or not self.csv_path:
            raise ConfigError("data.csv must be a file path")
        schema = data.get("schema")
        if not isinstance(schema, dict):
            raise ConfigError("data.schema is required")
        try:
            self.schema = CsvSchema.from_dict(schema)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"data.schema: {exc}") from exc

        sc = raw.get("screen") or {}
        _require(sc, ("top_k",), "screen")
        self.top_k = _positive_int("screen", "top_k", sc.get("top_k", 8))

        cp = raw.get("compare") or {}
        _require(cp, ("tags", "combo_size", "ratio", "n_score_samples",
                      "restarts", "max_iter"), "compare")
        tags = cp.get("tags", list(VARIANTS))
        if (not isinstance(tags, list) or not tags
                or not all(isinstance(t, str) for t in tags)):
            raise ConfigError("compare.tags must be a non-empty list of strings")
        self.compare_tags = tuple(tags)
        self.combo_size = _positive_int("compare", "combo_size",
                                        cp.get("combo_size", 4))
        self.ratio = _fraction("compare", "ratio", cp.get("ratio", 2.0 / 3.0))
        self.n_score_samples = _positive_int("compare", "n_score_samples",
                                             cp.get("n_score_samples", 200), 2)
        self.compare_restarts = _positive_int("compare", "restarts",
                                              cp.get("restarts", 1))
        self.compare_max_iter = _positive_int("compare", "max_iter",
                                              cp.get("max_iter", 60))

        ft = raw.get("fit") or {}
        _require(ft, ("tag", "donors", "restarts", "max_iter", "noise_floor"),
                 "fit")
        self.fit_tag = ft.get("tag")
        if self.fit_tag is not None and self.fit_tag not in VARIANTS:
            raise ConfigError(f"fit.tag must be one of {list(VARIANTS)}")
        donors = ft.get("donors")
        if donors is not None and (
                not isinstance(donors, list)
                or not all(isinstance(x, str) for x in donors)):
            raise ConfigError("fit.donors must be a list of series ids")
        self.fit_donors = donors
        self.fit_restarts = _positive_int("fit", "restarts", ft.get("restarts", 3))
        self.fit_max_iter = _positive_int("fit", "max_iter", ft.get("max_iter", 200))
        floor = ft.get("noise_floor", 0.0)
        if not isinstance(floor, (int, float)) or float(floor) < 0:
            raise ConfigError("fit.noise_floor must be a non-negative number")
        self.noise_floor = float(floor)

        inf = raw.get("infer") or {}
        _require(inf, ("step_size", "n_leapfrog", "n_samples", "burn_in",
                       "sample_noise"), "infer")
        step = inf.get("step_size", 0.01)
        if not isinstance(step, (int, float)) or float(step) <= 0:
            raise ConfigError("infer.step_size must be positive")
        self.step_size = float(step)
        self.n_leapfrog = _positive_int("infer", "n_leapfrog",
                                        inf.get("n_leapfrog", 20))
        self.n_samples = _positive_int("infer", "n_samples",
                                       inf.get("n_samples", 5000), 10)
        self.burn_in = _fraction("infer", "burn_in", inf.get("burn_in", 0.2),
                                 lo=-1e-9, hi=1.0)
        self.sample_noise = bool(inf.get("sample_noise", False))

        ef = raw.get("effect") or {}
        _require(ef, ("n_pred", "thin", "level", "include_noise"), "effect")
        self.n_pred = _positive_int("effect", "n_pred", ef.get("n_pred", 30))
        self.thin = _positive_int("effect", "thin", ef.get("thin", 10))
        self.level = _fraction("effect", "level", ef.get("level", 0.95))
        self.include_noise = bool(ef.get("include_noise", True))

        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.seed = seed
        self.jobs = _positive_int("", "jobs", raw.get("jobs", 1))
        self.raw = raw

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"configuration file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"configuration is not valid YAML: {exc}") from exc
        return cls(raw if raw is not None else {})

    def stage_seed(self, stage: str) -> int:
        """Stable per-stage seed independent of which stages get run."""
        idx = STAGES.index(stage)
        return int(np.random.SeedSequence([self.seed, idx]).generate_state(1)[0])


# --------------------------------------------------------------------------
# artifact helpers


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_safe(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str, stage_hint: str):
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"{os.path.basename(path)} not found; run the {stage_hint} stage first")
    with open(path) as fh:
        return json.load(fh)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def _update_manifest(out: str, stage: str, seed: int, files: list[str],
                     config: RunConfig) -> None:
    path = os.path.join(out, "manifest.json")
    manifest = {}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
    manifest.setdefault("stages", {})
    manifest["config_sha256"] = hashlib.sha256(
        json.dumps(_json_safe(config.raw), sort_keys=True).encode()).hexdigest()
    manifest["stages"][stage] = {
        "seed": seed,
        "files": {os.path.basename(f): _sha256(f) for f in sorted(files)},
    }
    _write_json(path, manifest)


def _record_timing(out: str, stage: str, seconds: float) -> None:
    path = os.path.join(out, "timings.json")
    timings = {}
    if os.path.exists(path):
        with open(path) as fh:
            timings = json.load(fh)
    timings[stage] = seconds
    _write_json(path, timings)


def _load_dataset(out: str) -> HeterotopicDataset:
    csv_path = os.path.join(out, "dataset.csv")
    meta_path = os.path.join(out, "dataset.json")
    if not (os.path.exists(csv_path) and os.path.exists(meta_path)):
        raise MissingArtifactError("dataset artifacts not found; run screen first")
    return load_exported(csv_path, meta_path)


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


# --------------------------------------------------------------------------
# stages


def _stage_screen(cfg: RunConfig, out: str) -> list[str]:
    data = ingest_csv(cfg.csv_path, cfg.schema)
    csv_path = os.path.join(out, "dataset.csv")
    meta_path = os.path.join(out, "dataset.json")
    export_dataset(data, csv_path, meta_path)
    res = screen_donors(data, k=cfg.top_k)
    screening = os.path.join(out, "screening.json")
    _write_json(screening, {
        "ranked": res.ranked,
        "distances": {k: res.distances[k] for k in sorted(res.distances)},
        "window_end": res.window_end,
        "top_k": cfg.top_k,
    })
    return [csv_path, meta_path, screening]


def _stage_compare(cfg: RunConfig, out: str, seed: int, jobs: int) -> list[str]:
    data = _load_dataset(out)
    screening = _read_json(os.path.join(out, "screening.json"), "screen")
    donors = screening["ranked"]
    ml2 = Ml2Config(OptimizerConfig(max_iter=cfg.compare_max_iter),
                    restarts=cfg.compare_restarts)
    result = combination_search(
        data, tags=cfg.compare_tags, donors=donors, combo_size=cfg.combo_size,
        ratio=cfg.ratio, jobs=jobs, seed=seed,
        n_score_samples=cfg.n_score_samples, ml2=ml2)

    cards_path = os.path.join(out, "cards.csv")
    _write_csv(cards_path,
               ["combo", "tag", "status", "es", "log_s", "mse", "message"],
               [["+".join(c.combo), c.tag, c.status, fmt_float(c.es),
                 fmt_float(c.log_s), fmt_float(c.mse), c.message]
                for c in result.cards])

    best = result.best()
    comparison_path = os.path.join(out, "comparison.json")
    _write_json(comparison_path, {
        "n_attempts": result.n_attempts,
        "n_ok": sum(1 for c in result.cards if c.status == "ok"),
        "n_error": sum(1 for c in result.cards if c.status == "error"),
        "best": None if best is None else {
            "combo": list(best.combo), "tag": best.tag, "es": best.es,
            "log_s": best.log_s, "mse": best.mse,
        },
        "ranking": [{"combo": list(c.combo), "tag": c.tag, "es": c.es}
                    for c in result.ranking[:10]],
    })
    return [cards_path, comparison_path]


def _choose_model(cfg: RunConfig, out: str):
    tag, donors = cfg.fit_tag, cfg.fit_donors
    if tag is None or donors is None:
        comparison = _read_json(os.path.join(out, "comparison.json"), "compare")
        best = comparison.get("best")
        if best is None:
            raise FactorizationError("comparison found no usable model")
        tag = tag or best["tag"]
        donors = donors or best["combo"]
    return tag, list(donors)


def _analysis_panel(data: HeterotopicDataset, tag: str, donors: list[str]):
    from .evaluation import make_sogp_dataset

    sub = data.subset([data.treated.series_id, *donors])
    if tag == "SOGP":
        sub = make_sogp_dataset(sub)
    return sub.split_intervention()


def _stage_fit(cfg: RunConfig, out: str, seed: int) -> list[str]:
    data = _load_dataset(out)
    tag, donors = _choose_model(cfg, out)
    train, _, _, _ = _analysis_panel(data, tag, donors)
    defaults = VariantDefaults.from_dataset(train, noise_floor=cfg.noise_floor)
    structure = build_variant(tag, train.m, len(train.covariate_names), defaults)
    ml2 = Ml2Config(OptimizerConfig(max_iter=cfg.fit_max_iter),
                    restarts=cfg.fit_restarts)
    result = fit_ml2(structure, train, ml2, seed=seed)
    fitted = result.fitted

    fit_path = os.path.join(out, "fit.json")
    names = fitted.structure.free_param_names()
    _write_json(fit_path, {
        "tag": tag,
        "donors": donors,
        "structure": fitted.structure.to_dict(),
        "params": {n: fitted.structure.get_param(n) for n in names},
        "log_ml": fitted.log_ml,
        "status": result.result.status,
        "n_iter": result.result.n_iter,
        "grad_inf_norm": result.result.grad_inf_norm,
        "restart_values": result.restart_values,
    })
    return [fit_path]


def _restore_fit(out: str):
    blob = _read_json(os.path.join(out, "fit.json"), "fit")
    structure = MogpStructure.from_dict(blob["structure"])
    return blob, structure


def _stage_infer(cfg: RunConfig, out: str, seed: int) -> list[str]:
    data = _load_dataset(out)
    blob, structure = _restore_fit(out)
    train, _, _, _ = _analysis_panel(data, blob["tag"], blob["donors"])
    try:
        target = make_loading_target(structure, train,
                                     sample_noise=cfg.sample_noise)
    except ValueError as exc:
        if "nothing to sample" not in str(exc):
            raise
        raise ValueError(
            f"the fitted {blob['tag']} model has no free loadings; set "
            "infer.sample_noise to true or fit a tag with free loadings"
        ) from exc
    hmc_cfg = HmcConfig(step_size=cfg.step_size, n_leapfrog=cfg.n_leapfrog,
                        n_samples=cfg.n_samples, burn_in=cfg.burn_in)
    res = hmc_sample(target, target.x0, hmc_cfg, rng=np.random.default_rng(seed))

    draws_path = os.path.join(out, "draws.csv")
    _write_csv(draws_path, list(target.names),
               ([fmt_float(v) for v in row] for row in res.samples))
    posterior_path = os.path.join(out, "posterior.json")
    _write_json(posterior_path, {
        "names": list(target.names),
        "sample_noise": cfg.sample_noise,
        "accept_rate": res.accept_rate,
        "n_divergent": res.n_divergent,
        "n_kept": res.n_kept,
        "ess": {n: e for n, e in zip(target.names, res.ess)},
        "log_prob_mean": float(res.log_probs.mean()),
    })
    return [draws_path, posterior_path]


def _stage_effect(cfg: RunConfig, out: str, seed: int) -> list[str]:
    data = _load_dataset(out)
    blob, structure = _restore_fit(out)
    posterior = _read_json(os.path.join(out, "posterior.json"), "infer")
    draws_path = os.path.join(out, "draws.csv")
    if not os.path.exists(draws_path):
        raise MissingArtifactError("draws.csv not found; run the infer stage first")
    draws = np.loadtxt(draws_path, delimiter=",", skiprows=1, ndmin=2)

    train, post, post_y, _ = _analysis_panel(data, blob["tag"], blob["donors"])
    target = make_loading_target(structure, train,
                                 sample_noise=bool(posterior["sample_noise"]))
    if list(target.names) != list(posterior["names"]):
        raise FactorizationError("posterior draws do not match the fitted model")

    thinned = draws[:: cfg.thin]
    cf = counterfactual_posterior(structure, train, post, thinned, target,
                                  n_pred=cfg.n_pred,
                                  rng=np.random.default_rng(seed),
                                  include_noise=cfg.include_noise)
    tier = "function"
    if any(".loading" in name for name in target.names):
        tier += "+loadings"
    if posterior["sample_noise"]:
        tier += "+noise"
    effects = CausalEffects(cf, post_y, tier=tier)
    paths = effects.report(cfg.level).write(out)

    cf_path = os.path.join(out, "counterfactual.csv")
    lo, hi = credible_band(cf.samples, cfg.level)
    mean = cf.samples.mean(axis=0)
    sd = cf.samples.std(axis=0, ddof=1)
    _write_csv(cf_path, ["time", "mean", "sd", "lower", "upper"],
               [[fmt_float(t), fmt_float(m), fmt_float(s), fmt_float(a), fmt_float(b)]
                for t, m, s, a, b in zip(cf.times, mean, sd, lo, hi)])
    return [cf_path, *paths.values()]


def _stage_report(cfg: RunConfig, out: str) -> list[str]:
    screening = _read_json(os.path.join(out, "screening.json"), "screen")
    comparison = _read_json(os.path.join(out, "comparison.json"), "compare")
    fit = _read_json(os.path.join(out, "fit.json"), "fit")
    posterior = _read_json(os.path.join(out, "posterior.json"), "infer")
    effects = _read_json(os.path.join(out, "effects.json"), "effect")

    report_path = os.path.join(out, "report.json")
    _write_json(report_path, {
        "donors_screened": screening["ranked"],
        "model": {"tag": fit["tag"], "donors": fit["donors"],
                  "log_ml": fit["log_ml"], "fit_status": fit["status"]},
        "comparison": {"n_attempts": comparison["n_attempts"],
                       "n_ok": comparison["n_ok"],
                       "best": comparison["best"]},
        "posterior": {"accept_rate": posterior["accept_rate"],
                      "n_divergent": posterior["n_divergent"],
                      "n_kept": posterior["n_kept"]},
        "effects": effects,
    })
    return [report_path]


# --------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpimpact",
        description="Synthetic control causal inference with multi-output "
                    "Gaussian processes")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", required=True, help="run directory for artifacts")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured base seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="override the configured worker count")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_yaml(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg.seed = args.seed
            cfg.raw = dict(cfg.raw, seed=args.seed)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("jobs must be at least 1")
            cfg.jobs = args.jobs
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    out = args.out
    os.makedirs(out, exist_ok=True)
    stage = args.stage
    seed = cfg.stage_seed(stage)
    started = time.perf_counter()
    try:
        if stage == "screen":
            files = _stage_screen(cfg, out)
        elif stage == "compare":
            files = _stage_compare(cfg, out, seed, cfg.jobs)
        elif stage == "fit":
            files = _stage_fit(cfg, out, seed)
        elif stage == "infer":
            files = _stage_infer(cfg, out, seed)
        elif stage == "effect":
            files = _stage_effect(cfg, out, seed)
        else:
            files = _stage_report(cfg, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4
    except (FactorizationError, FileNotFoundError, ValueError, KeyError,
            np.linalg.LinAlgError) as exc:
        print(f"{stage} stage failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3

    _update_manifest(out, stage, seed, files, cfg)
    _record_timing(out, stage, time.perf_counter() - started)
    print(f"{stage}: wrote {', '.join(sorted(os.path.basename(f) for f in files))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
