"""Acceptance gate: one test per release criterion.

Each test prints a single ``criterion NN: PASS/FAIL`` line with the
measured quantity next to its bound, then asserts. Run with ``-v`` to
get one result line per criterion; the printed detail appears in the
captured output of any failing test.

The slowest test is the end-to-end synthetic recovery study (criterion
7), which runs one hundred full fit/sample/counterfactual cycles and is
budgeted at thirty minutes on one CPU.
"""

import json
import math
import os
import time

import numpy as np
import pytest
import yaml

from gpimpact.cli import main as cli_main
from gpimpact.coregional import (
    VARIANTS,
    CoregionalizationMatrix,
    MogpStructure,
    MogpTerm,
    VariantDefaults,
    assemble_covariance,
    build_variant,
    cross_covariance,
    noise_diagonal,
)
from gpimpact.dataset import (
    HeterotopicDataset,
    SeriesRecord,
    TaggedInputs,
    fmt_float,
)
from gpimpact.effects import CausalEffects
from gpimpact.engine import FittedGp, fit_gp, lml_gradient, posterior_predictive
from gpimpact.evaluation import combination_search, dtw_distance, energy_score
from gpimpact.hmc import (
    HmcConfig,
    counterfactual_posterior,
    hmc_sample,
    leapfrog,
    make_loading_target,
)
from gpimpact.optimize import Ml2Config, OptimizerConfig, fit_ml2, lbfgsb_minimize

from _fixtures import random_panel, random_structure
from _oracles import central_grad, dense_gaussian_conditional, dtw_table, rel_err


def _line(num, ok, detail):
    print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


# --------------------------------------------------------------------------
# 1. analytic likelihood gradients vs central finite differences


def test_criterion_01_gradient_check():
    started = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(20):
        tag = VARIANTS[i % len(VARIANTS)]
        if tag == "SOGP":
            panel = random_panel(rng, lengths=(10,), d=2)
        else:
            panel = random_panel(rng, lengths=(8, 6, 7), d=2)
        structure = random_structure(rng, tag, panel.m, 2)
        names = structure.free_param_names()
        fitted = fit_gp(structure, panel)
        analytic = lml_gradient(fitted, names)

        def log_ml_at(vec):
            trial = structure.clone()
            trial.set_values(names, vec)
            return FittedGp(trial, panel).log_ml

        numeric = central_grad(log_ml_at, structure.get_values(names))
        worst = max(worst, rel_err(analytic, numeric, guard=1e-6))
    elapsed = time.perf_counter() - started
    _line(1, worst < 1e-5 and elapsed < 60,
          f"worst gradient rel err {worst:.2e} (bound 1e-5) over 20 instances, "
          f"{elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2. predictive inference vs dense conditional-Gaussian oracle


def test_criterion_02_predictive_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(202)
    shapes = [(6, 5, 4), (5, 5, 5), (4, 6, 5), (7, 4, 4)]
    worst = 0.0
    for i in range(50):
        tag = VARIANTS[i % len(VARIANTS)]
        if tag == "SOGP":
            panel = random_panel(rng, lengths=(9,), d=2)
        else:
            panel = random_panel(rng, lengths=shapes[i % len(shapes)], d=2)
        structure = random_structure(rng, tag, panel.m, 2)
        fitted = fit_gp(structure, panel)
        h = 4
        test = TaggedInputs(rng.integers(0, panel.m, size=h),
                            np.column_stack([rng.uniform(0, 8, size=h),
                                             rng.normal(size=(h, 2))]))
        include_noise = i % 2 == 0
        pred = posterior_predictive(fitted, test, include_noise=include_noise)

        k_ab = cross_covariance(structure, test, fitted.tagged)
        k_aa = cross_covariance(structure, test, test)
        if include_noise:
            k_aa = k_aa + np.diag(noise_diagonal(structure, test))
        mean, cov = dense_gaussian_conditional(
            np.zeros(h), np.zeros(fitted.total_T), k_aa, k_ab,
            fitted.sigma, fitted.y)
        worst = max(worst,
                    float(np.max(np.abs(pred.mean - mean))),
                    float(np.max(np.abs(pred.cov - cov))))
    elapsed = time.perf_counter() - started
    _line(2, worst < 1e-10 and elapsed < 60,
          f"worst predictive deviation {worst:.2e} (bound 1e-10) over 50 "
          f"instances, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 3. identity mixing reduces to independent single-series models


def test_criterion_03_identity_mixing_reduction():
    rng = np.random.default_rng(303)
    panel = random_panel(rng, lengths=(8, 6, 7), d=2)
    structure = random_structure(rng, "INGP", panel.m, 2)
    fitted = fit_gp(structure, panel)
    worst = 0.0
    for i, rec in enumerate(panel.series):
        single_rec = SeriesRecord(rec.series_id, rec.times, rec.y,
                                  rec.covariates, is_treated=True,
                                  t0=rec.length - 1)
        single_ds = HeterotopicDataset([single_rec], panel.covariate_names)
        donor_kernels = structure.clone()
        single = MogpStructure(
            [MogpTerm(CoregionalizationMatrix(np.zeros(1), np.ones(1),
                                              frozen=True),
                      term.kernel, term.input_slice)
             for term in donor_kernels.terms],
            np.array([structure.get_param(f"noise{i}")]), variant="INGP")
        single_fit = fit_gp(single, single_ds)

        h = 5
        x_new = np.column_stack([rng.uniform(0, 8, size=h),
                                 rng.normal(size=(h, 2))])
        joint = posterior_predictive(fitted, TaggedInputs(np.full(h, i), x_new))
        alone = posterior_predictive(single_fit, TaggedInputs(np.zeros(h, int), x_new))
        worst = max(worst,
                    float(np.max(np.abs(joint.mean - alone.mean))),
                    float(np.max(np.abs(joint.cov - alone.cov))))
    _line(3, worst < 1e-10,
          f"max deviation from independent per-series models {worst:.2e} "
          f"(bound 1e-10)")


# --------------------------------------------------------------------------
# 4. optimizer benchmarks


def test_criterion_04_optimizer():
    def rosenbrock(x):
        a, b = x
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        g = np.array([-2 * (1 - a) - 400 * a * (b - a * a),
                      200 * (b - a * a)])
        return f, g

    res = lbfgsb_minimize(rosenbrock, np.array([-1.2, 1.0]),
                          config=OptimizerConfig(max_iter=500, grad_tol=1e-10))
    rosen_err = float(np.max(np.abs(res.theta - 1.0)))

    rng = np.random.default_rng(404)
    box_err = 0.0
    for _ in range(10):
        n = int(rng.integers(2, 7))
        d = rng.uniform(0.5, 4.0, size=n)
        c = rng.uniform(-3.0, 3.0, size=n)
        lo = rng.uniform(-1.5, -0.2, size=n)
        hi = rng.uniform(0.2, 1.5, size=n)

        def quad(x, d=d, c=c):
            return 0.5 * float(d @ (x - c) ** 2), d * (x - c)

        r = lbfgsb_minimize(quad, np.zeros(n), bounds=(lo, hi),
                            config=OptimizerConfig(max_iter=300, grad_tol=1e-12))
        box_err = max(box_err, float(np.max(np.abs(r.theta - np.clip(c, lo, hi)))))
    ok = rosen_err < 1e-6 and box_err < 1e-6
    _line(4, ok,
          f"banana-valley solution err {rosen_err:.2e}, bounded quadratic err "
          f"{box_err:.2e} (bounds 1e-6)")


# --------------------------------------------------------------------------
# 5. sampler correctness on a correlated Gaussian


def test_criterion_05_sampler():
    started = time.perf_counter()
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    prec = np.linalg.inv(cov)

    def target(x):
        return float(-0.5 * x @ prec @ x), -prec @ x

    res = hmc_sample(target, np.zeros(2),
                     HmcConfig(step_size=0.25, n_leapfrog=12, n_samples=5000),
                     rng=np.random.default_rng(3))
    mean_err = float(np.max(np.abs(res.samples.mean(axis=0))))
    cov_err = float(np.max(np.abs(np.cov(res.samples.T) - cov)))

    rng = np.random.default_rng(55)
    x0, p0 = rng.normal(size=2), rng.normal(size=2)
    x1, p1, _, _ = leapfrog(target, x0, p0, 0.1, 30)
    xb, pb, _, _ = leapfrog(target, x1, -p1, 0.1, 30)
    rev_err = float(max(np.max(np.abs(xb - x0)), np.max(np.abs(-pb - p0))))

    tiny = hmc_sample(target, np.zeros(2),
                      HmcConfig(step_size=1e-5, n_leapfrog=5, n_samples=500),
                      rng=np.random.default_rng(9))
    elapsed = time.perf_counter() - started
    ok = (mean_err < 0.05 and cov_err < 0.1 and rev_err < 1e-8
          and tiny.accept_rate > 0.99 and elapsed < 120)
    _line(5, ok,
          f"mean err {mean_err:.3f} (<0.05), cov err {cov_err:.3f} (<0.1), "
          f"reversibility {rev_err:.1e} (<1e-8), tiny-step acceptance "
          f"{tiny.accept_rate:.3f} (>0.99), {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 6. scoring rules


def test_criterion_06_scores():
    started = time.perf_counter()
    rng = np.random.default_rng(606)
    samples = rng.standard_normal(100_000)
    es = energy_score(samples, np.array([0.0]))
    crps_rel = abs(es - 0.2337) / 0.2337
    es_zero = energy_score(np.full(50, 1.25), np.array([1.25]))

    dtw_ok = True
    for _ in range(100):
        a = rng.integers(0, 10, size=int(rng.integers(1, 21))).astype(float)
        b = rng.integers(0, 10, size=int(rng.integers(1, 21))).astype(float)
        if dtw_distance(a, b) != dtw_table(a, b):
            dtw_ok = False
            break
    elapsed = time.perf_counter() - started
    ok = crps_rel < 0.02 and es_zero == 0.0 and dtw_ok and elapsed < 60
    _line(6, ok,
          f"energy score {es:.4f} vs 0.2337 (rel {crps_rel:.4f} < 0.02), "
          f"point-mass score {es_zero}, alignment oracle exact on 100 series, "
          f"{elapsed:.1f}s")


# --------------------------------------------------------------------------
# 7. synthetic end-to-end recovery study


_T, _T0, _M = 80, 55, 3


def _generative_structure():
    s = build_variant("2FGP", _M, 1, VariantDefaults())
    values = {
        "term0.loading0": 1.0, "term0.loading1": 0.8, "term0.loading2": 1.2,
        "term1.loading0": 0.7, "term1.loading1": 0.9, "term1.loading2": 0.6,
        "term0.kernel.variance": 1.0, "term1.kernel.variance": 0.5,
    }
    for q in range(2):
        for i in range(_M):
            values[f"term{q}.nugget{i}"] = 0.05
    for i in range(_M):
        values[f"noise{i}"] = 0.05
    for k, v in values.items():
        s.set_param(k, v)
    return s


def _simulate_panel(rng, delta):
    times = np.arange(float(_T))
    covs, records = [], []
    for i in range(_M):
        phase = rng.uniform(0, 2 * np.pi)
        x = np.cos(times / 8.0 + phase) + 0.05 * rng.standard_normal(_T)
        covs.append(x[:, None])
        records.append(SeriesRecord(f"s{i}", times.copy(), np.zeros(_T),
                                    covs[i], is_treated=(i == 0),
                                    t0=_T0 if i == 0 else None))
    skeleton = HeterotopicDataset(records, ("x0",))
    structure = _generative_structure()
    tagged = skeleton.tagged_inputs()
    sigma = assemble_covariance(structure, tagged) + np.diag(
        noise_diagonal(structure, tagged))
    chol = np.linalg.cholesky(sigma + 1e-10 * np.eye(len(tagged)))
    y = chol @ rng.standard_normal(len(tagged))
    final = []
    for i in range(_M):
        yi = y[i * _T:(i + 1) * _T].copy()
        if i == 0:
            yi[_T0:] += delta
        final.append(SeriesRecord(f"s{i}", times.copy(), yi, covs[i],
                                  is_treated=(i == 0),
                                  t0=_T0 if i == 0 else None))
    return HeterotopicDataset(final, ("x0",))


def _recover_average_effect(seed, delta):
    rng = np.random.default_rng(seed)
    panel = _simulate_panel(rng, delta)
    train, post, post_y, _ = panel.split_intervention()
    structure = build_variant("2FGP", _M, 1, VariantDefaults.from_dataset(train))
    ml2 = Ml2Config(OptimizerConfig(max_iter=60), restarts=1)
    fitted = fit_ml2(structure, train, ml2, seed=seed).fitted
    target = make_loading_target(fitted.structure, train, sample_noise=True)
    res = hmc_sample(target, target.x0,
                     HmcConfig(step_size=0.1, n_leapfrog=6, n_samples=300),
                     rng=np.random.default_rng(seed + 1))
    cf = counterfactual_posterior(fitted.structure, train, post,
                                  res.samples[::6], target, n_pred=30,
                                  rng=np.random.default_rng(seed + 2))
    draws = CausalEffects(cf, post_y,
                          tier="function+loadings+noise").average_draws()
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return float(np.mean(draws)), float(lo), float(hi)


def test_criterion_07_synthetic_recovery():
    started = time.perf_counter()
    seeds = np.random.SeedSequence(707).generate_state(100)
    covered = 0
    for seed in seeds[:50]:
        _, lo, hi = _recover_average_effect(int(seed), delta=1.0)
        covered += lo <= 1.0 <= hi
    reported = []
    for seed in seeds[50:]:
        tau_bar, _, _ = _recover_average_effect(int(seed), delta=0.0)
        reported.append(abs(tau_bar))
    med = float(np.median(reported))
    elapsed = time.perf_counter() - started
    ok = covered >= 43 and med < 0.15 and elapsed < 1800
    _line(7, ok,
          f"interval coverage {covered}/50 (need >= 43), zero-effect median "
          f"|tau_bar| {med:.3f} (< 0.15), {elapsed:.0f}s (< 1800)")


# --------------------------------------------------------------------------
# 8. donor combination enumeration


def test_criterion_08_combination_enumeration():
    rng = np.random.default_rng(808)
    times = np.arange(12.0)
    base = np.sin(times / 2.0)
    records = [SeriesRecord("tr", times.copy(), base + 0.1 * rng.standard_normal(12),
                            rng.normal(size=(12, 1)), is_treated=True, t0=12)]
    for i in range(8):
        records.append(SeriesRecord(f"d{i}", times.copy(),
                                    (1 + 0.1 * i) * base + 0.1 * rng.standard_normal(12),
                                    rng.normal(size=(12, 1))))
    panel = HeterotopicDataset(records, ("x0",))
    tags = (*VARIANTS, "BCI")
    result = combination_search(
        panel, tags=tags, donors=[f"d{i}" for i in range(8)], combo_size=4,
        jobs=4, seed=1, n_score_samples=20,
        ml2=Ml2Config(OptimizerConfig(max_iter=10), restarts=1))
    combos = {c.combo for c in result.cards}
    unknown = [c for c in result.cards if c.tag == "BCI"]
    ok = (result.n_attempts == 420 and len(result.cards) == 420
          and len(combos) == math.comb(8, 4)
          and len(unknown) == 70
          and all(c.status == "error" for c in unknown))
    _line(8, ok,
          f"{len(combos)} donor subsets (need 70), {result.n_attempts} recorded "
          f"attempts (need 420), unknown tag produced {len(unknown)} error cards")


# --------------------------------------------------------------------------
# 9. multiplicative effect identity


def test_criterion_09_multiplicative_effect():
    rng = np.random.default_rng(909)
    delta = rng.normal(0.0, np.sqrt(2.0), size=1_000_000)
    effects = CausalEffects(-delta[:, None], np.zeros(1), tier="function")
    mc_mean = float(np.mean(effects.multiplicative_draws()))
    closed = float(effects.multiplicative_closed_form()[0])
    mc_rel = abs(mc_mean - np.e) / np.e
    cf_rel = abs(closed - np.e) / np.e
    ok = mc_rel < 0.01 and cf_rel < 0.01
    _line(9, ok,
          f"Monte Carlo mean of exp(effect) {mc_mean:.4f} vs e (rel "
          f"{mc_rel:.4f} < 0.01), closed form {closed:.4f} (rel {cf_rel:.4f})")


# --------------------------------------------------------------------------
# 10. pipeline determinism


def test_criterion_10_pipeline_determinism(tmp_path):
    rng = np.random.default_rng(1010)
    panel = _simulate_panel(rng, delta=1.0)
    rows = ["region,week,deaths,x0"]
    for rec in panel.series:
        for t, yv, xv in zip(rec.times, rec.y, rec.covariates[:, 0]):
            rows.append(f"{rec.series_id},{fmt_float(t)},{fmt_float(yv)},"
                        f"{fmt_float(xv)}")
    csv_path = tmp_path / "panel.csv"
    csv_path.write_text("\n".join(rows) + "\n")

    config = {
        "data": {"csv": str(csv_path),
                 "schema": {"series_id": "region", "time": "week",
                            "y": "deaths", "covariates": ["x0"],
                            "treated": "s0", "intervention_time": 54.5}},
        "screen": {"top_k": 2},
        "compare": {"tags": ["2FGP", "1FGP"], "combo_size": 2, "restarts": 1,
                    "max_iter": 20, "n_score_samples": 40},
        "fit": {"restarts": 1, "max_iter": 50},
        "infer": {"step_size": 0.02, "n_leapfrog": 8, "n_samples": 120,
                  "burn_in": 0.2, "sample_noise": False},
        "effect": {"n_pred": 5, "thin": 12, "level": 0.95,
                   "include_noise": True},
        "seed": 1010,
    }
    cfg_path = tmp_path / "config.yaml"
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(config, fh)

    stages = ["screen", "compare", "fit", "infer", "effect"]
    outs = [tmp_path / "run_a", tmp_path / "run_b"]
    for out in outs:
        for stage in stages:
            code = cli_main([stage, "--config", str(cfg_path), "--out", str(out)])
            assert code == 0, f"{stage} exited {code}"

    names = sorted(os.listdir(outs[0]))
    assert names == sorted(os.listdir(outs[1]))
    differing = [n for n in names if n != "timings.json"
                 and (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    n_checked = len(names) - 1
    _line(10, not differing,
          f"{n_checked} artifacts byte-identical across reruns"
          + (f"; differing: {differing}" if differing else ""))
