"""Bound-constrained limited-memory quasi-Newton minimization.

The minimizer keeps the last ``memory`` curvature pairs and applies the
two-loop recursion on a gradient-projection active set. Steps come from a
strong Wolfe line search; near a bound, where the Wolfe conditions can be
unattainable along the clipped path, it falls back to projected
backtracking that still enforces sufficient decrease. Every accepted step
satisfies the Armijo condition, asserted where the step is accepted.

Type-II maximum likelihood for GP structures (``fit_ml2``) runs this
minimizer on the negative log marginal likelihood with positive
parameters handled in log space.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .coregional import MogpStructure
from .dataset import HeterotopicDataset, fmt_float
from .engine import FactorizationError, FittedGp


@dataclass
class OptimizerConfig:
    memory: int = 20
    max_iter: int = 200
    grad_tol: float = 1e-5
    c1: float = 1e-4
    c2: float = 0.9
    max_search_evals: int = 25
    trace_path: str | None = None


@dataclass
class MinimizeResult:
    theta: np.ndarray
    value: float
    status: str  # converged | max_iter | line_search_failure | converged_trivially
    n_iter: int
    grad_inf_norm: float
    n_evals: int
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status in ("converged", "converged_trivially")


def two_loop_direction(grad: np.ndarray, pairs, gamma: float) -> np.ndarray:
    """Apply the implicit inverse-Hessian estimate to a gradient.

    ``pairs`` is the (s, y, rho) history, oldest first; ``gamma`` scales
    the initial diagonal. With the full history retained this reproduces
    the dense recursive inverse-Hessian update exactly.
    """
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    r = gamma * q
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ r)
        r += s * (a - b)
    return r


def _projected_gradient(x, g, lower, upper):
    return x - np.clip(x - g, lower, upper)


def _made_progress(x, f, x_new, f_new):
    moved = np.max(np.abs(x_new - x)) > 1e-13 * (1.0 + np.max(np.abs(x)))
    dropped = f - f_new > 1e-13 * (1.0 + abs(f))
    return moved and dropped


def _snap_to_bounds(x, lower, upper):
    near_lo = np.isfinite(lower) & (np.abs(x - lower) <= 1e-10 * np.maximum(1.0, np.abs(lower)))
    near_hi = np.isfinite(upper) & (np.abs(x - upper) <= 1e-10 * np.maximum(1.0, np.abs(upper)))
    return np.where(near_lo, lower, np.where(near_hi, upper, x))


def lbfgsb_minimize(fun, x0: np.ndarray, bounds=None,
                    config: OptimizerConfig | None = None) -> MinimizeResult:
    """Minimize fun(x) -> (value, gradient) inside a box.

    Parameters
    ----------
    fun : callable
        Returns the objective value and its gradient at x. A non-finite
        value rejects the trial point (the search backtracks); the start
        must be finite.
    x0 : ndarray
        Starting point; projected onto the box if it lies outside.
    bounds : (lower, upper) arrays or None
        Elementwise box. None means unconstrained.

    Notes
    -----
    Convergence is declared on the infinity norm of the projected
    gradient. No evaluated point ever leaves the box.
    """
    cfg = config or OptimizerConfig()
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    if bounds is None:
        lower, upper = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lower = np.asarray(bounds[0], dtype=float)
        upper = np.asarray(bounds[1], dtype=float)
        if np.any(lower > upper):
            raise ValueError("lower bound above upper bound")

    evals = 0

    def call(x):
        nonlocal evals
        evals += 1
        f, g = fun(x)
        return float(f), np.asarray(g, dtype=float)

    x = np.clip(x0, lower, upper)
    f, g = call(x)
    if not np.isfinite(f):
        raise ValueError("objective is non-finite at the starting point")

    pairs: deque = deque(maxlen=cfg.memory)
    gamma = 1.0
    trace = []
    status = "max_iter"
    it = 0

    trace_fh = open(cfg.trace_path, "w") if cfg.trace_path else None
    if trace_fh:
        trace_fh.write("iter,f,proj_grad_inf\n")

    try:
        for it in range(cfg.max_iter + 1):
            pg = _projected_gradient(x, g, lower, upper)
            pg_norm = float(np.max(np.abs(pg))) if n else 0.0
            trace.append((it, f, pg_norm))
            if trace_fh:
                trace_fh.write(f"{it},{fmt_float(f)},{fmt_float(pg_norm)}\n")
            if pg_norm < cfg.grad_tol:
                status = "converged" if it > 0 else "converged_trivially"
                break
            if it == cfg.max_iter:
                status = "max_iter"
                break

            tol_lo = np.where(np.isfinite(lower), 1e-12 * np.maximum(1.0, np.abs(lower)), 0.0)
            tol_hi = np.where(np.isfinite(upper), 1e-12 * np.maximum(1.0, np.abs(upper)), 0.0)
            at_lower = x <= lower + tol_lo
            at_upper = x >= upper - tol_hi
            frozen = (at_lower & (g > 0)) | (at_upper & (g < 0))

            def feasible(direction):
                # outward components at a bound are infeasible; frozen
                # coordinates (bound with an outward gradient) stay put
                direction[frozen] = 0.0
                direction[at_lower & (direction < 0)] = 0.0
                direction[at_upper & (direction > 0)] = 0.0
                return direction

            d = feasible(-two_loop_direction(g, pairs, gamma))
            descent = float(d @ g)
            if descent > -1e-12 * np.linalg.norm(d) * np.linalg.norm(g):
                d = feasible(-g.copy())
                descent = float(d @ g)

            # largest feasible step before a free coordinate hits the box
            with np.errstate(divide="ignore", invalid="ignore"):
                steps = np.where(d > 0, (upper - x) / d, np.where(d < 0, (lower - x) / d, np.inf))
            alpha_max = float(np.min(steps)) if np.any(np.isfinite(steps)) else np.inf

            first = not pairs and it == 0
            alpha_init = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12)) if first else 1.0
            alpha_init = min(alpha_init, alpha_max)

            step = None
            if alpha_max > 1e-8:
                step = _wolfe_search(call, x, f, g, d, descent, alpha_init, alpha_max,
                                     cfg.c1, cfg.c2, cfg.max_search_evals)
            if step is not None and not _made_progress(x, f, *step[:2]):
                step = None
            if step is None:
                # the straight segment inside the box is too short (or made
                # no progress); bend the path around the box instead
                step = _projected_backtrack(call, x, f, g, d, lower, upper,
                                            1.0, cfg.c1, cfg.max_search_evals)
            if step is None:
                status = "line_search_failure"
                break

            x_new, f_new, g_new = step
            x_new = np.clip(x_new, lower, upper)
            x_new = _snap_to_bounds(x_new, lower, upper)
            s = x_new - x
            yv = g_new - g
            sy = float(s @ yv)
            if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
                pairs.append((s, yv, 1.0 / sy))
                gamma = sy / float(yv @ yv)
            x, f, g = x_new, f_new, g_new
    finally:
        if trace_fh:
            trace_fh.close()

    pg_norm = float(np.max(np.abs(_projected_gradient(x, g, lower, upper)))) if n else 0.0
    return MinimizeResult(x, f, status, it, pg_norm, evals, trace)


def _wolfe_search(call, x, f0, g0, d, dphi0, alpha_init, alpha_max, c1, c2, max_evals):
    """Strong Wolfe bracketing search along x + alpha * d (alpha <= alpha_max).

    Returns (x_new, f_new, g_new) or None when no acceptable step was
    found within the evaluation budget.
    """
    if dphi0 >= 0 or alpha_max <= 0:
        return None

    def phi(alpha):
        xt = x + alpha * d
        ft, gt = call(xt)
        return xt, ft, gt, (float(gt @ d) if np.all(np.isfinite(gt)) else np.nan)

    def accept(alpha, xt, ft, gt):
        # sufficient decrease must hold on anything we accept
        assert ft <= f0 + c1 * alpha * dphi0 + 1e-12 * abs(f0), \
            "line search accepted a step without sufficient decrease"
        return xt, ft, gt

    alpha_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    alpha = alpha_init if alpha_init > 0 else min(1.0, alpha_max)
    if alpha <= 0:
        return None
    budget = max_evals

    for i in range(max_evals):
        xt, ft, gt, dphi = phi(alpha)
        budget -= 1
        if not np.isfinite(ft) or ft > f0 + c1 * alpha * dphi0 or (i > 0 and ft >= f_prev):
            return _zoom(call, x, f0, dphi0, d, alpha_prev, f_prev, dphi_prev,
                         alpha, ft, c1, c2, budget, accept)
        if abs(dphi) <= -c2 * dphi0:
            return accept(alpha, xt, ft, gt)
        if dphi >= 0:
            return _zoom(call, x, f0, dphi0, d, alpha, ft, dphi,
                         alpha_prev, f_prev, c1, c2, budget, accept)
        if alpha >= alpha_max * (1 - 1e-12):
            # boundary reached while still descending: Armijo holds here
            return accept(alpha, xt, ft, gt)
        alpha_prev, f_prev, dphi_prev = alpha, ft, dphi
        alpha = min(2.0 * alpha, alpha_max)
    return None


def _zoom(call, x, f0, dphi0, d, alpha_lo, f_lo, dphi_lo, alpha_hi, f_hi,
          c1, c2, budget, accept):
    """Nocedal-style zoom on a bracket known to contain a Wolfe point."""
    for _ in range(max(budget, 1)):
        lo, hi = alpha_lo, alpha_hi
        # quadratic interpolation with bisection safeguard
        denom = f_hi - f_lo - dphi_lo * (hi - lo)
        if np.isfinite(denom) and abs(denom) > 1e-16:
            alpha = lo - 0.5 * dphi_lo * (hi - lo) ** 2 / denom
        else:
            alpha = 0.5 * (lo + hi)
        span_lo, span_hi = min(lo, hi), max(lo, hi)
        width = span_hi - span_lo
        if not (span_lo + 0.1 * width <= alpha <= span_hi - 0.1 * width):
            alpha = 0.5 * (lo + hi)
        if width < 1e-16 * max(1.0, abs(lo)):
            return None

        xt = x + alpha * d
        ft, gt = call(xt)
        dphi = float(gt @ d) if np.all(np.isfinite(gt)) else np.nan
        if not np.isfinite(ft) or ft > f0 + c1 * alpha * dphi0 or ft >= f_lo:
            alpha_hi, f_hi = alpha, ft
        else:
            if abs(dphi) <= -c2 * dphi0:
                return accept(alpha, xt, ft, gt)
            if dphi * (alpha_hi - alpha_lo) >= 0:
                alpha_hi, f_hi = alpha_lo, f_lo
            alpha_lo, f_lo, dphi_lo = alpha, ft, dphi
    return None


def _projected_backtrack(call, x, f0, g0, d, lower, upper, alpha, c1, max_evals):
    """Armijo backtracking along the projected path clip(x + alpha d)."""
    for _ in range(max_evals):
        if alpha <= 1e-20:
            break
        xt = np.clip(x + alpha * d, lower, upper)
        step = xt - x
        if np.any(step != 0):
            ft, gt = call(xt)
            decrease_ref = float(g0 @ step)
            if np.isfinite(ft) and decrease_ref < 0 and ft <= f0 + c1 * decrease_ref:
                assert ft <= f0 + c1 * decrease_ref + 1e-12 * abs(f0)
                return xt, ft, gt
        alpha *= 0.5
    return None


# --------------------------------------------------------------------------
# type-II maximum likelihood


@dataclass
class Ml2Config:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    restarts: int = 3
    jitter_sd: float = 0.5


@dataclass
class Ml2Result:
    fitted: FittedGp
    result: MinimizeResult
    restart_values: list[float]
    param_names: list[str]


def _to_opt_space(values, specs):
    out = np.empty(len(values))
    for i, (v, s) in enumerate(zip(values, specs)):
        out[i] = np.log(v) if s.positive else v
    return out


def _from_opt_space(values, specs):
    out = np.empty(len(values))
    for i, (v, s) in enumerate(zip(values, specs)):
        out[i] = np.exp(v) if s.positive else v
    return out


def _opt_bounds(specs):
    lower = np.empty(len(specs))
    upper = np.empty(len(specs))
    for i, s in enumerate(specs):
        if s.positive:
            lower[i] = np.log(s.lower) if s.lower > 0 else -np.inf
            upper[i] = np.log(s.upper) if np.isfinite(s.upper) else np.inf
        else:
            lower[i], upper[i] = s.lower, s.upper
    return lower, upper


def fit_ml2(structure: MogpStructure, data: HeterotopicDataset,
            config: Ml2Config | None = None, seed: int = 0) -> Ml2Result:
    """Maximize the log marginal likelihood over all free parameters.

    Positive parameters are optimized in log space; loadings stay in
    natural space (the first loading of each term is bounded at zero to
    fix the sign of the rank-one factor). Runs ``restarts`` searches, the
    first from the structure's current values and the rest from jittered
    starts, and keeps the best.

    The returned fit never has a lower log marginal likelihood than the
    starting structure evaluates to.
    """
    cfg = config or Ml2Config()
    specs = structure.free_param_specs()
    names = [s.name for s in specs]
    if not names:
        fitted = FittedGp(structure.clone(), data)
        res = MinimizeResult(np.empty(0), -fitted.log_ml, "converged_trivially", 0, 0.0, 1)
        return Ml2Result(fitted, res, [-fitted.log_ml], names)

    x0 = _to_opt_space(structure.get_values(names), specs)
    bounds = _opt_bounds(specs)
    rng = np.random.default_rng(seed)

    def objective(xopt):
        trial = structure.clone()
        try:
            trial.set_values(names, _from_opt_space(xopt, specs))
            fitted = FittedGp(trial, data)
        except (FactorizationError, ValueError, FloatingPointError, OverflowError):
            return np.inf, np.zeros_like(xopt)
        grad_nat = fitted.gradient(names)
        chain = np.array([np.exp(xv) if s.positive else 1.0 for xv, s in zip(xopt, specs)])
        return -fitted.log_ml, -grad_nat * chain

    best: MinimizeResult | None = None
    restart_values = []
    failures = []
    for r in range(max(1, cfg.restarts)):
        start = x0 if r == 0 else np.clip(x0 + rng.normal(scale=cfg.jitter_sd, size=len(x0)),
                                          bounds[0], bounds[1])
        try:
            res = lbfgsb_minimize(objective, start, bounds, cfg.optimizer)
        except ValueError as exc:
            failures.append(str(exc))
            continue
        restart_values.append(res.value)
        if best is None or res.value < best.value:
            best = res
    if best is None:
        raise FactorizationError(
            f"every restart failed before the first step: {failures}")

    final = structure.clone()
    final.set_values(names, _from_opt_space(best.theta, specs))
    return Ml2Result(FittedGp(final, data), best, restart_values, names)
