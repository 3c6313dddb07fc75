"""Concept-to-input robustness transfer checks.

For the linear+sigmoid concept predictor the Lipschitz constant has the
closed form sigma_max(W)/4 (spectral norm times the sigmoid's maximal
slope), so concept-space perturbation norms divide through to certified
lower bounds on input-space perturbation norms. The numerical search for
input perturbations returns upper bounds on the true minima, which makes
the lower-bound check assertable and the monotone-transfer check a logged
diagnostic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    LinearConceptPredictor,
    as_vector,
    predictor_forward,
    pseudoinverse,
    sigmoid,
    spectral_norm,
)
from .errors import ParameterError

_N_STAGES = 10  # norm-penalty coefficient halves each stage, starting at 1.0


@dataclass(frozen=True)
class TransferTrial:
    dc_norm: float
    dx_norm: float
    bound_rhs: float  # dc_norm / L
    prop1_ok: bool


@dataclass(frozen=True)
class Thm1Pair:
    dx_diff: float
    dc_diff_over_l: float
    consistent: bool


@dataclass(frozen=True)
class TransferReport:
    lipschitz_bound: float
    lipschitz_empirical: float
    trials: tuple[TransferTrial, ...] = ()
    thm1_pairs: tuple[Thm1Pair, ...] = ()

    def __post_init__(self):
        if self.lipschitz_empirical > self.lipschitz_bound + 1e-9:
            raise ParameterError(
                "empirical Lipschitz estimate exceeds the analytic bound: "
                f"{self.lipschitz_empirical} > {self.lipschitz_bound}"
            )
        object.__setattr__(self, "trials", tuple(self.trials))
        object.__setattr__(self, "thm1_pairs", tuple(self.thm1_pairs))


@dataclass(frozen=True)
class InputSearchResult:
    delta_x: np.ndarray
    achieved_delta_c: np.ndarray
    converged: bool
    stage_norms: tuple[float, ...]  # best feasible norm after each annealing stage


def lipschitz_bound_analytic(p: LinearConceptPredictor) -> float:
    """Global Lipschitz constant sigma_max(weights) / 4 for sigmoid(Wx + b)."""
    return spectral_norm(p.weights) / 4.0


def lipschitz_estimate_empirical(p: LinearConceptPredictor, n_pairs: int, seed: int) -> float:
    """Sampled lower estimate of the Lipschitz constant.

    Mixes far pairs, near-coincident pairs (offset 1e-4) at centers of
    shrinking scale, and two directed probes along the top singular
    direction at the preimage of zero logits, where the sigmoid slope
    peaks. Always a valid lower bound on the true constant.
    """
    if n_pairs < 1:
        raise ParameterError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    d = p.num_features

    def ratio(x1, x2):
        gap = float(np.linalg.norm(x1 - x2))
        if gap == 0.0:
            return 0.0
        return float(np.linalg.norm(predictor_forward(p, x1) - predictor_forward(p, x2))) / gap

    best = 0.0
    scales = (1.0, 0.3, 0.1, 0.03, 0.0)
    for i in range(n_pairs):
        x1 = rng.normal(size=d)
        x2 = rng.normal(size=d)
        best = max(best, ratio(x1, x2))
        center = rng.normal(size=d) * scales[i % len(scales)]
        step = rng.normal(size=d)
        nrm = np.linalg.norm(step)
        if nrm > 0:
            offset = 5e-5 * step / nrm
            best = max(best, ratio(center + offset, center - offset))
    # directed probes: top singular direction at zero-logit preimage and origin
    _, _, vt = np.linalg.svd(p.weights, full_matrices=False)
    v_top = vt[0]
    x_zero = -pseudoinverse(p.weights) @ p.bias
    for center in (x_zero, np.zeros(d)):
        best = max(best, ratio(center + 5e-5 * v_top, center - 5e-5 * v_top))
    return best


def _logit(c: np.ndarray) -> np.ndarray:
    return np.log(c) - np.log1p(-c)


def input_space_attack(
    p: LinearConceptPredictor,
    x,
    delta_c_target,
    tol: float = 1e-6,
    max_iters: int = 400,
) -> InputSearchResult:
    """Search for a small input perturbation realizing a concept perturbation.

    Minimizes ||h(x+d) - (h(x)+delta_c_target)||^2 + mu ||d||^2 with the
    norm penalty mu halved across ten stages from 1.0, each stage refined
    by damped Gauss-Newton steps and finished with a feasibility-restoring
    Newton polish. Keeps the smallest-norm iterate whose concept error is
    within tol; by construction that norm upper-bounds the true minimum.
    Targets outside the open sigmoid range are flagged unsolvable
    immediately.
    """
    if tol <= 0:
        raise ParameterError("tol must be > 0")
    if max_iters < 1:
        raise ParameterError("max_iters must be >= 1")
    x = as_vector(x)
    target_step = as_vector(delta_c_target)
    c0 = predictor_forward(p, x)
    c_target = c0 + target_step
    d = x.size
    if np.any(c_target >= 1.0) or np.any(c_target <= 0.0):
        return InputSearchResult(
            delta_x=np.zeros(d), achieved_delta_c=np.zeros(len(c0)),
            converged=False, stage_norms=(),
        )
    if float(np.linalg.norm(target_step)) == 0.0:
        return InputSearchResult(
            delta_x=np.zeros(d), achieved_delta_c=np.zeros(len(c0)),
            converged=True, stage_norms=tuple(0.0 for _ in range(_N_STAGES)),
        )

    w = p.weights

    def forward(delta):
        return sigmoid(w @ (x + delta) + p.bias)

    def residual(delta):
        return forward(delta) - c_target

    def jac(delta):
        c = forward(delta)
        return (c * (1.0 - c))[:, None] * w

    best_delta = None
    best_norm = math.inf
    stage_norms = []
    delta = np.zeros(d)
    iters_per_stage = max(1, max_iters // _N_STAGES)
    for stage in range(_N_STAGES):
        mu = 1.0 / 2.0**stage
        damping = 1e-3
        for _ in range(iters_per_stage):
            r = residual(delta)
            j = jac(delta)
            grad = j.T @ r + mu * delta
            if np.linalg.norm(grad) < 1e-12:
                break
            h = j.T @ j + (mu + damping) * np.eye(d)
            step = np.linalg.solve(h, -grad)
            obj = float(r @ r) + mu * float(delta @ delta)
            cand = delta + step
            rc = residual(cand)
            cand_obj = float(rc @ rc) + mu * float(cand @ cand)
            if cand_obj < obj:
                delta = cand
                damping = max(damping / 3.0, 1e-12)
            else:
                damping *= 3.0
        # feasibility polish: Newton on residual(delta) = 0
        polished = delta.copy()
        for _ in range(8):
            r = residual(polished)
            if np.linalg.norm(r) <= tol * 0.1:
                break
            polished = polished - pseudoinverse(jac(polished)) @ r
        for cand in (delta, polished):
            err = float(np.linalg.norm(residual(cand)))
            norm = float(np.linalg.norm(cand))
            if err <= tol and norm < best_norm:
                best_norm = norm
                best_delta = cand.copy()
        stage_norms.append(best_norm)

    if best_delta is None:
        return InputSearchResult(
            delta_x=delta, achieved_delta_c=forward(delta) - c0,
            converged=False, stage_norms=tuple(stage_norms),
        )
    return InputSearchResult(
        delta_x=best_delta, achieved_delta_c=forward(best_delta) - c0,
        converged=True, stage_norms=tuple(stage_norms),
    )


def _interior_target(c0: np.ndarray, rng: np.random.Generator,
                     scale: float = 1.0) -> np.ndarray:
    """A concept step keeping the target strictly inside (0,1)^K."""
    anchor = rng.uniform(0.1, 0.9, size=c0.size)
    s = rng.uniform(0.2, 0.8) * scale
    return s * (anchor - c0)


def prop1_check(p: LinearConceptPredictor, trials: int, seed: int,
                tol: float = 1e-6, max_iters: int = 400) -> TransferReport:
    """Lower-bound check: every found input perturbation must satisfy
    ||delta_x|| >= ||delta_c_achieved|| / L.

    Holds for any perturbation the search returns, not just minimal ones,
    so converged trials pass unconditionally; non-converged trials are
    recorded with prop1_ok=False and a NaN input norm.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    bound = lipschitz_bound_analytic(p)
    rows = []
    for _ in range(trials):
        x = rng.normal(size=p.num_features)
        step = _interior_target(predictor_forward(p, x), rng)
        res = input_space_attack(p, x, step, tol=tol, max_iters=max_iters)
        if not res.converged:
            rows.append(TransferTrial(
                dc_norm=float(np.linalg.norm(step)), dx_norm=math.nan,
                bound_rhs=math.nan, prop1_ok=False,
            ))
            continue
        dc = float(np.linalg.norm(res.achieved_delta_c))
        dx = float(np.linalg.norm(res.delta_x))
        rhs = dc / bound if bound > 0 else 0.0
        rows.append(TransferTrial(
            dc_norm=dc, dx_norm=dx, bound_rhs=rhs,
            prop1_ok=bool(dx >= rhs - 1e-9),
        ))
    return TransferReport(
        lipschitz_bound=bound,
        lipschitz_empirical=lipschitz_estimate_empirical(p, max(trials, 100), seed),
        trials=tuple(rows),
    )


def thm1_diagnostic(p: LinearConceptPredictor, pairs: int, seed: int,
                    tol: float = 1e-6, max_iters: int = 400,
                    linear_map: bool = False) -> tuple[Thm1Pair, ...]:
    """Monotone-transfer check on nested concept perturbations.

    For each pair, two concept steps along the same direction with norms
    n1 < n2 are realized in input space and the difference of input norms
    is compared against (n2 - n1) / L. With linear_map=True the predictor
    is treated as its pre-sigmoid affine map, where minimal perturbations
    are exactly pinv(W) @ delta_c and the inequality is exact; otherwise
    the searched norms are upper bounds and violations are logged, not
    raised.
    """
    if pairs < 1:
        raise ParameterError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    if linear_map:
        lipschitz = spectral_norm(p.weights)
        pinv = pseudoinverse(p.weights)
        for _ in range(pairs):
            direction = rng.normal(size=p.num_concepts)
            direction /= np.linalg.norm(direction)
            n1 = rng.uniform(0.05, 0.5)
            n2 = n1 * rng.uniform(1.2, 3.0)
            dx1 = float(np.linalg.norm(pinv @ (n1 * direction)))
            dx2 = float(np.linalg.norm(pinv @ (n2 * direction)))
            rhs = (n2 - n1) / lipschitz
            out.append(Thm1Pair(
                dx_diff=dx2 - dx1, dc_diff_over_l=rhs,
                consistent=bool(dx2 - dx1 >= rhs - 1e-9),
            ))
        return tuple(out)

    lipschitz = lipschitz_bound_analytic(p)
    for _ in range(pairs):
        x = rng.normal(size=p.num_features)
        c0 = predictor_forward(p, x)
        step = _interior_target(c0, rng)
        frac = rng.uniform(0.3, 0.7)
        res_small = input_space_attack(p, x, frac * step, tol=tol, max_iters=max_iters)
        res_big = input_space_attack(p, x, step, tol=tol, max_iters=max_iters)
        if not (res_small.converged and res_big.converged):
            out.append(Thm1Pair(dx_diff=math.nan, dc_diff_over_l=math.nan, consistent=False))
            continue
        dc_small = float(np.linalg.norm(res_small.achieved_delta_c))
        dc_big = float(np.linalg.norm(res_big.achieved_delta_c))
        dx_diff = float(np.linalg.norm(res_big.delta_x) - np.linalg.norm(res_small.delta_x))
        rhs = (dc_big - dc_small) / lipschitz if lipschitz > 0 else 0.0
        out.append(Thm1Pair(
            dx_diff=dx_diff, dc_diff_over_l=rhs,
            consistent=bool(dx_diff >= rhs - 1e-9),
        ))
    return tuple(out)


def transfer_suite(p: LinearConceptPredictor, trials: int, pairs: int, seed: int,
                   tol: float = 1e-6, max_iters: int = 400) -> TransferReport:
    """Full transfer report: Lipschitz estimates, lower-bound trials, monotone pairs."""
    report = prop1_check(p, trials, seed, tol=tol, max_iters=max_iters)
    pairs_rows = thm1_diagnostic(p, pairs, seed + 1, tol=tol, max_iters=max_iters)
    return TransferReport(
        lipschitz_bound=report.lipschitz_bound,
        lipschitz_empirical=report.lipschitz_empirical,
        trials=report.trials,
        thm1_pairs=pairs_rows,
    )
