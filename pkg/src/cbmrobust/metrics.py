"""Sample- and dataset-level concept-space robustness metrics.

The minimal perturbation norm rho is the smallest L2 displacement in
concept space that flips the prediction; attackability is its reciprocal
1/(rho + 1e-8), so large values mean the sample sits next to a decision
boundary. Samples where no target attack succeeds carry rho = +inf, are
flagged infeasible, and are excluded from aggregate means.

For layered (nonlinear) heads the same metrics are computed through the
iterative linearized attack; treat those numbers as local-linearization
estimates rather than exact boundary distances.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .attacks import (
    AttackConfig,
    attacks_over_targets,
    mlp_attacks_over_targets,
)
from .core import Dataset, LabeledSample, LinearHead, MlpHead, mlp_predict, predict
from .errors import DegenerateDirectionError, MetricError, ParameterError

log = logging.getLogger(__name__)

ATTACKABILITY_STABILIZER = 1e-8


def attackability_score(rho: float) -> float:
    """1 / (rho + 1e-8); the stabilizer caps on-boundary samples at 1e8."""
    if rho < 0:
        raise ParameterError("rho must be >= 0")
    return 1.0 / (rho + ATTACKABILITY_STABILIZER)


@dataclass(frozen=True)
class SampleRobustness:
    rho: float
    attackability: float
    per_target_attackability: dict[int, float]
    rel_pert_norm: float
    attack_feasible: bool


@dataclass(frozen=True)
class DatasetRobustness:
    mean_attackability: float
    per_class_mean: dict[int, float]
    median_rho: float
    p95_rho: float
    iqr_rho: float
    mean_rel_pert_norm: float
    n_samples: int
    n_feasible: int
    sparsity: float
    mean_sq_rho: float  # E[rho^2] over feasible samples; feeds the bound diagnostic
    n_misclassified: int = 0  # already-wrong samples, excluded from the attack set


def sample_robustness(
    head, sample: LabeledSample, cfg: AttackConfig = AttackConfig(), method: str = "single"
) -> SampleRobustness:
    """Minimal perturbation norm and attackability for one sample.

    The per-target map scores each reachable target by 1/(norm + 1e-8);
    targets whose attack fails the forward check contribute 0.
    """
    c_star = sample.concepts
    try:
        if isinstance(head, MlpHead):
            results = mlp_attacks_over_targets(head, c_star, sample.label, cfg)
        else:
            results = attacks_over_targets(head, c_star, sample.label, cfg, method)
    except DegenerateDirectionError as exc:
        raise MetricError(f"every target degenerate: {exc}") from exc

    per_target = {
        t: attackability_score(res.norm) if res.success else 0.0
        for t, res in sorted(results.items())
    }
    feasible = [res.norm for res in results.values() if res.success]
    rho = min(feasible) if feasible else math.inf
    c_norm = float(np.linalg.norm(c_star.values))
    if c_norm == 0.0:
        rel = math.nan
    else:
        rel = rho / c_norm
    return SampleRobustness(
        rho=rho,
        attackability=attackability_score(rho) if feasible else 0.0,
        per_target_attackability=per_target,
        rel_pert_norm=rel,
        attack_feasible=bool(feasible),
    )


def sparsity_metric(concepts) -> float:
    """Mean absolute concept activation over a batch of concept vectors."""
    vectors = [np.asarray(c, dtype=np.float64) for c in concepts]
    if not vectors:
        raise ParameterError("need at least one concept vector")
    return float(np.mean([np.mean(np.abs(v)) for v in vectors]))


def rel_pert_norm_mean(results: list[SampleRobustness]) -> float:
    """Mean relative perturbation norm rho / ||c*||.

    Infeasible samples and samples with a zero-norm clean vector are
    excluded; excluding everything is an error.
    """
    if not results:
        raise ParameterError("need at least one sample result")
    kept = [
        r.rel_pert_norm
        for r in results
        if r.attack_feasible and math.isfinite(r.rel_pert_norm)
    ]
    excluded = len(results) - len(kept)
    if excluded:
        log.debug("rel_pert_norm_mean: excluded %d of %d samples", excluded, len(results))
    if not kept:
        raise MetricError("every sample was excluded from the relative-norm mean")
    return float(np.mean(kept))


def per_sample_robustness(
    head, dataset: Dataset, cfg: AttackConfig = AttackConfig(), method: str = "single"
) -> list[SampleRobustness]:
    """Sample metrics for a whole dataset, in sample order.

    Samples whose every attack direction is degenerate are recorded as
    infeasible rows instead of aborting the batch.
    """
    rows = []
    for sample in dataset.samples:
        try:
            rows.append(sample_robustness(head, sample, cfg, method))
        except MetricError:
            rows.append(
                SampleRobustness(
                    rho=math.inf,
                    attackability=0.0,
                    per_target_attackability={},
                    rel_pert_norm=math.nan,
                    attack_feasible=False,
                )
            )
    return rows


def dataset_robustness(
    head, dataset: Dataset, cfg: AttackConfig = AttackConfig(), method: str = "single"
) -> DatasetRobustness:
    """Aggregate robustness over a dataset.

    Attacks are run on the samples the head classifies correctly from
    ground-truth concepts; already-misclassified samples need no
    perturbation (rho would be 0 by construction) and are counted in
    n_misclassified instead of flooding the mean with 1/epsilon terms.
    All means run over feasible samples only; with no feasible sample the
    rho statistics are NaN and the attackability mean is 0.
    """
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    predict_fn = mlp_predict if isinstance(head, MlpHead) else predict
    evaluated: list[SampleRobustness] = []
    eval_labels: list[int] = []
    n_misclassified = 0
    for sample in dataset.samples:
        if predict_fn(head, sample.concepts) != sample.label:
            n_misclassified += 1
            continue
        try:
            evaluated.append(sample_robustness(head, sample, cfg, method))
        except MetricError:
            evaluated.append(
                SampleRobustness(
                    rho=math.inf,
                    attackability=0.0,
                    per_target_attackability={},
                    rel_pert_norm=math.nan,
                    attack_feasible=False,
                )
            )
        eval_labels.append(sample.label)
    rows = evaluated
    labels = np.array(eval_labels, dtype=np.int64)
    feasible_mask = np.array([r.attack_feasible for r in rows], dtype=bool)
    rhos = np.array([r.rho for r in rows])
    atts = np.array([r.attackability for r in rows])

    n_feasible = int(feasible_mask.sum())
    if n_feasible:
        kept_rho = rhos[feasible_mask]
        mean_att = float(np.mean(atts[feasible_mask]))
        median_rho = float(np.median(kept_rho))
        p95_rho = float(np.percentile(kept_rho, 95))
        q75, q25 = np.percentile(kept_rho, [75, 25])
        iqr_rho = float(q75 - q25)
        mean_sq_rho = float(np.mean(kept_rho**2))
    else:
        mean_att = 0.0
        median_rho = p95_rho = iqr_rho = mean_sq_rho = math.nan

    per_class = {}
    for j in range(dataset.num_classes):
        mask = feasible_mask & (labels == j) if rows else np.array([], dtype=bool)
        if mask.any():
            per_class[j] = float(np.mean(atts[mask]))

    try:
        mean_rel = rel_pert_norm_mean(rows)
    except (MetricError, ParameterError):
        mean_rel = math.nan

    return DatasetRobustness(
        mean_attackability=mean_att,
        per_class_mean=per_class,
        median_rho=median_rho,
        p95_rho=p95_rho,
        iqr_rho=iqr_rho,
        mean_rel_pert_norm=mean_rel,
        n_samples=len(dataset),
        n_feasible=n_feasible,
        sparsity=sparsity_metric([s.concepts for s in dataset.samples]),
        mean_sq_rho=mean_sq_rho,
        n_misclassified=n_misclassified,
    )
