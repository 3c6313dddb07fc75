"""Sweep orchestration over the stability weight, transition detection,
and plot-ready CSV / JSON report emission.

Reports render floats with 17 significant digits so parsing an emitted
file reconstructs the in-memory report exactly.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attacks import AttackConfig
from .core import Dataset, LinearConceptPredictor, LinearHead, sigmoid
from .data import (
    CubIngestConfig,
    SyntheticConfig,
    cub_ingest,
    dataset_load,
    fmt,
    split_dataset,
    synth_generate,
)
from .errors import MetricError, ParameterError
from .metrics import dataset_robustness, sparsity_metric
from .training import (
    LossWeights,
    TrainConfig,
    evaluate_accuracy,
    robustness_bound_report,
    train,
)

DETECTOR_RULE = "max-consecutive-attackability-drop-ratio"
DETECTOR_THRESHOLD = 2.0
_RATIO_FLOOR = 1e-12

SWEEP_CSV_COLUMNS = (
    "lambda_s", "accuracy", "mean_attackability", "mean_rel_pert_norm",
    "sparsity", "stability_loss", "bound_lhs", "bound_rhs", "status",
)
EVAL_CSV_COLUMNS = (
    "lambda_s", "accuracy", "mean_attackability", "mean_rel_pert_norm", "sparsity",
)


@dataclass(frozen=True)
class DatasetSource:
    """Where a sweep gets its data: exactly one of the options below.

    `inline` carries a pre-resolved (train, test) pair, which is how the
    HTTP service receives file- and CUB-backed datasets.
    """

    synthetic: Optional[SyntheticConfig] = None
    path: Optional[str] = None
    cub: Optional[CubIngestConfig] = None
    inline: Optional[tuple[Dataset, Dataset]] = None
    train_fraction: float = 0.8
    split_seed: int = 0

    def __post_init__(self):
        given = sum(x is not None for x in (self.synthetic, self.path, self.cub, self.inline))
        if given != 1:
            raise ParameterError("exactly one dataset source must be given")

    def resolve(self) -> tuple[Dataset, Dataset]:
        if self.synthetic is not None:
            return synth_generate(self.synthetic)
        if self.inline is not None:
            return self.inline
        if self.path is not None:
            return split_dataset(dataset_load(self.path), self.train_fraction, self.split_seed)
        full = cub_ingest(self.cub)
        return split_dataset(full, self.cub.train_fraction, self.split_seed)


@dataclass(frozen=True)
class SweepConfig:
    lambda_grid: tuple[float, ...]
    source: DatasetSource
    train_config: TrainConfig = TrainConfig()
    loss_weights: LossWeights = LossWeights()
    attack_config: AttackConfig = AttackConfig()
    parallel_runs: int = 1

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        if not grid:
            raise ParameterError("lambda_grid must be non-empty")
        if any(not 0.0 <= v <= 1.0 for v in grid):
            raise ParameterError("lambda_grid values must lie in [0, 1]")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ParameterError("lambda_grid must be strictly increasing")
        if self.parallel_runs < 1:
            raise ParameterError("parallel_runs must be >= 1")
        object.__setattr__(self, "lambda_grid", grid)


@dataclass(frozen=True)
class SweepRow:
    lambda_s: float
    accuracy: float
    mean_attackability: float
    mean_rel_pert_norm: float
    sparsity: float
    stability_loss: float
    bound_lhs: float
    bound_rhs: float
    status: str = "ok"


@dataclass(frozen=True)
class DetectionInfo:
    rule: str = DETECTOR_RULE
    threshold: float = DETECTOR_THRESHOLD
    ratios: tuple[tuple[float, float], ...] = ()  # (lambda, drop ratio vs previous row)


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]
    critical_lambda: Optional[float] = None
    detection: DetectionInfo = DetectionInfo()

    def __post_init__(self):
        rows = tuple(self.rows)
        if any(b.lambda_s <= a.lambda_s for a, b in zip(rows, rows[1:])):
            raise ParameterError("sweep rows must be sorted by lambda_s")
        object.__setattr__(self, "rows", rows)


@dataclass(frozen=True)
class EvalReport:
    """Single-model robustness summary; mirrors one sweep row's metric columns."""

    lambda_s: float
    accuracy: float
    mean_attackability: float
    mean_rel_pert_norm: float
    sparsity: float


def evaluate_model(
    head: LinearHead,
    dataset: Dataset,
    cfg: AttackConfig = AttackConfig(),
    predictor: Optional[LinearConceptPredictor] = None,
    lambda_s: float = math.nan,
) -> EvalReport:
    """Accuracy plus dataset robustness for a saved model.

    Sparsity is measured on predicted concepts when a predictor is
    available, otherwise on the ground-truth concepts.
    """
    metrics = dataset_robustness(head, dataset, cfg)
    if predictor is not None and dataset.num_features > 0:
        z = dataset.feature_matrix() @ predictor.weights.T + predictor.bias
        sparsity = float(np.mean(np.abs(sigmoid(z))))
    else:
        sparsity = metrics.sparsity
    return EvalReport(
        lambda_s=lambda_s,
        accuracy=evaluate_accuracy(predictor, head, dataset),
        mean_attackability=metrics.mean_attackability,
        mean_rel_pert_norm=metrics.mean_rel_pert_norm,
        sparsity=sparsity,
    )


def _run_single(cfg: SweepConfig, d_train: Dataset, d_test: Dataset, lam: float) -> SweepRow:
    weights = replace(cfg.loss_weights, lambda_s_max=lam)
    try:
        predictor, head, log = train(d_train, d_test, weights, cfg.train_config, cfg.attack_config)
        metrics = dataset_robustness(head, d_test, cfg.attack_config)
        bound = robustness_bound_report(log, weights, metrics)
        summary = evaluate_model(head, d_test, cfg.attack_config, predictor, lam)
        return SweepRow(
            lambda_s=lam,
            accuracy=summary.accuracy,
            mean_attackability=metrics.mean_attackability,
            mean_rel_pert_norm=metrics.mean_rel_pert_norm,
            sparsity=summary.sparsity,
            stability_loss=log.final().stability_loss,
            bound_lhs=bound.lhs,
            bound_rhs=bound.rhs,
            status="ok",
        )
    except Exception as exc:  # noqa: BLE001 - a failed run becomes an error row
        nan = math.nan
        return SweepRow(lam, nan, nan, nan, nan, nan, nan, nan,
                        status=f"error: {type(exc).__name__}: {exc}")


def run_sweep(cfg: SweepConfig) -> SweepReport:
    """Train and evaluate one model per grid value.

    Every run reuses the same seed and data so rows differ only in the
    stability weight; runs are independent, so parallel execution yields
    byte-identical reports to serial execution.
    """
    d_train, d_test = cfg.source.resolve()
    if cfg.parallel_runs == 1 or len(cfg.lambda_grid) == 1:
        rows = [_run_single(cfg, d_train, d_test, lam) for lam in cfg.lambda_grid]
    else:
        with ThreadPoolExecutor(max_workers=cfg.parallel_runs) as pool:
            rows = list(pool.map(lambda lam: _run_single(cfg, d_train, d_test, lam),
                                 cfg.lambda_grid))
    report = SweepReport(rows=tuple(rows))
    try:
        critical, info = _detect(report)
    except MetricError:
        critical, info = None, DetectionInfo()
    return SweepReport(rows=report.rows, critical_lambda=critical, detection=info)


def _detect(report: SweepReport) -> tuple[Optional[float], DetectionInfo]:
    finite = [
        (row.lambda_s, row.mean_attackability)
        for row in report.rows
        if math.isfinite(row.mean_attackability)
    ]
    if len(finite) < 2:
        raise MetricError("need at least two rows with finite attackability")
    ratios = []
    for (_, prev_att), (lam, att) in zip(finite, finite[1:]):
        ratios.append((lam, prev_att / max(att, _RATIO_FLOOR)))
    best_lambda, best_ratio = max(ratios, key=lambda item: item[1])
    critical = best_lambda if best_ratio >= DETECTOR_THRESHOLD else None
    return critical, DetectionInfo(ratios=tuple(ratios))


def detect_phase_transition(report: SweepReport) -> Optional[float]:
    """Grid value with the largest consecutive attackability drop ratio.

    Returns None ("none detected") when no consecutive drop reaches the
    factor-2 threshold; raises when fewer than two rows have finite
    attackability.
    """
    critical, _ = _detect(report)
    return critical


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def _csv_cell(v) -> str:
    if isinstance(v, str):
        return v.replace(",", ";").replace("\n", " ")
    return fmt(v)


def sweep_report_to_csv(report: SweepReport) -> str:
    lines = [
        "# sweep-report v1",
        f"# detector: {report.detection.rule} threshold={fmt(report.detection.threshold)}",
        "# critical_lambda: "
        + ("none" if report.critical_lambda is None else fmt(report.critical_lambda)),
    ]
    for lam, ratio in report.detection.ratios:
        lines.append(f"# drop_ratio: {fmt(lam)} {fmt(ratio)}")
    lines.append(",".join(SWEEP_CSV_COLUMNS))
    for row in report.rows:
        lines.append(",".join(_csv_cell(getattr(row, col)) for col in SWEEP_CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def sweep_report_from_csv(text: str) -> SweepReport:
    critical: Optional[float] = None
    rule, threshold = DETECTOR_RULE, DETECTOR_THRESHOLD
    ratios: list[tuple[float, float]] = []
    rows: list[SweepRow] = []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("critical_lambda:"):
                value = body.partition(":")[2].strip()
                critical = None if value == "none" else float(value)
            elif body.startswith("detector:"):
                spec_text = body.partition(":")[2].strip()
                rule, _, thr = spec_text.rpartition(" threshold=")
                threshold = float(thr)
            elif body.startswith("drop_ratio:"):
                lam_text, ratio_text = body.partition(":")[2].split()
                ratios.append((float(lam_text), float(ratio_text)))
            continue
        if not header_seen:
            if tuple(line.split(",")) != SWEEP_CSV_COLUMNS:
                raise ParameterError(f"line {lineno}: unexpected sweep CSV header")
            header_seen = True
            continue
        cells = line.split(",")
        if len(cells) != len(SWEEP_CSV_COLUMNS):
            raise ParameterError(f"line {lineno}: expected {len(SWEEP_CSV_COLUMNS)} cells")
        rows.append(SweepRow(
            lambda_s=float(cells[0]), accuracy=float(cells[1]),
            mean_attackability=float(cells[2]), mean_rel_pert_norm=float(cells[3]),
            sparsity=float(cells[4]), stability_loss=float(cells[5]),
            bound_lhs=float(cells[6]), bound_rhs=float(cells[7]), status=cells[8],
        ))
    if not header_seen:
        raise ParameterError("missing sweep CSV header row")
    return SweepReport(
        rows=tuple(rows), critical_lambda=critical,
        detection=DetectionInfo(rule=rule, threshold=threshold, ratios=tuple(ratios)),
    )


def _nan_to_none(v: float) -> Optional[float]:
    return None if isinstance(v, float) and math.isnan(v) else v


def _none_to_nan(v) -> float:
    return math.nan if v is None else float(v)


def sweep_report_to_dict(report: SweepReport) -> dict:
    return {
        "kind": "sweep-report",
        "version": 1,
        "critical_lambda": report.critical_lambda,
        "detection": {
            "rule": report.detection.rule,
            "threshold": report.detection.threshold,
            "ratios": [[lam, ratio] for lam, ratio in report.detection.ratios],
        },
        "rows": [
            {
                "lambda_s": row.lambda_s,
                "accuracy": _nan_to_none(row.accuracy),
                "mean_attackability": _nan_to_none(row.mean_attackability),
                "mean_rel_pert_norm": _nan_to_none(row.mean_rel_pert_norm),
                "sparsity": _nan_to_none(row.sparsity),
                "stability_loss": _nan_to_none(row.stability_loss),
                "bound_lhs": _nan_to_none(row.bound_lhs),
                "bound_rhs": _nan_to_none(row.bound_rhs),
                "status": row.status,
            }
            for row in report.rows
        ],
    }


def sweep_report_from_dict(payload: dict) -> SweepReport:
    rows = tuple(
        SweepRow(
            lambda_s=float(r["lambda_s"]),
            accuracy=_none_to_nan(r["accuracy"]),
            mean_attackability=_none_to_nan(r["mean_attackability"]),
            mean_rel_pert_norm=_none_to_nan(r["mean_rel_pert_norm"]),
            sparsity=_none_to_nan(r["sparsity"]),
            stability_loss=_none_to_nan(r["stability_loss"]),
            bound_lhs=_none_to_nan(r["bound_lhs"]),
            bound_rhs=_none_to_nan(r["bound_rhs"]),
            status=r["status"],
        )
        for r in payload["rows"]
    )
    det = payload.get("detection", {})
    return SweepReport(
        rows=rows,
        critical_lambda=payload.get("critical_lambda"),
        detection=DetectionInfo(
            rule=det.get("rule", DETECTOR_RULE),
            threshold=det.get("threshold", DETECTOR_THRESHOLD),
            ratios=tuple((float(a), float(b)) for a, b in det.get("ratios", [])),
        ),
    )


def sweep_report_to_json(report: SweepReport) -> str:
    return json.dumps(sweep_report_to_dict(report), indent=2) + "\n"


def sweep_report_from_json(text: str) -> SweepReport:
    return sweep_report_from_dict(json.loads(text))


def eval_report_to_csv(report: EvalReport) -> str:
    lines = [
        "# eval-report v1",
        ",".join(EVAL_CSV_COLUMNS),
        ",".join(fmt(getattr(report, col)) for col in EVAL_CSV_COLUMNS),
    ]
    return "\n".join(lines) + "\n"


def eval_report_from_csv(text: str) -> EvalReport:
    rows = [
        line.strip() for line in text.splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]
    if len(rows) != 2 or tuple(rows[0].split(",")) != EVAL_CSV_COLUMNS:
        raise ParameterError("not an eval-report CSV")
    cells = [float(v) for v in rows[1].split(",")]
    return EvalReport(*cells)


def eval_report_to_dict(report: EvalReport) -> dict:
    return {
        "kind": "eval-report",
        "version": 1,
        "lambda_s": _nan_to_none(report.lambda_s),
        "accuracy": report.accuracy,
        "mean_attackability": _nan_to_none(report.mean_attackability),
        "mean_rel_pert_norm": _nan_to_none(report.mean_rel_pert_norm),
        "sparsity": report.sparsity,
    }


def eval_report_from_dict(payload: dict) -> EvalReport:
    return EvalReport(
        lambda_s=_none_to_nan(payload["lambda_s"]),
        accuracy=float(payload["accuracy"]),
        mean_attackability=_none_to_nan(payload["mean_attackability"]),
        mean_rel_pert_norm=_none_to_nan(payload["mean_rel_pert_norm"]),
        sparsity=float(payload["sparsity"]),
    )
