"""Pydantic request/response models and converters to the core dataclasses.

JSON cannot carry NaN (the response encoder rejects it), so undefined
metric values travel as null and the converters map them back to NaN.
"""
from __future__ import annotations

import math
from typing import Optional

from pydantic import BaseModel, Field

from .. import harness
from ..attacks import AttackConfig, AttackResult
from ..core import ConceptVector, Dataset, LabeledSample, LinearConceptPredictor, LinearHead
from ..data import SyntheticConfig
from ..metrics import DatasetRobustness
from ..training import LossWeights, TrainConfig, TrainEpochRow
from ..transfer import TransferReport


def none_if_nan(v: float) -> Optional[float]:
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def nan_if_none(v: Optional[float]) -> float:
    return math.nan if v is None else float(v)


class HeadModel(BaseModel):
    weights: list[list[float]]
    bias: list[float]
    class_names: Optional[list[str]] = None

    def to_core(self) -> LinearHead:
        names = tuple(self.class_names) if self.class_names is not None else None
        return LinearHead(weights=self.weights, bias=self.bias, class_names=names)

    @classmethod
    def from_core(cls, head: LinearHead) -> "HeadModel":
        return cls(
            weights=head.weights.tolist(),
            bias=head.bias.tolist(),
            class_names=list(head.class_names) if head.class_names else None,
        )


class PredictorModel(BaseModel):
    weights: list[list[float]]
    bias: list[float]

    def to_core(self) -> LinearConceptPredictor:
        return LinearConceptPredictor(weights=self.weights, bias=self.bias)

    @classmethod
    def from_core(cls, p: LinearConceptPredictor) -> "PredictorModel":
        return cls(weights=p.weights.tolist(), bias=p.bias.tolist())


class SampleModel(BaseModel):
    label: int
    concepts: list[float]
    features: Optional[list[float]] = None


class DatasetModel(BaseModel):
    num_concepts: int
    num_classes: int
    num_features: int = 0
    provenance: str = "file"
    samples: list[SampleModel]

    def to_core(self) -> Dataset:
        return Dataset(
            samples=tuple(
                LabeledSample(
                    concepts=ConceptVector(s.concepts),
                    label=s.label,
                    features=s.features if s.features is not None else None,
                )
                for s in self.samples
            ),
            num_concepts=self.num_concepts,
            num_classes=self.num_classes,
            num_features=self.num_features,
            provenance=self.provenance,
        )

    @classmethod
    def from_core(cls, d: Dataset) -> "DatasetModel":
        return cls(
            num_concepts=d.num_concepts,
            num_classes=d.num_classes,
            num_features=d.num_features,
            provenance=d.provenance,
            samples=[
                SampleModel(
                    label=s.label,
                    concepts=s.concepts.values.tolist(),
                    features=s.features.tolist() if s.features is not None else None,
                )
                for s in d.samples
            ],
        )


class AttackSettings(BaseModel):
    epsilon: float = 1e-3
    max_relin_iters: int = 20
    clamp_concepts: bool = False
    method: str = "multi"

    def to_core(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon,
            max_relin_iters=self.max_relin_iters,
            clamp_concepts=self.clamp_concepts,
        )


class AttackRequest(BaseModel):
    head: HeadModel
    concepts: list[float]
    label: int
    target: Optional[int] = None  # omitted -> untargeted minimal-norm attack
    settings: AttackSettings = AttackSettings()


class AttackResponse(BaseModel):
    delta: list[float]
    norm: float
    target: int
    success: bool
    margins: list[float]
    method: str
    perturbed: list[float]
    clamped: bool

    @classmethod
    def from_core(cls, res: AttackResult, perturbed: ConceptVector) -> "AttackResponse":
        return cls(
            delta=res.delta.tolist(),
            norm=res.norm,
            target=res.target,
            success=res.success,
            margins=res.margins.tolist(),
            method=res.method,
            perturbed=perturbed.values.tolist(),
            clamped=perturbed.clamped,
        )


class RobustnessModel(BaseModel):
    mean_attackability: float
    per_class_mean: dict[int, float]
    median_rho: Optional[float]
    p95_rho: Optional[float]
    iqr_rho: Optional[float]
    mean_rel_pert_norm: Optional[float]
    n_samples: int
    n_feasible: int
    n_misclassified: int
    sparsity: float
    mean_sq_rho: Optional[float]

    @classmethod
    def from_core(cls, m: DatasetRobustness) -> "RobustnessModel":
        return cls(
            mean_attackability=m.mean_attackability,
            per_class_mean=m.per_class_mean,
            median_rho=none_if_nan(m.median_rho),
            p95_rho=none_if_nan(m.p95_rho),
            iqr_rho=none_if_nan(m.iqr_rho),
            mean_rel_pert_norm=none_if_nan(m.mean_rel_pert_norm),
            n_samples=m.n_samples,
            n_feasible=m.n_feasible,
            n_misclassified=m.n_misclassified,
            sparsity=m.sparsity,
            mean_sq_rho=none_if_nan(m.mean_sq_rho),
        )


class EvalRequest(BaseModel):
    head: HeadModel
    dataset: DatasetModel
    predictor: Optional[PredictorModel] = None
    lambda_s: Optional[float] = None
    settings: AttackSettings = AttackSettings()


class EvalResponse(BaseModel):
    lambda_s: Optional[float]
    accuracy: float
    mean_attackability: float
    mean_rel_pert_norm: Optional[float]
    sparsity: float
    robustness: RobustnessModel

    def to_report(self) -> harness.EvalReport:
        return harness.EvalReport(
            lambda_s=nan_if_none(self.lambda_s),
            accuracy=self.accuracy,
            mean_attackability=self.mean_attackability,
            mean_rel_pert_norm=nan_if_none(self.mean_rel_pert_norm),
            sparsity=self.sparsity,
        )


class LossWeightsModel(BaseModel):
    lambda_c: float = 1.0
    lambda_y: float = 1.0
    lambda_s_max: float = 0.0
    lambda_r: float = 0.0
    warmup_epochs: int = 5

    def to_core(self) -> LossWeights:
        return LossWeights(**self.model_dump())


class TrainConfigModel(BaseModel):
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    target_class_rule: str = "true_runner_up"
    fixed_target: Optional[int] = None
    lr_schedule: str = "constant"
    optimizer: str = "adam"

    def to_core(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class EpochRowModel(BaseModel):
    epoch: int
    concept_loss: float
    class_loss: float
    stability_loss: float
    total_loss: float
    stability_weight: float
    val_accuracy: float
    val_mean_attackability: Optional[float]

    @classmethod
    def from_core(cls, row: TrainEpochRow) -> "EpochRowModel":
        return cls(
            epoch=row.epoch,
            concept_loss=row.concept_loss,
            class_loss=row.class_loss,
            stability_loss=row.stability_loss,
            total_loss=row.total_loss,
            stability_weight=row.stability_weight,
            val_accuracy=row.val_accuracy,
            val_mean_attackability=none_if_nan(row.val_mean_attackability),
        )


class TrainRequest(BaseModel):
    train: DatasetModel
    val: DatasetModel
    loss_weights: LossWeightsModel = LossWeightsModel()
    train_config: TrainConfigModel = TrainConfigModel()
    settings: AttackSettings = AttackSettings()


class TrainResponse(BaseModel):
    head: HeadModel
    predictor: Optional[PredictorModel]
    lambda_s: float
    log: list[EpochRowModel]


class SyntheticConfigModel(BaseModel):
    num_concepts: int = 20
    num_classes: int = 5
    num_features: int = 32
    n_per_class: int = 100
    sharpness: float = 0.9
    feature_noise_std: float = 0.05
    seed: int = 0
    train_fraction: float = 0.8

    def to_core(self) -> SyntheticConfig:
        return SyntheticConfig(**self.model_dump())


class SynthResponse(BaseModel):
    train: DatasetModel
    test: DatasetModel


class InlineSourceModel(BaseModel):
    train: DatasetModel
    test: DatasetModel


class SweepSourceModel(BaseModel):
    synthetic: Optional[SyntheticConfigModel] = None
    inline: Optional[InlineSourceModel] = None


class SweepRequest(BaseModel):
    lambda_grid: list[float]
    source: SweepSourceModel
    train_config: TrainConfigModel = TrainConfigModel()
    loss_weights: LossWeightsModel = LossWeightsModel()
    settings: AttackSettings = AttackSettings()
    parallel_runs: int = 1

    def to_core(self) -> harness.SweepConfig:
        if self.source.synthetic is not None:
            source = harness.DatasetSource(synthetic=self.source.synthetic.to_core())
        elif self.source.inline is not None:
            source = harness.DatasetSource(
                inline=(self.source.inline.train.to_core(), self.source.inline.test.to_core())
            )
        else:
            raise ValueError("sweep source must give 'synthetic' or 'inline'")
        return harness.SweepConfig(
            lambda_grid=tuple(self.lambda_grid),
            source=source,
            train_config=self.train_config.to_core(),
            loss_weights=self.loss_weights.to_core(),
            attack_config=self.settings.to_core(),
            parallel_runs=self.parallel_runs,
        )


class SweepRowModel(BaseModel):
    lambda_s: float
    accuracy: Optional[float]
    mean_attackability: Optional[float]
    mean_rel_pert_norm: Optional[float]
    sparsity: Optional[float]
    stability_loss: Optional[float]
    bound_lhs: Optional[float]
    bound_rhs: Optional[float]
    status: str


class DetectionModel(BaseModel):
    rule: str
    threshold: float
    ratios: list[tuple[float, float]]


class SweepResponse(BaseModel):
    rows: list[SweepRowModel]
    critical_lambda: Optional[float]
    detection: DetectionModel

    @classmethod
    def from_core(cls, report: harness.SweepReport) -> "SweepResponse":
        return cls(
            rows=[
                SweepRowModel(
                    lambda_s=r.lambda_s,
                    accuracy=none_if_nan(r.accuracy),
                    mean_attackability=none_if_nan(r.mean_attackability),
                    mean_rel_pert_norm=none_if_nan(r.mean_rel_pert_norm),
                    sparsity=none_if_nan(r.sparsity),
                    stability_loss=none_if_nan(r.stability_loss),
                    bound_lhs=none_if_nan(r.bound_lhs),
                    bound_rhs=none_if_nan(r.bound_rhs),
                    status=r.status,
                )
                for r in report.rows
            ],
            critical_lambda=report.critical_lambda,
            detection=DetectionModel(
                rule=report.detection.rule,
                threshold=report.detection.threshold,
                ratios=list(report.detection.ratios),
            ),
        )

    def to_core(self) -> harness.SweepReport:
        return harness.SweepReport(
            rows=tuple(
                harness.SweepRow(
                    lambda_s=r.lambda_s,
                    accuracy=nan_if_none(r.accuracy),
                    mean_attackability=nan_if_none(r.mean_attackability),
                    mean_rel_pert_norm=nan_if_none(r.mean_rel_pert_norm),
                    sparsity=nan_if_none(r.sparsity),
                    stability_loss=nan_if_none(r.stability_loss),
                    bound_lhs=nan_if_none(r.bound_lhs),
                    bound_rhs=nan_if_none(r.bound_rhs),
                    status=r.status,
                )
                for r in self.rows
            ),
            critical_lambda=self.critical_lambda,
            detection=harness.DetectionInfo(
                rule=self.detection.rule,
                threshold=self.detection.threshold,
                ratios=tuple(tuple(pair) for pair in self.detection.ratios),
            ),
        )


class DetectRequest(BaseModel):
    lambda_grid: list[float]
    attackability: list[float]


class DetectResponse(BaseModel):
    critical_lambda: Optional[float]
    ratios: list[tuple[float, float]]


class TransferRequest(BaseModel):
    predictor: PredictorModel
    trials: int = 100
    pairs: int = 50
    seed: int = 0
    tol: float = 1e-6
    max_iters: int = 400


class TransferTrialModel(BaseModel):
    dc_norm: float
    dx_norm: Optional[float]
    bound_rhs: Optional[float]
    prop1_ok: bool


class Thm1PairModel(BaseModel):
    dx_diff: Optional[float]
    dc_diff_over_l: Optional[float]
    consistent: bool


class TransferResponse(BaseModel):
    lipschitz_bound: float
    lipschitz_empirical: float
    trials: list[TransferTrialModel]
    thm1_pairs: list[Thm1PairModel]

    @classmethod
    def from_core(cls, report: TransferReport) -> "TransferResponse":
        return cls(
            lipschitz_bound=report.lipschitz_bound,
            lipschitz_empirical=report.lipschitz_empirical,
            trials=[
                TransferTrialModel(
                    dc_norm=t.dc_norm,
                    dx_norm=none_if_nan(t.dx_norm),
                    bound_rhs=none_if_nan(t.bound_rhs),
                    prop1_ok=t.prop1_ok,
                )
                for t in report.trials
            ],
            thm1_pairs=[
                Thm1PairModel(
                    dx_diff=none_if_nan(pr.dx_diff),
                    dc_diff_over_l=none_if_nan(pr.dc_diff_over_l),
                    consistent=pr.consistent,
                )
                for pr in report.thm1_pairs
            ],
        )
