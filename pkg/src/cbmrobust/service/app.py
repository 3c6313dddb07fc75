"""HTTP surface over the core operations.

Every endpoint is a stateless compute call: models and datasets travel in
the request body, results in the response. Domain errors map to 400 with
the message in `detail`.
"""
from __future__ import annotations

import math

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..attacks import apply_perturbation, targeted_attack, untargeted_min_attack
from ..data import synth_generate
from ..errors import (
    DataFormatError,
    DegenerateDirectionError,
    IngestError,
    MetricError,
    NonFiniteError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from ..harness import (
    DetectionInfo,
    SweepReport,
    SweepRow,
    _detect,
    evaluate_model,
    run_sweep,
)
from ..metrics import dataset_robustness
from ..training import train
from ..transfer import transfer_suite
from . import schemas

_DOMAIN_ERRORS = (
    ParameterError,
    ShapeError,
    NonFiniteError,
    DataFormatError,
    DegenerateDirectionError,
    MetricError,
    IngestError,
    TrainingDivergedError,
    ValueError,
)


def create_app() -> FastAPI:
    app = FastAPI(title="cbmrobust service", version=__version__)

    @app.exception_handler(Exception)
    async def _domain_error_handler(request: Request, exc: Exception):
        if isinstance(exc, _DOMAIN_ERRORS):
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        raise exc

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/attack", response_model=schemas.AttackResponse)
    def attack(req: schemas.AttackRequest):
        head = req.head.to_core()
        cfg = req.settings.to_core()
        if req.target is None:
            result = untargeted_min_attack(head, req.concepts, req.label, cfg,
                                           method=req.settings.method)
        else:
            result = targeted_attack(head, req.concepts, req.label, req.target, cfg,
                                     method=req.settings.method)
        perturbed = apply_perturbation(req.concepts, result.delta, clamp=cfg.clamp_concepts)
        return schemas.AttackResponse.from_core(result, perturbed)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_model(req: schemas.EvalRequest):
        head = req.head.to_core()
        dataset = req.dataset.to_core()
        predictor = req.predictor.to_core() if req.predictor is not None else None
        cfg = req.settings.to_core()
        metrics = dataset_robustness(head, dataset, cfg, method=req.settings.method)
        summary = evaluate_model(head, dataset, cfg, predictor,
                                 schemas.nan_if_none(req.lambda_s))
        return schemas.EvalResponse(
            lambda_s=req.lambda_s,
            accuracy=summary.accuracy,
            mean_attackability=summary.mean_attackability,
            mean_rel_pert_norm=schemas.none_if_nan(summary.mean_rel_pert_norm),
            sparsity=summary.sparsity,
            robustness=schemas.RobustnessModel.from_core(metrics),
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train_model(req: schemas.TrainRequest):
        predictor, head, log = train(
            req.train.to_core(),
            req.val.to_core(),
            req.loss_weights.to_core(),
            req.train_config.to_core(),
            req.settings.to_core(),
        )
        return schemas.TrainResponse(
            head=schemas.HeadModel.from_core(head),
            predictor=(
                schemas.PredictorModel.from_core(predictor) if predictor is not None else None
            ),
            lambda_s=req.loss_weights.lambda_s_max,
            log=[schemas.EpochRowModel.from_core(row) for row in log.rows],
        )

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SyntheticConfigModel):
        d_train, d_test = synth_generate(req.to_core())
        return schemas.SynthResponse(
            train=schemas.DatasetModel.from_core(d_train),
            test=schemas.DatasetModel.from_core(d_test),
        )

    @app.post("/sweep", response_model=schemas.SweepResponse)
    def sweep(req: schemas.SweepRequest):
        return schemas.SweepResponse.from_core(run_sweep(req.to_core()))

    @app.post("/detect-transition", response_model=schemas.DetectResponse)
    def detect(req: schemas.DetectRequest):
        if len(req.lambda_grid) != len(req.attackability):
            raise ParameterError("lambda_grid and attackability lengths differ")
        nan = math.nan
        rows = tuple(
            SweepRow(lam, nan, att, nan, nan, nan, nan, nan, "ok")
            for lam, att in zip(req.lambda_grid, req.attackability)
        )
        report = SweepReport(rows=rows, detection=DetectionInfo())
        critical, info = _detect(report)
        return schemas.DetectResponse(critical_lambda=critical, ratios=list(info.ratios))

    @app.post("/transfer", response_model=schemas.TransferResponse)
    def transfer(req: schemas.TransferRequest):
        report = transfer_suite(
            req.predictor.to_core(), req.trials, req.pairs, req.seed,
            tol=req.tol, max_iters=req.max_iters,
        )
        return schemas.TransferResponse.from_core(report)

    return app


app = create_app()
