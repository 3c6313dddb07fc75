"""Command-line client.

All numerical work happens behind the HTTP service; the CLI reads and
writes local files, turns them into JSON payloads, and renders responses.
By default the service app is mounted in-process, so no server needs to
be running; pass --server-url to talk to a remote instance instead.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, errors
from .data import (
    DEFAULT_CUB_CLASS_IDS,
    CubIngestConfig,
    cub_ingest,
    dataset_load,
    dataset_save,
    fmt,
    model_load,
    model_save,
    split_dataset,
)
from .harness import (
    DatasetSource,
    eval_report_to_csv,
    eval_report_to_dict,
    sweep_report_to_csv,
    sweep_report_to_json,
)
from .service import schemas

_RUNTIME_ERRORS = (
    errors.ShapeError,
    errors.NonFiniteError,
    errors.ParameterError,
    errors.DegenerateDirectionError,
    errors.MetricError,
    errors.DataFormatError,
    errors.IngestError,
    errors.TrainingDivergedError,
    OSError,
    ValueError,
    KeyError,
)


class UsageError(Exception):
    pass


class ServiceError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class ServiceClient:
    """POSTs JSON to a remote server or to the in-process app."""

    def __init__(self, server_url: Optional[str] = None):
        self._server_url = server_url
        self._client = None
        if server_url:
            import httpx

            self._client = httpx.Client(base_url=server_url, timeout=600.0)

    def _post_in_process(self, path: str, payload: dict):
        import asyncio

        import httpx

        from .service.app import app

        async def go():
            transport = httpx.ASGITransport(app=app, raise_app_exceptions=False)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://cbmrobust.local", timeout=600.0
            ) as client:
                return await client.post(path, json=payload)

        return asyncio.run(go())

    def post(self, path: str, payload: dict) -> dict:
        if self._client is not None:
            response = self._client.post(path, json=payload)
        else:
            response = self._post_in_process(path, payload)
        if response.status_code != 200:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise ServiceError(f"{path} failed ({response.status_code}): {detail}")
        return response.json()

    def close(self):
        if self._client is not None:
            self._client.close()


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise errors.DataFormatError(f"config {path}: invalid JSON ({exc})") from exc


def _apply_seed(section: dict, seed: Optional[int]) -> dict:
    if seed is not None:
        section = dict(section)
        section["seed"] = seed
    return section


def _write_output(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _kv_csv(payload: dict) -> str:
    lines = []
    for key, value in payload.items():
        if isinstance(value, list):
            value = " ".join(fmt(v) for v in value)
        elif isinstance(value, float):
            value = fmt(value)
        lines.append(f"{key},{value}")
    return "\n".join(lines) + "\n"


def _source_from_config(config: dict) -> DatasetSource:
    spec = config.get("dataset")
    if not isinstance(spec, dict):
        raise errors.ParameterError("config needs a 'dataset' object (synthetic | path | cub)")
    split_seed = int(spec.get("split_seed", 0))
    if "synthetic" in spec:
        return DatasetSource(
            synthetic=schemas.SyntheticConfigModel(**spec["synthetic"]).to_core()
        )
    if "path" in spec:
        return DatasetSource(
            path=spec["path"],
            train_fraction=float(spec.get("train_fraction", 0.8)),
            split_seed=split_seed,
        )
    if "cub" in spec:
        return DatasetSource(cub=CubIngestConfig(**spec["cub"]), split_seed=split_seed)
    raise errors.ParameterError("dataset source must give 'synthetic', 'path' or 'cub'")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args, config: dict, client: ServiceClient) -> int:
    section = config.get("synthetic") or config.get("dataset", {}).get("synthetic", {})
    section = _apply_seed(section, args.seed)
    payload = schemas.SyntheticConfigModel(**section).model_dump()
    resp = client.post("/synth", payload)
    out = args.out or "synthetic"
    for split in ("train", "test"):
        dataset = schemas.DatasetModel.model_validate(resp[split]).to_core()
        path = f"{out}.{split}.txt"
        dataset_save(path, dataset)
        print(f"wrote {len(dataset)} samples to {path}")
    return 0


def _cmd_ingest_cub(args, config: dict, client: ServiceClient) -> int:
    class_ids = (
        tuple(int(v) for v in args.classes.split(","))
        if args.classes
        else DEFAULT_CUB_CLASS_IDS
    )
    cfg = CubIngestConfig(
        root_path=args.root, class_ids=class_ids, train_fraction=args.train_fraction
    )
    dataset = cub_ingest(cfg)
    out = args.out or "cub_dataset.txt"
    dataset_save(out, dataset)
    print(f"wrote {len(dataset)} samples ({dataset.num_classes} classes) to {out}")
    return 0


def _train_payload(args, config: dict) -> dict:
    d_full = dataset_load(args.data)
    if args.val:
        d_train, d_val = d_full, dataset_load(args.val)
    else:
        d_train, d_val = split_dataset(d_full, 1.0 - args.val_fraction, args.split_seed)
    return {
        "train": schemas.DatasetModel.from_core(d_train).model_dump(),
        "val": schemas.DatasetModel.from_core(d_val).model_dump(),
        "loss_weights": schemas.LossWeightsModel(**config.get("loss_weights", {})).model_dump(),
        "train_config": schemas.TrainConfigModel(
            **_apply_seed(config.get("train_config", {}), args.seed)
        ).model_dump(),
        "settings": schemas.AttackSettings(**config.get("attack", {})).model_dump(),
    }


def _cmd_train(args, config: dict, client: ServiceClient) -> int:
    resp = client.post("/train", _train_payload(args, config))
    head = schemas.HeadModel.model_validate(resp["head"]).to_core()
    predictor = (
        schemas.PredictorModel.model_validate(resp["predictor"]).to_core()
        if resp.get("predictor") is not None
        else None
    )
    out = args.out or "model.txt"
    model_save(out, head, predictor, lambda_s=resp["lambda_s"])
    final = resp["log"][-1]
    print(
        f"wrote checkpoint to {out} "
        f"(val accuracy {final['val_accuracy']:.4f}, "
        f"total loss {final['total_loss']:.4f})"
    )
    if args.log_out:
        cols = (
            "epoch", "concept_loss", "class_loss", "stability_loss",
            "total_loss", "stability_weight", "val_accuracy", "val_mean_attackability",
        )
        lines = ["# train-log v1", ",".join(cols)]
        for row in resp["log"]:
            cells = []
            for col in cols:
                v = row[col]
                cells.append(str(v) if col == "epoch" else fmt(math.nan if v is None else v))
            lines.append(",".join(cells))
        Path(args.log_out).write_text("\n".join(lines) + "\n")
        print(f"wrote training log to {args.log_out}")
    return 0


def _cmd_attack(args, config: dict, client: ServiceClient) -> int:
    head, _, _ = model_load(args.model)
    dataset = dataset_load(args.data)
    if not 0 <= args.index < len(dataset):
        raise errors.ParameterError(f"sample index {args.index} out of range")
    sample = dataset.samples[args.index]
    settings = schemas.AttackSettings(**config.get("attack", {}))
    if args.epsilon is not None:
        settings = settings.model_copy(update={"epsilon": args.epsilon})
    payload = {
        "head": schemas.HeadModel.from_core(head).model_dump(),
        "concepts": sample.concepts.values.tolist(),
        "label": sample.label,
        "target": args.target,
        "settings": settings.model_dump(),
    }
    resp = client.post("/attack", payload)
    if args.format == "csv":
        _write_output(_kv_csv(resp), args.out)
    else:
        _write_output(json.dumps(resp, indent=2) + "\n", args.out)
    return 0


def _cmd_eval(args, config: dict, client: ServiceClient) -> int:
    head, predictor, lambda_s = model_load(args.model)
    dataset = dataset_load(args.data)
    payload = {
        "head": schemas.HeadModel.from_core(head).model_dump(),
        "dataset": schemas.DatasetModel.from_core(dataset).model_dump(),
        "predictor": (
            schemas.PredictorModel.from_core(predictor).model_dump()
            if predictor is not None
            else None
        ),
        "lambda_s": lambda_s,
        "settings": schemas.AttackSettings(**config.get("attack", {})).model_dump(),
    }
    resp = client.post("/eval", payload)
    if args.format == "csv":
        report = schemas.EvalResponse.model_validate(resp).to_report()
        _write_output(eval_report_to_csv(report), args.out)
    else:
        _write_output(json.dumps(resp, indent=2) + "\n", args.out)
    return 0


def _cmd_sweep(args, config: dict, client: ServiceClient) -> int:
    if "lambda_grid" not in config:
        raise errors.ParameterError("sweep config needs 'lambda_grid'")
    source = _source_from_config(config)
    if source.synthetic is not None:
        source_payload = {
            "synthetic": schemas.SyntheticConfigModel(
                **_apply_seed(config["dataset"]["synthetic"], args.seed)
            ).model_dump()
        }
    else:
        d_train, d_test = source.resolve()
        source_payload = {
            "inline": {
                "train": schemas.DatasetModel.from_core(d_train).model_dump(),
                "test": schemas.DatasetModel.from_core(d_test).model_dump(),
            }
        }
    payload = {
        "lambda_grid": config["lambda_grid"],
        "source": source_payload,
        "train_config": schemas.TrainConfigModel(
            **_apply_seed(config.get("train_config", {}), args.seed)
        ).model_dump(),
        "loss_weights": schemas.LossWeightsModel(**config.get("loss_weights", {})).model_dump(),
        "settings": schemas.AttackSettings(**config.get("attack", {})).model_dump(),
        "parallel_runs": int(config.get("parallel_runs", 1)),
    }
    resp = client.post("/sweep", payload)
    report = schemas.SweepResponse.model_validate(resp).to_core()
    text = sweep_report_to_csv(report) if args.format == "csv" else sweep_report_to_json(report)
    _write_output(text, args.out)
    failed = [row for row in report.rows if row.status != "ok"]
    if failed:
        for row in failed:
            print(f"lambda_s={row.lambda_s}: {row.status}", file=sys.stderr)
        return 2
    return 0


def _cmd_transfer(args, config: dict, client: ServiceClient) -> int:
    section = config.get("transfer", {})
    if args.model:
        _, predictor, _ = model_load(args.model)
        if predictor is None:
            raise errors.ParameterError(f"checkpoint {args.model} has no concept predictor")
    else:
        seed = args.seed if args.seed is not None else int(section.get("seed", 0))
        rng = np.random.default_rng(seed)
        k, d = args.concepts, args.features
        predictor_w = rng.normal(0.0, 1.0 / math.sqrt(d), size=(k, d))
        predictor = schemas.PredictorModel(
            weights=predictor_w.tolist(), bias=[0.0] * k
        ).to_core()
    payload = {
        "predictor": schemas.PredictorModel.from_core(predictor).model_dump(),
        "trials": args.trials or int(section.get("trials", 100)),
        "pairs": args.pairs or int(section.get("pairs", 50)),
        "seed": args.seed if args.seed is not None else int(section.get("seed", 0)),
        "tol": float(section.get("tol", 1e-6)),
        "max_iters": int(section.get("max_iters", 400)),
    }
    resp = client.post("/transfer", payload)
    trials = resp["trials"]
    converged = [t for t in trials if t["dx_norm"] is not None]
    ok = sum(t["prop1_ok"] for t in converged)
    consistent = sum(p["consistent"] for p in resp["thm1_pairs"])
    print(
        f"lower-bound trials: {ok}/{len(converged)} passed "
        f"({len(trials) - len(converged)} not converged); "
        f"monotone pairs consistent: {consistent}/{len(resp['thm1_pairs'])}"
    )
    if args.format == "csv":
        lines = [
            "# transfer-report v1",
            f"# lipschitz_bound: {fmt(resp['lipschitz_bound'])}",
            f"# lipschitz_empirical: {fmt(resp['lipschitz_empirical'])}",
            "row_type,a,b,c,ok",
        ]
        for t in trials:
            lines.append(
                "trial,{},{},{},{}".format(
                    fmt(t["dc_norm"]),
                    fmt(math.nan if t["dx_norm"] is None else t["dx_norm"]),
                    fmt(math.nan if t["bound_rhs"] is None else t["bound_rhs"]),
                    int(t["prop1_ok"]),
                )
            )
        for p in resp["thm1_pairs"]:
            lines.append(
                "thm1,{},{},,{}".format(
                    fmt(math.nan if p["dx_diff"] is None else p["dx_diff"]),
                    fmt(math.nan if p["dc_diff_over_l"] is None else p["dc_diff_over_l"]),
                    int(p["consistent"]),
                )
            )
        _write_output("\n".join(lines) + "\n", args.out)
    else:
        _write_output(json.dumps(resp, indent=2) + "\n", args.out)
    return 0


def _cmd_serve(args, config: dict, client: ServiceClient) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cbmrobust", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    # global flags get real defaults here; the parent copies below let them
    # also appear after the subcommand without clobbering anything
    parser.add_argument("--server-url", default=None,
                        help="remote service URL; defaults to the in-process app")
    parser.add_argument("--seed", type=int, default=None, help="override config seeds")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--out", default=None, help="output path (default: stdout)")
    parser.add_argument("--format", choices=("csv", "json"), default="json")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--server-url", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS)
    common.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset pair")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest-cub", parents=[common],
                       help="parse CUB attribute files into a dataset")
    p.add_argument("--root", required=True, help="CUB-200-2011 root directory")
    p.add_argument("--classes", default=None, help="comma-separated class ids (default 1..15)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=_cmd_ingest_cub)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None, help="validation dataset (default: split --data)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--log-out", default=None, help="write per-epoch training log CSV")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", parents=[common], help="attack one sample of a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--target", type=int, default=None, help="target class (default: untargeted)")
    p.add_argument("--epsilon", type=float, default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("eval", parents=[common],
                       help="dataset robustness report for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="train/evaluate across a stability-weight grid")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("transfer", parents=[common], help="input-space transfer check suite")
    p.add_argument("--model", default=None, help="checkpoint containing a concept predictor")
    p.add_argument("--concepts", type=int, default=6, help="random predictor output dim")
    p.add_argument("--features", type=int, default=12, help="random predictor input dim")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    return parser


def cli_main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    client = None
    try:
        config = _load_config(args.config)
        if args.command != "serve":
            client = ServiceClient(args.server_url)
        return args.func(args, config, client)
    except ServiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        if client is not None:
            client.close()


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
