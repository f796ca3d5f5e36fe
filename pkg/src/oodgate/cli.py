"""Command-line client for the decision service.

Subcommands map one-to-one onto the HTTP endpoints.  Without ``--server`` the
requests are dispatched to the application in-process, so batch runs need no
running daemon; with ``--server URL`` the same commands drive a remote
instance.  All module errors surface as machine-readable error JSON and a
nonzero exit code (2 for config/data problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Optional

import httpx

from .config import RunConfig

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class ApiClient:
    """POSTs against a remote server or the in-process app."""

    def __init__(self, server: Optional[str]):
        self.server = server

    def post(self, path: str, payload: dict) -> tuple[int, dict]:
        if self.server:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                resp = client.post(path, json=payload)
                return resp.status_code, resp.json()
        return asyncio.run(self._post_local(path, payload))

    @staticmethod
    async def _post_local(path: str, payload: dict) -> tuple[int, dict]:
        from .service.app import app

        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://oodgate.local", timeout=None
        ) as client:
            resp = await client.post(path, json=payload)
            return resp.status_code, resp.json()


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="JSON run-config file; flags override it")
    parser.add_argument("--data-root", type=str, help="dataset root directory")
    parser.add_argument("--datasets", type=str, help="comma-separated dataset subdirectories")
    parser.add_argument("--subjects", type=str, help="comma-separated subject filter")
    parser.add_argument("--out", type=str, help="output directory for artifacts")
    parser.add_argument("--seed", type=int, help="seed for all randomness")
    parser.add_argument("--jobs", type=int, help="parallel workers across subjects")
    parser.add_argument("--gate-threshold", type=float, dest="gate_threshold")
    parser.add_argument(
        "--fusion-weights", type=str, help="alpha,beta,gamma for the fused score"
    )
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--eta", type=float, help="mahalanobis/knn balance in [0,1]")
    parser.add_argument("--knn-k", type=int, dest="knn_k")
    parser.add_argument("--temporal-metric", type=str, dest="temporal_metric")
    parser.add_argument("--tau-quantile", type=float, dest="tau_quantile")
    parser.add_argument("--window-len", type=float, dest="window_len_s")
    parser.add_argument("--hop", type=float, dest="hop_s")
    parser.add_argument("--provider", type=str, choices=["native", "replay"])
    parser.add_argument("--methods", type=str, help="comma-separated detector names")
    parser.add_argument(
        "--ood-population",
        type=str,
        dest="ood_eval_population",
        choices=["gated", "all_task"],
    )
    parser.add_argument("--server", type=str, help="remote service URL (default: in-process)")


def build_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        doc = json.loads(path.read_text(encoding="utf-8"))
    overrides = {
        "data_root": args.data_root,
        "out": args.out,
        "seed": args.seed,
        "jobs": args.jobs,
        "gate_threshold": args.gate_threshold,
        "temperature": args.temperature,
        "eta": args.eta,
        "knn_k": args.knn_k,
        "temporal_metric": args.temporal_metric,
        "tau_quantile": args.tau_quantile,
        "window_len_s": args.window_len_s,
        "hop_s": args.hop_s,
        "provider": args.provider,
        "ood_eval_population": args.ood_eval_population,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    if args.datasets:
        doc["datasets"] = [s for s in args.datasets.split(",") if s]
    if args.subjects:
        doc["subjects"] = [s for s in args.subjects.split(",") if s]
    if args.methods:
        doc["methods"] = [s for s in args.methods.split(",") if s]
    if args.fusion_weights:
        parts = [float(x) for x in args.fusion_weights.split(",")]
        if len(parts) != 3:
            raise ValueError("--fusion-weights expects alpha,beta,gamma")
        doc["alpha"], doc["beta"], doc["gamma"] = parts
    return RunConfig.model_validate(doc)


def _fail(exc: Exception, code: int) -> int:
    body = json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}})
    print(body, file=sys.stderr)
    return code


def _run_job(endpoint: str, args: argparse.Namespace) -> int:
    try:
        config = build_config(args)
    except (ValueError, FileNotFoundError) as exc:
        return _fail(exc, EXIT_CONFIG)
    client = ApiClient(args.server)
    try:
        status, body = client.post(endpoint, {"config": config.resolved_dict()})
    except httpx.HTTPError as exc:
        return _fail(exc, EXIT_FAILURE)
    if status == 200:
        print(json.dumps(body.get("result", body), indent=2, sort_keys=True))
        return EXIT_OK
    print(json.dumps(body), file=sys.stderr)
    return EXIT_CONFIG if status in (404, 422) else EXIT_FAILURE


def _cmd_synth(args: argparse.Namespace) -> int:
    from .synthetic import make_synthetic_dataset

    index = make_synthetic_dataset(
        Path(args.out_dir),
        n_subjects=args.subjects,
        seed=args.seed,
    )
    print(json.dumps({"index": str(index)}, indent=2))
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="oodgate",
        description="Streaming rest/task gating and out-of-distribution rejection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    endpoints = {
        "train": "/pipeline/train",
        "calibrate": "/pipeline/calibrate",
        "replay": "/pipeline/replay",
        "eval": "/pipeline/eval",
        "ablate": "/pipeline/ablate",
    }
    help_text = {
        "train": "train gate and control-class models per subject",
        "calibrate": "freeze class stats, score stats and the rejection threshold",
        "replay": "run the online engine over test sessions, emitting decision JSONL",
        "eval": "compute detection, gating and coverage metrics",
        "ablate": "run the component-mask and temporal-metric grids",
    }
    for name, endpoint in endpoints.items():
        p = sub.add_parser(name, help=help_text[name])
        _add_common_flags(p)
        p.set_defaults(handler=lambda a, ep=endpoint: _run_job(ep, a))

    p_synth = sub.add_parser("synth", help="generate a synthetic raw dataset fixture")
    p_synth.add_argument("--out-dir", required=True)
    p_synth.add_argument("--subjects", type=int, default=2)
    p_synth.add_argument("--seed", type=int, default=7)
    p_synth.set_defaults(handler=_cmd_synth)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(handler=_cmd_serve)

    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
