"""Command-line front end.

Every subcommand is a thin HTTP client: flags resolve into a full run
configuration, the request goes to the service (in-process by default,
or a remote base URL via --server), and the response is printed. Exit
codes: 0 success, 1 runtime failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from typing import Optional

import httpx

from .config import (
    RunConfig,
    apply_overrides,
    config_dict,
    default_config,
    load_config,
)

_USAGE_EXIT = 2
_ERROR_EXIT = 1

COMMANDS = (
    "synth", "calibrate", "split", "train", "infer", "eval", "probe",
    "render", "pipeline", "serve",
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, metavar="PATH",
                        help="INI run configuration file")
    parser.add_argument("--server", default=None, metavar="URL",
                        help="base URL of a running service (default: in-process)")
    for f in fields(RunConfig):
        parser.add_argument(f"--{f.name}", default=None, metavar="V",
                            help=f"override config key {f.name}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nichedistill",
        description="Distill teacher niche structure into a histology student.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    helps = {
        "synth": "generate a planted synthetic cell table",
        "calibrate": "bisect the neighborhood radius to the target count",
        "split": "tag cells train/test/discard with an exclusion buffer",
        "train": "distill the teacher into a student checkpoint",
        "infer": "write student niche assignments",
        "eval": "score student against teacher assignment files",
        "probe": "pathology macro-F1 from niche features",
        "render": "draw a niche map from an assignments file",
        "pipeline": "run every stage end to end",
        "serve": "run the HTTP service",
    }
    parsers = {}
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        parsers[name] = sp
        if name == "serve":
            sp.add_argument("--host", default="127.0.0.1")
            sp.add_argument("--port", type=int, default=8000)
            continue
        _add_config_flags(sp)
    parsers["infer"].add_argument("--subset", choices=("train", "test", "both"),
                                  default="both")
    parsers["eval"].add_argument("--table", default=None, metavar="PATH")
    parsers["eval"].add_argument("--teacher", default=None, metavar="PATH")
    parsers["eval"].add_argument("--student", default=None, metavar="PATH")
    parsers["probe"].add_argument("--table", default=None, metavar="PATH")
    parsers["probe"].add_argument("--assignments", default=None, metavar="PATH")
    parsers["render"].add_argument("--assignments", default=None, metavar="PATH")
    parsers["render"].add_argument("--out-name", dest="out_name", default=None,
                                   metavar="NAME")
    parsers["render"].add_argument("--no-overlay", dest="overlay",
                                   action="store_false")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return apply_overrides(cfg, overrides)


class _InProcessTransport(httpx.BaseTransport):
    """Run the ASGI app directly, one event loop per request."""

    def __init__(self, app):
        self._asgi = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        import asyncio

        async def call() -> tuple[int, httpx.Headers, bytes]:
            response = await self._asgi.handle_async_request(request)
            body = await response.aread()
            await response.aclose()
            return response.status_code, response.headers, body

        status, headers, body = asyncio.run(call())
        return httpx.Response(status, headers=headers, content=body, request=request)


def _make_client(server: Optional[str]) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from .service.app import create_app

    return httpx.Client(transport=_InProcessTransport(create_app()),
                        base_url="http://nichedistill", timeout=None)


def _print_metrics(metrics: dict) -> None:
    for key in sorted(metrics):
        print(f"{key} = {metrics[key]}")


def _report(command: str, body: dict) -> None:
    if command == "synth":
        print(f"wrote {body['table']} ({body['n_cells']} cells)")
    elif command == "split":
        print(
            f"wrote {body['split']}: train={body['n_train']} test={body['n_test']}"
            f" discard={body['n_discard']} (buffer {body['buffer_um']} um)"
        )
    elif command == "calibrate":
        print(f"r = {body['radius_um']} (target {body['target_count']},"
              f" {body['n_train']} train cells)")
    elif command == "train":
        line = (
            f"wrote {body['checkpoint']}: r={body['radius_um']}"
            f" train_loss={body['final_train_loss']}"
        )
        if body.get("final_test_loss") is not None:
            line += f" test_loss={body['final_test_loss']}"
        print(line)
    elif command == "infer":
        print(f"wrote {body['assignments']} ({body['n_rows']} rows)")
    elif command == "eval":
        _print_metrics(body)
    elif command == "probe":
        print(f"macro_f1 = {body['macro_f1']} "
              f"(train={body['n_train']} test={body['n_test']})")
    elif command == "render":
        print(f"wrote {body['map']} ({body['n_cells']} cells)")
    elif command == "pipeline":
        _print_metrics(body["metrics"])
        print(f"artifacts in {body['out_dir']}")


def _payload(command: str, args: argparse.Namespace) -> dict:
    payload: dict = {"config": config_dict(resolve_config(args))}
    if command == "infer":
        payload["subset"] = args.subset
    elif command == "eval":
        payload.update(table=args.table, teacher=args.teacher, student=args.student)
    elif command == "probe":
        payload.update(table=args.table, assignments=args.assignments)
    elif command == "render":
        payload.update(assignments=args.assignments, out_name=args.out_name,
                       overlay=args.overlay)
    return payload


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.command == "serve":
        import uvicorn

        from .service.app import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    try:
        payload = _payload(args.command, args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _ERROR_EXIT

    try:
        with _make_client(args.server) as client:
            response = client.post(f"/{args.command}", json=payload)
    except httpx.HTTPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _ERROR_EXIT
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        print(f"error: {detail}", file=sys.stderr)
        return _ERROR_EXIT
    _report(args.command, response.json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
