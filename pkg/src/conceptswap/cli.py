"""Command-line client for the editing service.

Every command talks HTTP to the service: by default an in-process
instance (no daemon required), or a remote one via --server. Images are
sent and received as base64 PNG bytes; the CLI never re-encodes pixels.

Exit codes: 0 success, 2 config or input error, 3 pipeline or service
error, 4 localization produced an empty or degenerate mask.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path
from typing import Any

import httpx

from .config import default_config, effective_config, load_config, parse_overrides
from .errors import ConceptSwapError, ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PIPELINE = 3
EXIT_MASK = 4

_MASK_ERRORS = ("EmptyMask", "DegenerateAttention")


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        # the bundled test client import warns about its transport choice
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _effective(args: argparse.Namespace) -> dict[str, Any]:
    base = load_config(args.config) if args.config else default_config()
    overrides = parse_overrides(args.set or [])
    for flag in ("alpha", "beta"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    return effective_config(base, overrides)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _handle_http_error(resp: httpx.Response) -> int:
    try:
        body = resp.json()
    except Exception:
        return _fail(f"service returned {resp.status_code}: {resp.text[:200]}", EXIT_PIPELINE)
    if isinstance(body, dict) and "error" in body:
        name = body["error"]
        print(f"error: {name}: {body.get('detail', '')}", file=sys.stderr)
        if name in _MASK_ERRORS:
            return EXIT_MASK
        return EXIT_CONFIG if resp.status_code == 400 else EXIT_PIPELINE
    # schema-level rejection from the service framework
    return _fail(f"bad request: {body}", EXIT_CONFIG)


def _read_image_b64(path_text: str) -> tuple[str, int] | tuple[None, int]:
    path = Path(path_text)
    if not path.is_file():
        return None, EXIT_CONFIG
    return base64.b64encode(path.read_bytes()).decode("ascii"), EXIT_OK


def _write_sidecar(path: Path, out_image: Path, data: dict[str, Any]) -> None:
    sidecar = {
        "image": str(out_image),
        "backend": data["backend"],
        "bbox_used": data["bbox_used"],
        "forward_passes": data["forward_passes"],
        "wall_clock_s": data["wall_clock"],
        "config": data["config"],
    }
    path.write_text(json.dumps(sidecar, indent=2) + "\n")


def _edit_command(args: argparse.Namespace, endpoint: str) -> int:
    try:
        cfg = _effective(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    image_b64, code = _read_image_b64(args.image)
    if image_b64 is None:
        return _fail(f"image file not found: {args.image}", code)
    payload: dict[str, Any] = {"image_b64": image_b64, "config": cfg}
    if getattr(args, "concept", None):
        payload["concept_token"] = args.concept
    if getattr(args, "checkpoint", None):
        payload["concept_checkpoint"] = args.checkpoint
    with _client(args.server) as client:
        resp = client.post(endpoint, json=payload)
        if resp.status_code != 200:
            return _handle_http_error(resp)
        data = resp.json()
    out = Path(args.output) if args.output else Path(args.image).with_suffix(".out.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(base64.b64decode(data["image_b64"]))
    sidecar = Path(args.sidecar) if args.sidecar else out.with_name(out.name + ".json")
    _write_sidecar(sidecar, out, data)
    print(
        f"wrote {out} and {sidecar} "
        f"({data['forward_passes']} forward passes, {data['wall_clock']:.2f}s)"
    )
    return EXIT_OK


def cmd_swap(args: argparse.Namespace) -> int:
    return _edit_command(args, "/swap")


def cmd_insert(args: argparse.Namespace) -> int:
    return _edit_command(args, "/insert")


def cmd_remove(args: argparse.Namespace) -> int:
    return _edit_command(args, "/remove")


def cmd_bbox(args: argparse.Namespace) -> int:
    try:
        cfg = _effective(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    image_b64, code = _read_image_b64(args.image)
    if image_b64 is None:
        return _fail(f"image file not found: {args.image}", code)
    with _client(args.server) as client:
        resp = client.post("/bbox", json={"image_b64": image_b64, "config": cfg})
        if resp.status_code != 200:
            return _handle_http_error(resp)
        data = resp.json()
    stem = Path(args.image)
    out = Path(args.output) if args.output else stem.with_suffix(".bbox.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data["bbox"], indent=2) + "\n")
    heat = Path(args.saliency) if args.saliency else stem.with_suffix(".saliency.png")
    heat.write_bytes(base64.b64decode(data["saliency_b64"]))
    print(json.dumps(data["bbox"]))
    print(f"wrote {out} and {heat}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        cfg = _effective(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    payload = {"layout_dir": args.layout, "out_path": args.output, "config": cfg}
    with _client(args.server) as client:
        resp = client.post("/bench", json=payload)
        if resp.status_code != 200:
            return _handle_http_error(resp)
        data = resp.json()
    print(data["table"], end="")
    failures = data["report"].get("failures", [])
    if failures:
        print(f"{len(failures)} run(s) failed and were excluded:", file=sys.stderr)
        for line in failures:
            print(f"  {line}", file=sys.stderr)
    if args.output:
        print(f"wrote {args.output}")
    return EXIT_OK


def cmd_accel_demo(args: argparse.Namespace) -> int:
    try:
        cfg = _effective(args)
        lambdas = [int(v) for v in args.lambdas.split(",") if v.strip()]
    except (ConfigError, ValueError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    payload = {"method": args.method, "lambdas": lambdas, "config": cfg}
    with _client(args.server) as client:
        resp = client.post("/accel-demo", json=payload)
        if resp.status_code != 200:
            return _handle_http_error(resp)
        data = resp.json()
    print(f"method {data['method']}, {data['total_steps']} steps, toy backend")
    print(f"{'period':>8}{'forward passes':>16}{'wall clock (s)':>16}{'speedup':>10}")
    for row in data["rows"]:
        speedup = row.get("speedup_vs_lambda1")
        speedup_text = f"{speedup:.2f}x" if speedup else "-"
        print(
            f"{row['lambda']:>8}{row['forward_passes']:>16}"
            f"{row['wall_clock']:>16.3f}{speedup_text:>10}"
        )
    ref = ", ".join(f"{v:.2f}s @ period {k}" for k, v in data["reference"].items())
    print(f"reference GPU timings (SD 2.1, 512x512, single image): {ref}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config key (repeatable; values parsed as JSON)",
    )
    parser.add_argument("--server", help="remote service URL (default: in-process)")


def _add_edit_io(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--image", required=True, help="source image (PNG)")
    parser.add_argument("--output", help="output image path")
    parser.add_argument("--sidecar", help="metadata JSON path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptswap",
        description="Training-free customized concept swapping in images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_swap = sub.add_parser("swap", help="replace the source concept with a target")
    _add_common(p_swap)
    _add_edit_io(p_swap)
    p_swap.add_argument("--concept", help="customized concept token")
    p_swap.add_argument("--checkpoint", help="concept checkpoint reference")
    p_swap.set_defaults(fn=cmd_swap)

    p_insert = sub.add_parser("insert", help="insert a concept into a given bbox")
    _add_common(p_insert)
    _add_edit_io(p_insert)
    p_insert.add_argument("--concept", help="customized concept token")
    p_insert.add_argument("--checkpoint", help="concept checkpoint reference")
    p_insert.set_defaults(fn=cmd_insert)

    p_remove = sub.add_parser("remove", help="remove the source concept")
    _add_common(p_remove)
    _add_edit_io(p_remove)
    p_remove.set_defaults(fn=cmd_remove)

    p_bbox = sub.add_parser("bbox", help="localize the source concept")
    _add_common(p_bbox)
    p_bbox.add_argument("--image", required=True, help="source image (PNG)")
    p_bbox.add_argument("--output", help="bbox JSON path")
    p_bbox.add_argument("--saliency", help="saliency heat image path")
    p_bbox.add_argument("--alpha", type=float, help="attention sharpening exponent")
    p_bbox.add_argument("--beta", type=float, help="mask threshold")
    p_bbox.set_defaults(fn=cmd_bbox)

    p_bench = sub.add_parser("bench", help="run the benchmark harness")
    _add_common(p_bench)
    p_bench.add_argument("--layout", required=True, help="benchmark directory")
    p_bench.add_argument("--output", help="report path (json)")
    p_bench.set_defaults(fn=cmd_bench)

    p_accel = sub.add_parser(
        "accel-demo", help="gradient-reuse speedup on plain SDS/DDS"
    )
    _add_common(p_accel)
    p_accel.add_argument("--method", choices=("sds", "dds"), default="dds")
    p_accel.add_argument("--lambdas", default="1,5", help="comma-separated periods")
    p_accel.set_defaults(fn=cmd_accel_demo)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except ConceptSwapError as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_PIPELINE)
    except httpx.HTTPError as exc:
        return _fail(f"service unreachable: {exc}", EXIT_PIPELINE)
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # contract: no traceback ever reaches the user
        return _fail(f"internal error: {type(exc).__name__}: {exc}", EXIT_PIPELINE)


if __name__ == "__main__":
    sys.exit(main())
