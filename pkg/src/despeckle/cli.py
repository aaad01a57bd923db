"""Command line entry point.

Runs operations in-process by default; ``--server URL`` turns it into a thin
HTTP client for a running ``despeckle`` API. Results go to stdout as JSON,
progress to stderr.

Exit codes: 0 success, 2 config/user error, 3 I/O error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from pydantic import ValidationError

from .api import schemas

EXIT_OK, EXIT_USER, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("despeckle.cli")

# verb -> (request model, service function name, remote route, runs as a job)
VERBS = {
    "prepare": (schemas.PrepareRequest, "prepare", "/prepare", False),
    "stats": (schemas.StatsRequest, "stats", "/stats", False),
    "train": (schemas.TrainRequest, "train", "/jobs/train", True),
    "eval": (schemas.EvalRequest, "evaluate_checkpoint", "/eval", False),
    "ablate": (schemas.AblateRequest, "ablate", "/jobs/ablate", True),
    "sweep": (schemas.SweepRequest, "sweep", "/jobs/sweep", True),
    "figure": (schemas.FigureRequest, "figure", "/figure", False),
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ids(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _sweep_values(text: str) -> list:
    """``0.1,0.3`` for scalar axes; ``2-2-32-2,2-4-32-2`` for depth tuples."""
    out = []
    for item in _ids(text):
        try:
            out.append([int(p) for p in item.split("-")] if "-" in item.lstrip("-") else float(item))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad sweep value {item!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    # argparse usage errors exit with 2, which is already the config/user error code
    p = argparse.ArgumentParser(prog="despeckle", description="Speckle reduction training and evaluation toolkit.")
    p.add_argument("--server", metavar="URL", help="send the request to a running API instead of running locally")
    p.add_argument("--poll", type=float, default=1.0, help="job polling interval in seconds (remote mode)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp):
        sp.add_argument("--config", dest="config_path", metavar="FILE")
        sp.add_argument("overrides", nargs="*", metavar="key.sub=value")

    sp = sub.add_parser("prepare", help="split an image directory and render noisy copies")
    sp.add_argument("--root", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--sigmas", type=_floats, default=[0.25, 0.5, 0.75])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ratio", type=float, default=0.7)
    sp.add_argument("--size", type=int, default=224)
    sp.add_argument("--output-dir")

    sp = sub.add_parser("stats", help="ratio map and low-ratio regions of one image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--window", type=int)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--output-dir")
    with_config(sp)

    sp = sub.add_parser("train", help="train a model and evaluate it on the test partition")
    sp.add_argument("--output-dir")
    sp.add_argument("--resume", metavar="CHECKPOINT")
    with_config(sp)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sigmas", type=_floats)
    sp.add_argument("--output-dir")

    sp = sub.add_parser("ablate", help="run an ablation grid")
    sp.add_argument("--grid", choices=("table3", "orders"), default="table3")
    sp.add_argument("--output-dir")
    with_config(sp)

    sp = sub.add_parser("sweep", help="sweep one hyperparameter")
    sp.add_argument("--axis", choices=("alpha", "beta", "depths"), required=True)
    sp.add_argument("--values", type=_sweep_values)
    sp.add_argument("--output-dir")
    with_config(sp)

    sp = sub.add_parser("figure", help="clean | noisy | denoised panel grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", type=_ids)
    sp.add_argument("--sigma", type=float, default=0.5)
    sp.add_argument("--output")
    return p


def _request(args: argparse.Namespace):
    model = VERBS[args.verb][0]
    fields = {k: v for k, v in vars(args).items() if k in model.model_fields and v is not None}
    return model(**fields)


def _run_local(verb: str, req):
    from . import service

    try:
        return EXIT_OK, getattr(service, VERBS[verb][1])(req).model_dump(mode="json")
    except service.ServiceError as exc:
        log.error("%s", exc)
        return exc.exit_code, exc.body().model_dump()


def _error_from(resp) -> tuple[int, dict]:
    try:
        body = schemas.ErrorBody.model_validate(resp.json())
    except (ValueError, ValidationError):
        body = schemas.ErrorBody(error="http", message=f"HTTP {resp.status_code}: {resp.text}", exit_code=EXIT_USER)
    log.error("%s", body.message)
    return body.exit_code, body.model_dump()


def _run_remote(server: str, verb: str, req, poll: float):
    import httpx

    _, _, route, is_job = VERBS[verb]
    try:
        with httpx.Client(base_url=server.rstrip("/"), timeout=None) as client:
            resp = client.post(route, json=req.model_dump(mode="json"))
            if resp.status_code >= 400:
                return _error_from(resp)
            if not is_job:
                return EXIT_OK, resp.json()
            status = schemas.JobStatus.model_validate(resp.json())
            log.info("submitted %s job %s", verb, status.id)
            while status.status in ("queued", "running"):
                time.sleep(poll)
                resp = client.get(f"/jobs/{status.id}")
                if resp.status_code >= 400:
                    return _error_from(resp)
                status = schemas.JobStatus.model_validate(resp.json())
    except httpx.HTTPError as exc:
        log.error("cannot reach %s: %s", server, exc)
        return EXIT_IO, {"error": "io", "message": str(exc), "exit_code": EXIT_IO}
    if status.status == "failed":
        log.error("%s", status.error.message)
        return status.error.exit_code, status.error.model_dump()
    return EXIT_OK, status.result


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        req = _request(args)
    except ValidationError as exc:
        log.error("invalid arguments: %s", exc)
        return EXIT_USER
    if args.server:
        code, payload = _run_remote(args.server, args.verb, req, args.poll)
    else:
        code, payload = _run_local(args.verb, req)
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
