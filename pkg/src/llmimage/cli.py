"""Command line entry point: ``llmimage <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 protocol or API error, 4 numerical
failure.  Logs go to stderr as JSON lines; results go to files, with a
``.manifest.json`` beside the main output recording calls and digests.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import signal
import sys
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import extraction, image as image_ops, io, plotting
from .algebra import clr, prob_vector
from .api import Capabilities, InProcessSession
from .errors import LLMImageError, NoPlateau, NumericalInstability, ValidationError
from .mock import MockModel, MockModelSpec, variant_spec

log = logging.getLogger("llmimage")

STRATEGIES = ("fast", "stable", "stochastic", "logprob-free")

_STD_ATTRS = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        entry = {"ts": round(record.created, 3), "level": record.levelname.lower(),
                 "logger": record.name, "msg": record.getMessage()}
        for key, value in vars(record).items():
            if key not in _STD_ATTRS and not key.startswith("_"):
                entry[key] = value
        if record.exc_info and record.levelno >= logging.ERROR:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


def setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("llmimage")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False
    logging.captureWarnings(True)
    pywarn = logging.getLogger("py.warnings")
    pywarn.handlers[:] = [handler]
    pywarn.propagate = False


# -- manifest -----------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    parameters: dict
    capabilities: dict | None = None
    call_count: int = 0
    wall_time: float = 0.0
    outputs: dict = field(default_factory=dict)
    result: dict = field(default_factory=dict)

    def record(self, path):
        self.outputs[str(path)] = io.file_digest(path)

    def write(self, path):
        body = json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n"
        io.atomic_write_bytes(path, body.encode("utf-8"))


def _manifest_path(args, main_output):
    return Path(args.manifest) if args.manifest else Path(f"{main_output}.manifest.json")


def _params(args):
    skip = {"func", "manifest", "log_level"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def created_at(args):
    """--created-at, else SOURCE_DATE_EPOCH, else now (UTC)."""
    if getattr(args, "created_at", None):
        return args.created_at
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        try:
            when = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        except ValueError:
            raise ValidationError(f"SOURCE_DATE_EPOCH must be an integer, got {epoch!r}") from None
        return image_ops.utc_timestamp(when)
    return image_ops.utc_timestamp()


# -- sessions ---------------------------------------------------------------------

def _load_json_arg(value, what):
    """Inline JSON object or a path to a JSON file."""
    try:
        if value.lstrip().startswith("{"):
            return json.loads(value)
        with open(value, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {what} {value!r}: {exc}") from exc


def load_spec(config=None, seed=None, variant=None, variant_seed=1):
    spec = MockModelSpec.from_dict(_load_json_arg(config, "mock config")) if config else MockModelSpec()
    if seed is not None:
        spec = spec.replace(seed=seed)
    if variant:
        spec = variant_spec(spec, variant, variant_seed).replace(
            model_id=f"{spec.model_id}:{variant}")
    return spec


def open_session(args):
    if args.url:
        from .transport import connect
        kwargs = dict(cache=not args.no_cache, concurrency=args.concurrency or 8)
        if args.profile == "native":
            kwargs["session_id"] = args.session_id
        else:
            if not args.capabilities or not args.model:
                raise ValidationError("--profile openai_compatible needs --capabilities and --model")
            kwargs["model"] = args.model
            if args.token_map:
                kwargs["token_map"] = _load_json_arg(args.token_map, "token map")
        if args.capabilities:
            kwargs["capabilities"] = Capabilities.from_dict(
                _load_json_arg(args.capabilities, "capabilities"))
        auth = os.environ.get(args.auth_env) if args.auth_env else None
        return connect(args.url, auth=auth, profile=args.profile, **kwargs)
    spec = load_spec(args.mock, args.seed, args.variant, args.variant_seed)
    return InProcessSession(MockModel(spec), cache=not args.no_cache,
                            concurrency=args.concurrency or 1,
                            session_id=args.session_id or "default")


def _add_source(p):
    g = p.add_argument_group("target API (one of --url / --mock; default: built-in mock)")
    g.add_argument("--url", help="base URL of a logprob API server")
    g.add_argument("--mock", help="in-process mock: JSON config file or inline JSON object")
    g.add_argument("--seed", type=int, help="override the mock seed")
    g.add_argument("--variant", help="derive a mock variant, e.g. 'lora(8)' or 'hidden_prompt'")
    g.add_argument("--variant-seed", type=int, default=1)
    g.add_argument("--profile", choices=("native", "openai_compatible"), default="native")
    g.add_argument("--auth-env", default=None,
                   help="environment variable holding a bearer token")
    g.add_argument("--capabilities", help="JSON (or file) with v, k_max, beta_max, stochastic")
    g.add_argument("--model", help="model name for the openai_compatible profile")
    g.add_argument("--token-map", help="JSON (or file) mapping token strings to ids")
    g.add_argument("--session-id", help="session identifier sent with each request")
    g.add_argument("--no-cache", action="store_true", help="disable the response cache")
    g.add_argument("--concurrency", type=int, default=None)


def _add_outputs(p, out_help):
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def _figure(args, fig, path):
    if not args.no_figures:
        plotting.save_figure(fig, path)
        return path
    return None


def _finish(args, manifest, started, outputs, session=None):
    manifest.wall_time = round(time.perf_counter() - started, 6)
    if session is not None:
        manifest.capabilities = session.capabilities.to_dict()
        manifest.call_count = session.call_count
    for path in outputs:
        if path is not None:
            manifest.record(path)
    manifest.write(_manifest_path(args, outputs[0]))
    log.info("run complete", extra={"event": "done", "command": manifest.command,
                                    "calls": manifest.call_count,
                                    "wall_time": manifest.wall_time})


# -- commands -----------------------------------------------------------------------

def cmd_mock_serve(args):
    from .transport import serve
    spec = load_spec(args.config, args.seed, args.variant, args.variant_seed)
    model = MockModel(spec)
    server = serve(model, args.bind, rate_limit=args.rate_limit)
    print(json.dumps(model.capabilities.to_dict()), flush=True)
    print(f"serving {spec.model_id} on {server.url}", flush=True)
    log.info("serving", extra={"event": "serve", "url": server.url, "model_id": spec.model_id})
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    server.stop()
    return 0


def cmd_extract(args):
    started = time.perf_counter()
    session = open_session(args)
    manifest = RunManifest("extract", _params(args))
    try:
        if args.strategy == "fast":
            probs = extraction.extract_fast(session, args.context, beta=args.beta)
        elif args.strategy == "stable":
            probs = extraction.extract_stable(session, args.context, beta=args.beta)
        elif args.strategy == "logprob-free":
            probs = extraction.extract_logprob_free(session, args.context, beta=args.beta,
                                                    epsilon=args.epsilon)
        else:
            result = extraction.extract_stochastic(session, args.context, beta=args.beta,
                                                   n_hint=args.n_hint, budget=args.budget)
            fp, probs = result.first()
            manifest.result = {"fingerprint": fp, "degenerate": result.degenerate,
                               "coverage": {repr(k): v for k, v in result.coverage.items()}}
            if result.degenerate:
                log.warning("only one replica fingerprint was observed; the API looks "
                            "deterministic", extra={"event": "degenerate_stochasticity"})
    except NumericalInstability as exc:
        exc.args = (f"{exc} (hint: --strategy stable avoids this)",)
        raise
    io.write_vector_csv(args.out, probs)
    fig = _figure(args, plotting.distribution_figure(probs), Path(args.out).with_suffix(".png"))
    _finish(args, manifest, started, [args.out, fig], session)
    return 0


def cmd_image_collect(args):
    started = time.perf_counter()
    session = open_session(args)
    img = image_ops.collect_image(session, args.strategy, margin=args.margin, batch=args.batch,
                                  extra_columns=args.extra_columns, source_id=args.source_id,
                                  created_at=created_at(args), beta=args.beta)
    io.write_image(args.out, img)
    spec_csv = Path(args.out).with_suffix(".spectrum.csv")
    io.write_spectrum_csv(spec_csv, img.spectrum)
    fig = _figure(args, plotting.spectrum_figure(img.spectrum.values, img.d_estimate),
                  spec_csv.with_suffix(".png"))
    manifest = RunManifest("image collect", _params(args),
                           result={"d_estimate": img.d_estimate, "m": img.m, "v": img.v})
    _finish(args, manifest, started, [args.out, spec_csv, fig], session)
    print(json.dumps({"d_estimate": img.d_estimate, "m": img.m, "calls": session.call_count}))
    return 0


def cmd_image_embed_size(args):
    started = time.perf_counter()
    session = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NoPlateau)
        if args.image:
            est = image_ops.estimate_embedding_size(io.read_image(args.image), args.tolerance)
        else:
            session = open_session(args)
            tokens = range(min(args.tokens, session.v)) if args.tokens else None
            if tokens is None:
                img = image_ops.collect_image(session, margin=args.margin, batch=args.batch,
                                              created_at=created_at(args))
                est = image_ops.estimate_embedding_size(img, args.tolerance)
            else:
                est, _ = image_ops.discover_embedding_size(
                    session, tokens, margin=args.margin, batch=args.batch,
                    tolerance=args.tolerance)
    plateau = not any(issubclass(w.category, NoPlateau) for w in caught)
    for w in caught:
        log.warning(str(w.message), extra={"event": "no_plateau"})
    io.write_spectrum_csv(args.out, est.spectrum)
    fig = _figure(args, plotting.spectrum_figure(est.spectrum.values, est.d),
                  Path(args.out).with_suffix(".png"))
    manifest = RunManifest("image embed-size", _params(args),
                           result={**est.to_dict(), "plateau": plateau})
    _finish(args, manifest, started, [args.out, fig], session)
    print(est.d)
    return 0


def cmd_image_spectrum(args):
    started = time.perf_counter()
    img = io.read_image(args.image)
    io.write_spectrum_csv(args.out, img.spectrum)
    fig = _figure(args, plotting.spectrum_figure(img.spectrum.values, img.d_estimate),
                  Path(args.out).with_suffix(".png"))
    manifest = RunManifest("image spectrum", _params(args), result={"d_estimate": img.d_estimate})
    _finish(args, manifest, started, [args.out, fig])
    return 0


def cmd_image_fast_extract(args):
    started = time.perf_counter()
    img = io.read_image(args.image)
    session = open_session(args)
    probs = image_ops.fast_extract(img, session, args.context, beta=args.beta)
    io.write_vector_csv(args.out, probs)
    fig = _figure(args, plotting.distribution_figure(probs), Path(args.out).with_suffix(".png"))
    _finish(args, RunManifest("image fast-extract", _params(args)), started, [args.out, fig],
            session)
    return 0


def _read_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh if line.strip()]
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


def cmd_audit(args):
    started = time.perf_counter()
    a, b = io.read_image(args.image_a), io.read_image(args.image_b)
    probes = _read_lines(args.probe_contexts) if args.probe_contexts else None
    report = image_ops.audit_update(a, b, probes=probes, tolerance=args.tolerance)
    body = report.to_dict()
    print(json.dumps(body, indent=2))
    if args.out:
        io.atomic_write_bytes(args.out, (json.dumps(body, indent=2) + "\n").encode("utf-8"))
        _finish(args, RunManifest("audit", _params(args), result=body), started, [args.out])
    return 0


def _load_output(path, space):
    values = io.read_vector_csv(path)
    if space == "auto":
        space = "prob" if np.all(values >= 0) and abs(values.sum() - 1) < 1e-6 else "clr"
    return clr(prob_vector(values)) if space == "prob" else values


def cmd_attribute(args):
    started = time.perf_counter()
    paths = sorted(Path(args.images).glob("*.llmimg"))
    if not paths:
        raise ValidationError(f"no .llmimg files in {args.images}")
    candidates = [io.read_image(p) for p in paths]
    output = _load_output(args.output, args.space)
    report = image_ops.attribute(candidates, output, rel_threshold=args.rel_threshold,
                                 margin_min=args.margin_min)
    width = max(len(s) for s, _ in report.residuals)
    print(f"{'source_id':<{width}}  residual")
    for source, residual in report.residuals:
        print(f"{source:<{width}}  {residual:.6e}")
    print(f"best_match: {report.best_match}  margin: {report.margin:.3g}")
    if args.out:
        io.write_table_csv(args.out, [{"source_id": s, "residual": repr(r)}
                                      for s, r in report.residuals], ("source_id", "residual"))
        fig = _figure(args, plotting.residual_figure(report.residuals, report.best_match),
                      Path(args.out).with_suffix(".png"))
        _finish(args, RunManifest("attribute", _params(args), result=report.to_dict()),
                started, [args.out, fig])
    return 0 if report.best_match is not None or not args.require_match else 4


def _fmt_num(x):
    if x is None:
        return "-"
    if isinstance(x, float) and x.is_integer():
        return str(int(x))
    return f"{x:.6g}"


def cmd_cost(args):
    started = time.perf_counter()
    rows = extraction.estimate_cost(args.v, args.k, args.d, n=args.n, beta_max=args.beta_max,
                                    epsilon=args.epsilon, price_per_call=args.price_per_call)
    print(f"{'strategy':<14}{'complexity':<24}{'calls/output':>14}{'image USD':>12}")
    for r in rows:
        print(f"{r.strategy:<14}{r.complexity:<24}{_fmt_num(r.calls_per_output):>14}"
              f"{_fmt_num(r.image_price_usd):>12}")
    if args.out:
        table = [{"strategy": r.strategy, "complexity": r.complexity,
                  "calls_per_output": repr(r.calls_per_output),
                  "image_price_usd": "" if r.image_price_usd is None else repr(r.image_price_usd)}
                 for r in rows]
        io.write_table_csv(args.out, table, tuple(table[0]))
        fig = _figure(args, plotting.cost_figure(rows), Path(args.out).with_suffix(".png"))
        _finish(args, RunManifest("cost", _params(args)), started, [args.out, fig])
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=("debug", "info", "warning", "error"))
    parser = argparse.ArgumentParser(prog="llmimage", description=__doc__.split("\n")[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mock-serve", parents=[common],
                       help="serve a mock model over HTTP")
    p.add_argument("--config", help="mock config JSON file or inline object")
    p.add_argument("--bind", default="127.0.0.1:8080")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.add_argument("--variant-seed", type=int, default=1)
    p.add_argument("--rate-limit", type=float, help="max requests per second")
    p.set_defaults(func=cmd_mock_serve)

    p = sub.add_parser("extract", parents=[common],
                       help="extract one full next-token distribution")
    _add_source(p)
    p.add_argument("--context", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="stable")
    p.add_argument("--beta", type=float)
    p.add_argument("--epsilon", type=float, default=extraction.DEFAULT_EPSILON)
    p.add_argument("--n-hint", type=int, help="expected number of replicas (stochastic)")
    p.add_argument("--budget", type=int, help="call budget (stochastic)")
    _add_outputs(p, "distribution CSV")
    p.set_defaults(func=cmd_extract)

    img = sub.add_parser("image", parents=[common],
                         help="collect and use model images").add_subparsers(
        dest="image_command", required=True)

    p = img.add_parser("collect", parents=[common],
                       help="collect outputs until the rank plateaus")
    _add_source(p)
    p.add_argument("--strategy", choices=("stable", "fast", "logprob-free"), default="stable")
    p.add_argument("--margin", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--extra-columns", type=int, default=0)
    p.add_argument("--beta", type=float)
    p.add_argument("--source-id")
    p.add_argument("--created-at", help="timestamp stored in the file header")
    _add_outputs(p, "output .llmimg file")
    p.set_defaults(func=cmd_image_collect)

    p = img.add_parser("embed-size", parents=[common],
                       help="estimate the embedding size")
    _add_source(p)
    p.add_argument("--image", help="estimate from an existing .llmimg instead of querying")
    p.add_argument("--tokens", type=int,
                   help="restrict outputs to the first N tokens (cheaper discovery)")
    p.add_argument("--margin", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--created-at")
    _add_outputs(p, "spectrum CSV")
    p.set_defaults(func=cmd_image_embed_size)

    p = img.add_parser("spectrum", parents=[common],
                       help="write the singular value spectrum of an image")
    p.add_argument("--image", required=True)
    _add_outputs(p, "spectrum CSV")
    p.set_defaults(func=cmd_image_spectrum)

    p = img.add_parser("fast-extract", parents=[common],
                       help="full output using the image and O(d) calls")
    _add_source(p)
    p.add_argument("--image", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--beta", type=float)
    _add_outputs(p, "distribution CSV")
    p.set_defaults(func=cmd_image_fast_extract)

    p = sub.add_parser("audit", parents=[common],
                       help="classify the update between two images")
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--probe-contexts", help="file with one probe context per line")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", help="also write the report as JSON")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("attribute", parents=[common],
                       help="which image produced an output")
    p.add_argument("--images", required=True, help="directory of .llmimg candidates")
    p.add_argument("--output", required=True, help="token_id,value CSV")
    p.add_argument("--space", choices=("auto", "prob", "clr"), default="auto")
    p.add_argument("--rel-threshold", type=float, default=1e-6)
    p.add_argument("--margin-min", type=float, default=100.0)
    p.add_argument("--require-match", action="store_true",
                   help="exit 4 when no candidate matches")
    p.add_argument("--out", help="residual table CSV")
    p.add_argument("--manifest")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("cost", parents=[common],
                       help="calls per output and image price per strategy")
    p.add_argument("--v", type=int, default=100000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--d", type=int, default=4096)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--beta-max", type=float, default=100.0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--price-per-call", type=float, default=extraction.PRICE_PER_CALL)
    p.add_argument("--out", help="cost table CSV")
    p.add_argument("--manifest")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(getattr(args, "log_level", "info"))
    if getattr(args, "url", None) and getattr(args, "mock", None):
        parser.error("use either --url or --mock, not both")
    try:
        return args.func(args)
    except LLMImageError as exc:
        log.error(str(exc), extra={"event": "error", "error": type(exc).__name__})
        print(f"llmimage: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        log.error(str(exc), extra={"event": "error", "error": type(exc).__name__})
        print(f"llmimage: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
