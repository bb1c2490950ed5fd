"""Command-line entry point: ``lptrack <command> [flags]``.

Machine-readable results go to stdout, logs to stderr. Exit codes: 0
success or no change, 1 usage error, 2 runtime error, 3 a change was found
(``test`` with p below alpha, ``scan`` with at least one event).
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import signal
import sys
import threading
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from . import __version__
from .client import (
    EndpointConfig,
    RetryPolicy,
    load_config,
    load_fleet,
    poll_loop,
    probe,
    survey,
)
from .errors import ConfigError, InvalidInputError, LptrackError, UsageError
from .evaluation import ExperimentPlan, is_nondecreasing, prompt_ablation, run_benchmark, sensitivity_threshold
from .monitor import DetectorConfig, OnlineDetector, detect_changes, post_event, write_events
from .simulator import VARIANT_KINDS, SyntheticModel, VariantSpec, simulated_series
from .stats import exact_permutation_test, permutation_test
from .store import SeriesRecord, SeriesStore, group_points, read_archive
from .tokens import SampleSet

log = logging.getLogger("lptrack")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHANGE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")


def _resolve_seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
        log.warning("no --seed given; using seed %d", args.seed)
    return args.seed


def _csv(kind):
    def parse(text: str):
        try:
            return tuple(kind(x) for x in text.split(",") if x.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


# -- endpoint flags ----------------------------------------------------------------------


def _endpoint_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("endpoint")
    g.add_argument("--config", help="fleet config (YAML or JSON) with an endpoints list")
    g.add_argument("--base-url", help="API base URL; requests go to {base-url}/chat/completions")
    g.add_argument("--model", action="append", default=[], help="model id (repeatable)")
    g.add_argument("--endpoint-id", default="", help="series identifier (default model@base-url)")
    g.add_argument("--auth-env", default=None, help="environment variable holding the bearer token")
    g.add_argument("--prompt", default="x")
    g.add_argument("--top-logprobs", type=int, default=20)
    g.add_argument("--max-tokens", type=int, default=1)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--timeout", type=float, default=30.0)
    g.add_argument("--attempts", type=int, default=3, help="attempts per probe")
    g.add_argument("--backoff", type=_csv(float), default=(1.0, 4.0, 16.0), help="retry waits in seconds")


def _endpoints(args) -> list[EndpointConfig]:
    if args.config:
        if args.base_url or args.model:
            raise UsageError("--config and --base-url/--model are mutually exclusive")
        return load_fleet(args.config)
    if not args.base_url or not args.model:
        raise UsageError("give --config, or --base-url with at least one --model")
    retry = RetryPolicy(args.attempts, tuple(args.backoff))
    if args.endpoint_id and len(args.model) > 1:
        raise UsageError("--endpoint-id needs exactly one --model")
    return [
        EndpointConfig(
            base_url=args.base_url,
            model_id=model,
            auth_token_env=args.auth_env,
            prompt=args.prompt,
            top_logprobs=args.top_logprobs,
            max_output_tokens=args.max_tokens,
            temperature=args.temperature,
            timeout=args.timeout,
            retry=retry,
            endpoint_id=args.endpoint_id,
        )
        for model in args.model
    ]


# -- commands -------------------------------------------------------------------------


def cmd_probe(args) -> int:
    worst = EXIT_OK
    for c in _endpoints(args):
        outcome = probe(c)
        _emit(outcome.to_dict())
        if not outcome.ok:
            worst = EXIT_RUNTIME
    return worst


def cmd_survey(args) -> int:
    report = survey(_endpoints(args), max_workers=args.workers)
    _emit(report.to_dict())
    return EXIT_OK


def _detector_feed(fleet, store: SeriesStore, args):
    """Per-endpoint online detectors, warmed up on stored history."""
    cfg = DetectorConfig(args.w, args.window, args.k_sigma, args.floor, args.cooldown)
    detectors: dict[str, OnlineDetector] = {}
    lock = threading.Lock()
    for c in fleet:
        det = OnlineDetector(cfg, c.key, c.prompt)
        # events already in the past are not re-sent
        det.feed_many(store.read_series(c.key, c.prompt))
        detectors[c.key] = det

    def feed(outcome) -> None:
        if not outcome.ok:
            return
        with lock:
            try:
                events = detectors[outcome.endpoint_id].feed(outcome.point)
            except InvalidInputError as exc:
                log.error("%s: %s", outcome.endpoint_id, exc)
                return
            _publish(events, args)

    return feed


def cmd_poll(args) -> int:
    fleet = _endpoints(args)
    store = SeriesStore(args.data_dir, fsync=args.fsync)
    stop = threading.Event()

    def handle(signum, _frame):
        log.warning("signal %d received, finishing the current tick", signum)
        stop.set()

    previous = {}
    if threading.current_thread() is threading.main_thread():
        for signum in (signal.SIGTERM, signal.SIGINT):
            previous[signum] = signal.signal(signum, handle)

    try:
        feed = _detector_feed(fleet, store, args) if args.detect else None
        stats = poll_loop(
            fleet,
            args.interval,
            store,
            stop=stop,
            max_ticks=args.ticks,
            max_workers=args.workers,
            seed=args.seed,
            on_outcome=feed,
        )
    finally:
        for signum, old in previous.items():
            signal.signal(signum, old)
    _emit(
        {
            "ticks": stats.ticks,
            "stored": stats.stored,
            "failures": dict(sorted(stats.failures.items())),
            "store_errors": stats.store_errors,
            "pending": stats.pending,
        }
    )
    return EXIT_OK


def _load_samples(path: str, last: int | None, text_only: bool) -> SampleSet:
    records = read_archive(path)
    if not records:
        raise InvalidInputError(f"{path} holds no records")
    if last is not None:
        records = records[-last:]
    samples = SampleSet(tuple(r.vector for r in records), records[0].prompt, path)
    return samples.text_only() if text_only else samples


def cmd_test(args) -> int:
    a = _load_samples(args.first, args.last, args.text_only)
    b = _load_samples(args.second, args.last, args.text_only)
    if args.exact:
        result = exact_permutation_test(a, b)
    else:
        result = permutation_test(a, b, args.permutations, _resolve_seed(args))
    doc = result.to_dict()
    doc["alpha"] = args.alpha
    doc["significant"] = result.significant(args.alpha)
    _emit(doc)
    return EXIT_CHANGE if result.significant(args.alpha) else EXIT_OK


def _series_from(source: str) -> dict[tuple[str, str], list]:
    path = Path(source)
    if path.is_dir():
        store = SeriesStore(path)
        return {key: store.read_series(*key) for key in store.series_keys()}
    if path.is_file():
        return group_points(read_archive(path))
    raise InvalidInputError(f"{source} is neither a store directory nor an archive file")


def _publish(events, args) -> None:
    for event in events:
        _emit(event.to_dict())
        if args.events_out:
            write_events([event], args.events_out)
        if args.webhook:
            post_event(args.webhook, event)
    sys.stdout.flush()


def cmd_scan(args) -> int:
    found = 0
    for (endpoint, prompt), points in sorted(_series_from(args.source).items()):
        if args.endpoint and endpoint != args.endpoint:
            continue
        if args.prompt is not None and prompt != args.prompt:
            continue
        events = detect_changes(points, args.w, args.window, args.k_sigma, args.floor, args.cooldown)
        log.info("%s %r: %d points, %d events", endpoint, prompt, len(points), len(events))
        _publish(events, args)
        found += len(events)
    return EXIT_CHANGE if found else EXIT_OK


def _sim_model(args) -> SyntheticModel:
    return SyntheticModel.random(args.vocab_size, args.noise_sigma, args.top_k, args.model_seed, args.logit_scale)


def cmd_simulate_record(args) -> int:
    seed = _resolve_seed(args)
    changes = [(i, VariantSpec(args.kind, args.magnitude)) for i in args.change_at]
    points = simulated_series(
        _sim_model(args), args.points, changes, seed=seed, endpoint_id=args.endpoint_id, prompt=args.prompt
    )
    out = open(args.out, "w", encoding="utf-8") if args.out != "-" else sys.stdout
    try:
        for p in points:
            out.write(json.dumps(SeriesRecord.from_point(p).to_json(), sort_keys=True, separators=(",", ":")) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_simulate_serve(args) -> int:
    from .server import SimEndpoint, SimulatorServer, sim_endpoints_from_config

    if args.config:
        endpoints = sim_endpoints_from_config(load_config(args.config))
    else:
        endpoints = {args.model_id: SimEndpoint(_sim_model(args))}
    server = SimulatorServer(endpoints, args.host, args.port)
    sys.stderr.write(f"serving {sorted(endpoints)} at {server.url}\n")
    sys.stderr.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _plan(args) -> ExperimentPlan:
    raw = load_config(args.config) if args.config else {}
    if args.methods:
        raw["methods"] = list(args.methods)
    if args.trials is not None:
        raw["trials"] = args.trials
    if args.kind:
        raw["variant_kind"] = args.kind
    if args.ladder:
        raw["ladder"] = list(args.ladder)
    if args.bootstrap is not None:
        raw["bootstrap_resamples"] = args.bootstrap
    if getattr(args, "prompts", None):
        raw["prompts"] = [_prompt_spec(p) for p in args.prompts]
    if args.seed is not None or "seeds" not in raw:
        base = _resolve_seed(args)
        raw["seeds"] = [base + i for i in range(args.n_seeds)]
    return ExperimentPlan.from_dict(raw)


def _prompt_spec(text: str) -> dict:
    prompt, sep, scale = text.rpartition(":")
    if not sep:
        return {"text": text, "noise_scale": 1.0}
    try:
        return {"text": prompt, "noise_scale": float(scale)}
    except ValueError:
        return {"text": text, "noise_scale": 1.0}


def cmd_bench(args) -> int:
    plan = _plan(args)
    result = run_benchmark(plan)
    for row in result.rows:
        if row["seed"] == "all" or args.per_seed:
            _emit(row)
    if args.out:
        for name, path in sorted(result.write(args.out).items()):
            log.info("wrote %s %s", name, path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    plan = _plan(args)
    for row in prompt_ablation(plan):
        _emit(row)
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.results)
    if path.is_dir():
        path = path / "results.jsonl"
    try:
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as exc:
        raise InvalidInputError(f"cannot read results {path}: {exc}") from exc
    by_method = defaultdict(list)
    for row in rows:
        if row.get("seed") == "all":
            by_method[row["method"]].append(row)
    if not by_method:
        raise InvalidInputError(f"{path} has no aggregate rows")
    lines = [f"{'method':<6} {'magnitude':>12} {'auc':>7} {'median':>7} {'ci_low':>7} {'ci_high':>7}  good"]
    summary = {}
    for method in sorted(by_method):
        method_rows = sorted(by_method[method], key=lambda r: r["magnitude"])
        for r in method_rows:
            lines.append(
                f"{method:<6} {r['magnitude']:>12.6g} {r['auc']:>7.3f} {r['auc_median']:>7.3f} "
                f"{r['ci_low']:>7.3f} {r['ci_high']:>7.3f}  {'yes' if r['good_detection'] else 'no'}"
            )
        summary[method] = {
            "threshold": sensitivity_threshold(method_rows),
            "monotone_median": is_nondecreasing([r["auc_median"] for r in method_rows]),
        }
    lines.append("")
    for method, info in summary.items():
        threshold = "none" if info["threshold"] is None else f"{info['threshold']:.6g}"
        lines.append(f"{method}: AUC >= 0.9 from magnitude {threshold}; median monotone: {info['monotone_median']}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def _detector_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("detector")
    g.add_argument("--w", type=int, default=24, help="points per comparison window")
    g.add_argument("--window", type=int, default=100, help="statistics in the running mean/std")
    g.add_argument("--k-sigma", type=float, default=12.0)
    g.add_argument("--floor", type=float, default=1.0, help="absolute statistic floor")
    g.add_argument("--cooldown", type=int, default=None, help="points suppressed after an event (default 2w)")
    g.add_argument("--events-out", default=None, help="append events to this JSON-lines file")
    g.add_argument("--webhook", default=None, help="POST each event to this URL")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic model")
    g.add_argument("--model-seed", type=int, default=0)
    g.add_argument("--vocab-size", type=int, default=64)
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--top-k", type=int, default=20)
    g.add_argument("--logit-scale", type=float, default=2.0)


def _plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment plan (YAML or JSON)")
    p.add_argument("--methods", type=_csv(str), default=None, help="comma list from LT,MET,MMLU")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--kind", choices=VARIANT_KINDS, default=None)
    p.add_argument("--ladder", type=_csv(float), default=None, help="comma list of magnitudes")
    p.add_argument("--bootstrap", type=int, default=None, help="bootstrap resamples")
    p.add_argument("--seed", type=int, default=None, help="first model seed")
    p.add_argument("--n-seeds", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lptrack", description="Detect changes behind LLM APIs from first-token logprobs.")
    parser.add_argument("--version", action="version", version=f"lptrack {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every resolved parameter")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("probe", help="send one logprob request per endpoint")
    _endpoint_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("survey", help="check reachability and logprob support of a fleet")
    _endpoint_flags(p)
    p.add_argument("--workers", type=int, default=16)
    p.set_defaults(func=cmd_survey)

    p = sub.add_parser("poll", help="probe a fleet on a schedule and store the results")
    _endpoint_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--interval", type=float, default=3600.0, help="seconds between ticks")
    p.add_argument("--ticks", type=int, default=None, help="stop after this many ticks")
    p.add_argument("--workers", type=int, default=16)
    p.add_argument("--fsync", action="store_true")
    p.add_argument("--seed", type=int, default=None, help="jitter seed")
    p.add_argument("--detect", action="store_true", help="run the change detector on each new point")
    _detector_flags(p)
    p.set_defaults(func=cmd_poll)

    p = sub.add_parser("test", help="permutation test between two recorded sample files")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--permutations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--exact", action="store_true", help="enumerate every split")
    p.add_argument("--last", type=int, default=None, help="use only the last N records of each file")
    p.add_argument("--text-only", action="store_true", help="match tokens on decoded text")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("scan", help="offline change detection over stored series")
    p.add_argument("source", help="store directory or exported archive")
    p.add_argument("--endpoint", default=None)
    p.add_argument("--prompt", default=None)
    p.add_argument("--seed", type=int, default=None, help="accepted for symmetry; the scan is deterministic")
    _detector_flags(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("simulate", help="synthetic endpoints")
    simsub = p.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    s = simsub.add_parser("serve", help="serve synthetic models over HTTP")
    s.add_argument("--config", help="simulator config with an endpoints list")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--model-id", default="sim")
    _model_flags(s)
    s.set_defaults(func=cmd_simulate_serve)
    s = simsub.add_parser("record", help="write a simulated series as JSON-lines records")
    _model_flags(s)
    s.add_argument("--points", type=int, default=500)
    s.add_argument("--change-at", type=int, action="append", default=[], help="index of an injected change")
    s.add_argument("--kind", choices=VARIANT_KINDS, default="logit-shift")
    s.add_argument("--magnitude", type=float, default=6.0)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--endpoint-id", default="sim")
    s.add_argument("--prompt", default="x")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_simulate_record)

    p = sub.add_parser("bench", help="ROC AUC over the difficulty ladder")
    _plan_flags(p)
    p.add_argument("--out", default=None, help="directory for result tables")
    p.add_argument("--per-seed", action="store_true", help="also print per-seed rows")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="relative performance of prompts")
    _plan_flags(p)
    p.add_argument("--prompt", dest="prompts", action="append", default=[], help="TEXT or TEXT:NOISE_SCALE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarise benchmark results")
    p.add_argument("results", help="results directory or results.jsonl")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging(level) -> None:
    # one handler on the package logger, bound to the current stderr, so
    # repeated in-process calls behave like fresh runs
    for handler in [h for h in log.handlers if getattr(h, "_lptrack_cli", False)]:
        log.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._lptrack_cli = True
    log.addHandler(handler)
    log.setLevel(level)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"error[{exc.code}]: {exc}\n")
        return EXIT_USAGE
    _configure_logging(logging.INFO if args.verbose else args.log_level.upper())
    if args.verbose:
        for key, value in sorted(vars(args).items()):
            if key != "func":
                log.info("param %s=%r", key, value)
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"error[{exc.code}]: {exc}\n")
        return EXIT_USAGE
    except (LptrackError, ConfigError) as exc:
        sys.stderr.write(f"error[{exc.code}]: {exc}\n")
        return EXIT_RUNTIME
    except OSError as exc:
        sys.stderr.write(f"error[io-error]: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
