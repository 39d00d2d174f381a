"""servehub-bench: run the timing experiments against a local or remote stack.

Self-hosted by default: boots a full deployment in-process, publishes the
requested synthetic servable (noop, echo, sleep:<ms>, spin:<ms>), runs the
experiment over REST, and writes the report JSON plus a CSV and a figure
alongside it.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from servehub.domain import ServableId, canonical_json
from servehub.bench.harness import (
    BenchClient,
    ExperimentAborted,
    SelfHostedBench,
    run_batching,
    run_memoization,
    run_overhead_decomposition,
    run_replica_scaling,
)
from servehub.bench.report import BenchmarkReport

EXPERIMENT_CHOICES = ("decomposition", "memoization", "batching", "scaling")


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servehub-bench", description="servehub timing experiments"
    )
    parser.add_argument("experiment", choices=EXPERIMENT_CHOICES)
    parser.add_argument(
        "--servable",
        default="noop",
        help="synthetic kind (noop, echo, sleep:<ms>, spin:<ms>) in self-hosted mode, "
        "or ns/name:version with --server",
    )
    parser.add_argument("--n", type=int, default=100, help="requests per run")
    parser.add_argument("--sizes", type=_int_list, default=[1, 5, 10, 25, 50, 100], help="batching sizes")
    parser.add_argument("--replicas", type=_int_list, default=[1, 2, 4], help="replica counts for scaling")
    parser.add_argument("--out", type=Path, help="report JSON path; CSV and PNG land alongside")
    parser.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    parser.add_argument("--server", help="existing deployment base URL (disables self-hosting)")
    parser.add_argument("--token", help="bearer token for --server")
    parser.add_argument("--workdir", type=Path, help="state directory for self-hosted mode")
    return parser


def _write_outputs(payload, table: str, out: Path | None, figure_renderer, no_figures: bool) -> None:
    print(table)
    if out is None:
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(canonical_json(payload.to_payload() if hasattr(payload, "to_payload") else payload) + b"\n")
    csv_path = out.with_suffix(".csv")
    if isinstance(payload, BenchmarkReport):
        csv_path.write_text(payload.csv_text())
    print(f"report written to {out}")
    if not no_figures and figure_renderer is not None:
        figure_path = figure_renderer(out.with_suffix(".png"))
        print(f"figure written to {figure_path}")


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    from servehub.bench import figures

    if args.server:
        if args.experiment == "scaling":
            print("scaling redeploys managers and only runs self-hosted", file=sys.stderr)
            sys.exit(1)
        if not args.token:
            print("--server requires --token", file=sys.stderr)
            sys.exit(1)
        client = BenchClient(args.server, args.token)
        servable = ServableId.parse(args.servable)
        try:
            _run_remote(args, client, servable, figures)
        finally:
            client.close()
        return

    workdir = args.workdir or Path(tempfile.mkdtemp(prefix="servehub-bench-"))
    replicas = args.replicas[0] if args.experiment == "scaling" else 1
    with SelfHostedBench(workdir, args.servable, replicas=replicas) as bench:
        if args.experiment == "scaling":
            report = run_replica_scaling(bench, args.replicas, n=args.n)
            _write_outputs(
                report,
                report.table(),
                args.out,
                lambda p: figures.render_report(report, p),
                args.no_figures,
            )
            return
        client = bench.client()
        try:
            _run_remote(args, client, bench.servable, figures)
        finally:
            client.close()


def _run_remote(args, client: BenchClient, servable: ServableId, figures) -> None:
    try:
        if args.experiment == "decomposition":
            report = run_overhead_decomposition(client, servable, n_requests=args.n)
            _write_outputs(
                report, report.table(), args.out,
                lambda p: figures.render_report(report, p), args.no_figures,
            )
        elif args.experiment == "memoization":
            result = run_memoization(client, servable, n=args.n)
            _write_outputs(
                result, result.table(), args.out,
                lambda p: figures.render_memoization(result, p), args.no_figures,
            )
        elif args.experiment == "batching":
            report = run_batching(client, servable, sizes=args.sizes)
            _write_outputs(
                report, report.table(), args.out,
                lambda p: figures.render_report(report, p), args.no_figures,
            )
    except ExperimentAborted as exc:
        print(f"experiment aborted: {exc}", file=sys.stderr)
        print(json.dumps(exc.partial.to_payload(), indent=2)[:2000], file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
