# app/main.py
"""
coxmt command line.

    python -m app.main synth configs/synthetic_small.json --output runs/data/small
    python -m app.main protocol configs/protocol_small.json --workers 4
    python -m app.main compare runs/coxmt runs/baseline

Exit codes: 0 ok, 2 input/config error, 3 training divergence, 4 protocol violation.
"""
import argparse
import json
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv


def _parse_overrides(pairs: List[str]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {pair!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _job_arguments(parser: argparse.ArgumentParser, workers: bool = True) -> None:
    parser.add_argument("config", help="JSON job config (version 1)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.epochs=5 (repeatable)")
    if workers:
        parser.add_argument("--workers", type=int, default=None,
                            help="process-pool size (default: COXMT_WORKERS or CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coxmt", description="Semi-supervised Cox survival models")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: COXMT_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="preprocess expression/clinical CSVs into a dataset archive")
    p.add_argument("--expression", required=True, help="expression CSV (samples × genes by default)")
    p.add_argument("--clinical", required=True, help="clinical CSV with sample_id,time,status")
    p.add_argument("--output", default=None, help="archive path (.npz is appended)")
    p.add_argument("--patch-dir", default=None, help="directory of per-sample patch-feature files")
    p.add_argument("--reference", default=None, help="reference expression CSV for housekeeping normalization")
    p.add_argument("--housekeeping", default=None, help="file with one housekeeping gene id per line")
    p.add_argument("--unlabeled-ids", default=None, help="file with one unlabeled sample id per line")
    p.add_argument("--unlabeled-expression", default=None,
                   help="expression CSV of an extra unlabeled cohort, stacked on the shared genes")
    p.add_argument("--top-k", type=int, default=4000, help="keep the k most variable genes (0 keeps all)")
    p.add_argument("--orientation", choices=["samples_as_rows", "genes_as_rows"], default="samples_as_rows",
                   help="layout of the expression CSV")
    p.add_argument("--dedup", action="store_true", help="keep the first of repeated sample ids")
    p.add_argument("--no-log", action="store_true", help="skip the log2(1+x) transform")
    p.add_argument("--image-only", action="store_true",
                   help="use mean patch features as the model input (needs --patch-dir)")

    p = sub.add_parser("synth", help="generate a synthetic Cox cohort archive")
    p.add_argument("config", help="JSON synthetic config")
    p.add_argument("--output", default=None, help="archive path (.npz is appended)")
    p.add_argument("--max-patches", type=int, default=0, help="also generate 1..N patch rows per sample")
    p.add_argument("--patch-width", type=int, default=1024, help="patch feature width")
    p.add_argument("--csv-dir", default=None, help="also write expression/clinical CSVs that ingest back to the cohort")

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _job_arguments(p, workers=False)

    p = sub.add_parser("protocol", help="repeated k-fold protocol → run ledger")
    _job_arguments(p)
    p.add_argument("--enqueue", action="store_true", help="put the job on the Redis queue instead of running it")

    p = sub.add_parser("ablate", help="validation error per value of one hyperparameter")
    _job_arguments(p)

    p = sub.add_parser("scaling", help="protocol per number of added unlabeled samples")
    _job_arguments(p)

    p = sub.add_parser("compare", help="compare two run ledgers (means, box stats, rank-sum p)")
    p.add_argument("ledger_a", help="ledger directory or ledger.json")
    p.add_argument("ledger_b", help="ledger directory or ledger.json")
    p.add_argument("--output", default=None, help="directory for comparison.json")

    p = sub.add_parser("km-export", help="KM curves of the median-risk strata of a trained model")
    p.add_argument("--dataset", required=True, help="dataset archive")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--output", required=True, help="directory for the curve CSVs")

    p = sub.add_parser("job-status", help="status of an enqueued protocol job")
    p.add_argument("job_id", help="RQ job id")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    # env-dependent modules are imported after .env is loaded
    from app.cli import commands
    from app.cli.runner import EXIT_INPUT, run_command
    from app.cli.schemas import OUTPUT_ROOT, load_job_config
    from app.experiment.protocol import DEFAULT_WORKERS
    from app.logging_utils import set_level

    if args.log_level:
        set_level(args.log_level)

    if args.command == "ingest":
        return run_command(
            commands.cmd_ingest, args.expression, args.clinical, args.output or f"{OUTPUT_ROOT}/dataset",
            patch_dir=args.patch_dir, reference_expr=args.reference, housekeeping_path=args.housekeeping,
            unlabeled_ids_path=args.unlabeled_ids, unlabeled_expr_path=args.unlabeled_expression,
            top_k=args.top_k, orientation=args.orientation, dedup=args.dedup, log=not args.no_log, image_only=args.image_only,
        )
    if args.command == "synth":
        return run_command(commands.cmd_synth, args.config, args.output or f"{OUTPUT_ROOT}/synthetic",
                           max_patches=args.max_patches, patch_width=args.patch_width, csv_dir=args.csv_dir)
    if args.command == "compare":
        return run_command(commands.cmd_compare, args.ledger_a, args.ledger_b, args.output)
    if args.command == "km-export":
        return run_command(commands.cmd_km_export, args.dataset, args.checkpoint, args.output)
    if args.command == "job-status":
        from app.queue import get_job_status
        return run_command(get_job_status, args.job_id)

    try:
        overrides = _parse_overrides(args.set)
    except argparse.ArgumentTypeError as exc:
        print(f"[CLI] {exc}", file=sys.stderr)
        return EXIT_INPUT

    def _with_job(fn, **kwargs):
        def _run():
            job = load_job_config(args.config, overrides)
            if "workers" in kwargs:
                kwargs["workers"] = args.workers or job.workers or DEFAULT_WORKERS
            return fn(job, **kwargs)
        return _run

    if args.command == "train":
        return run_command(_with_job(commands.cmd_train))
    if args.command == "protocol" and args.enqueue:
        def _enqueue():
            from app.queue import enqueue_protocol_job
            job = load_job_config(args.config, overrides)
            queued = enqueue_protocol_job(job.model_dump(mode="json"), "protocol")
            return {"job_id": queued.id, "queue": queued.origin}
        return run_command(_enqueue)
    handlers = {"protocol": commands.cmd_protocol, "ablate": commands.cmd_ablate, "scaling": commands.cmd_scaling}
    return run_command(_with_job(handlers[args.command], workers=None))


if __name__ == "__main__":
    sys.exit(main())
