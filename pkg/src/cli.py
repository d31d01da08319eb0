"""Command-line entry point: moefed {run,sweep,compare,serve,client}."""
import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from src import config
from src.errors import ConfigError, InfeasibleClientError, MoEFedError
from src.harness import apply_override, compare, parse_value, robustness_summary, run_experiment, sweep
from src.models import AggregationMode, ExperimentConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = config.load_experiment_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = apply_override(cfg, "seed", args.seed)
    if getattr(args, "mode", None) is not None:
        cfg = apply_override(cfg, "policy.mode", args.mode)
    return cfg


def _split(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    result = run_experiment(cfg, args.out, package_dir=args.save_packages)
    print(f"final accuracy {result.final_accuracy:.4f}, compute proxy {result.compute_proxy}, "
          f"failures {result.failure_events} -> {result.out_dir}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    rows = sweep(cfg, args.param, [parse_value(v) for v in _split(args.values)], args.out)
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load(args)
    seeds = [int(s) for s in _split(args.seeds)]
    modes = _split(args.modes)
    rows = compare(cfg, modes, seeds, args.out)
    for row in rows:
        print(",".join(str(v) for v in row))
    if "hfedmoe" in modes:
        summary = robustness_summary(rows)
        print(" ".join(f"{key}={value:g}" for key, value in summary.items()))
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from src.routes import federation

    config._validate_config()
    federation.configure(_load(args))
    uvicorn.run("src.main:app", host=args.host, port=args.port)
    return EXIT_OK


def _cmd_client(args: argparse.Namespace) -> int:
    from src.exchange import ExchangeClient, run_remote_client

    cfg = _load(args)
    with ExchangeClient(args.server) as exchange:
        results = run_remote_client(cfg, args.client_id, exchange, rounds=args.rounds,
                                    poll_interval=args.poll_interval)
    print(f"client {args.client_id}: {len(results)} rounds uploaded")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moefed", description="Federated MoE fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    modes = [m.value for m in AggregationMode]

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="Experiment JSON document")
        p.add_argument("--seed", type=int, default=None, help="Override the run seed")
        p.add_argument("--mode", choices=modes, default=None, help="Override policy.mode")

    p_run = sub.add_parser("run", help="Run one experiment")
    common(p_run)
    p_run.add_argument("--out", default=config.OUT_DIR, help="Output directory")
    p_run.add_argument("--save-packages", default=None, help="Also write every update package here")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="One run per value of a config key")
    common(p_sweep)
    p_sweep.add_argument("--param", required=True, help="Dotted config key, e.g. importance.lambda")
    p_sweep.add_argument("--values", required=True, help="Comma-separated values")
    p_sweep.add_argument("--out", default=config.OUT_DIR)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_compare = sub.add_parser(
        "compare", help="Run several modes over several seeds against unconstrained FedAvg"
    )
    p_compare.add_argument("--config", required=True)
    p_compare.add_argument("--modes", default=",".join(modes))
    p_compare.add_argument("--seeds", default="0")
    p_compare.add_argument("--out", default=config.OUT_DIR)
    p_compare.set_defaults(func=_cmd_compare)

    p_serve = sub.add_parser("serve", help="Serve the round coordinator over HTTP")
    common(p_serve)
    p_serve.add_argument("--host", default="0.0.0.0")
    p_serve.add_argument("--port", type=int, default=config.PORT)
    p_serve.set_defaults(func=_cmd_serve)

    p_client = sub.add_parser("client", help="Train one client against a running server")
    common(p_client)
    p_client.add_argument("--client-id", type=int, required=True)
    p_client.add_argument("--server", default=config.SERVER_URL)
    p_client.add_argument("--rounds", type=int, default=None)
    p_client.add_argument("--poll-interval", type=float, default=1.0)
    p_client.set_defaults(func=_cmd_client)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        logger.error(f"file not found: {exc}")
        return EXIT_CONFIG
    except (ValidationError, ConfigError, InfeasibleClientError) as exc:
        logger.error(f"invalid configuration: {exc}")
        return EXIT_CONFIG
    except MoEFedError as exc:
        logger.error(f"run failed: {exc}")
        return EXIT_RUNTIME
    except ValueError as exc:
        # settings such as a missing package secret
        logger.error(f"invalid configuration: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
