"""
spraygrid command-line interface
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from app.commands import fields, planning, regression
from app.commands.common import LOG_FORMAT, emit, prepare_output, run_config
from app.services.raster_io import write_json
from app.utils.errors import EXIT_CODES, SprayGridError
from app.utils.setting import SERVICE, get_config

logger = logging.getLogger(__name__)

EPILOG = """exit codes:
  0  success
  1  unexpected error
  2  usage error (unknown flag, missing argument)
  3  schema / validation error
  4  grid alignment or coverage error
  5  parameter error
  6  computation error (fit, solver, metrics, infeasible target, generation)
  7  integrity error (declared vs recomputed excess)
  8  file / raster format error

every failure prints {"error": {"code", "message", "exit_code"}} as the last stdout line
"""


class UsageError(SprayGridError):
    code = "UsageError"
    exit_code = EXIT_CODES["usage"]


class JsonArgumentParser(argparse.ArgumentParser):
    """사용법 오류도 JSON 에러로 출력하고 종료 코드 2"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        error = UsageError(f"{self.prog}: {message}")
        sys.stdout.write(json.dumps(error.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
        sys.exit(error.exit_code)


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(
        prog=SERVICE,
        description="Drone / satellite weed raster analytics and coverage-target spray planning",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=JsonArgumentParser)
    subparsers.required = True

    fields.register(subparsers)
    regression.register(subparsers)
    planning.register(subparsers)
    return parser


def setup_logging() -> None:
    config = get_config()
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    """
    CLI 진입점

    Returns:
        종료 코드
    """
    args = build_parser().parse_args(argv)
    setup_logging()

    try:
        run = run_config(args, args.inputs(args))
        prepare_output(run)
        logger.info(f"Running {args.command} (seed={run.seed}, threads={run.threads})")
        result = args.handler(args, run)
        if run.output is not None:
            write_json(result.summary, f"{run.output}/summary.json")
        emit(result, sys.stdout)
        return EXIT_CODES["ok"]

    except SprayGridError as e:
        logger.error(f"{args.command} failed: {e.message}")
        sys.stdout.write(json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
        return e.exit_code

    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        error = {"error": {"code": "InternalError", "message": str(e), "exit_code": EXIT_CODES["unexpected"]}}
        sys.stdout.write(json.dumps(error, sort_keys=True, separators=(",", ":")) + "\n")
        return EXIT_CODES["unexpected"]

    finally:
        for handler in list(logging.getLogger().handlers):
            if isinstance(handler, logging.FileHandler):
                logging.getLogger().removeHandler(handler)
                handler.close()


if __name__ == "__main__":
    sys.exit(main())
