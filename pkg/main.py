import logging
import sys
import uuid

from dotenv import load_dotenv
from pydantic import ValidationError

from cli.commands import build_parser
from core.config import settings
from core.errors import ConfigurationError, DasnetError

# Configure logging based on environment settings
log_level = getattr(logging, settings.LOG_LEVEL, logging.INFO)
logging.basicConfig(
    level=log_level,
    format="%(asctime)s - %(levelname)s - %(message)s",
    handlers=[
        logging.StreamHandler(),
        logging.FileHandler(settings.LOG_FILE),
    ],
)
logger = logging.getLogger(__name__)


load_dotenv()


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; usage errors are configuration errors here
        return 0 if e.code == 0 else ConfigurationError.exit_code

    logger.info(f"{settings.PROJECT_NAME} {settings.PROJECT_VERSION}: {args.command}")
    try:
        status = args.handler(args)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        logger.warning(f"Invalid configuration at {location}: {first['msg']}")
        return ConfigurationError.exit_code
    except FileNotFoundError as exc:
        logger.warning(f"File not found: {exc}")
        return ConfigurationError.exit_code
    except DasnetError as exc:
        logger.warning(f"{type(exc).__name__}: {exc.message}")
        if settings.DEBUG:
            logger.exception(exc)
        return exc.exit_code
    except Exception as exc:
        error_id = str(uuid.uuid4())
        logger.error(f"Unhandled exception: {exc} (Error ID: {error_id})")
        logger.exception(exc)
        return 2
    logger.info(f"{args.command} finished")
    return status


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
