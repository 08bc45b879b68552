"""
Command-line application: argument parsing, config ingestion and error reporting.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from src.errors import ArtifactIOError, ConfigError, DWError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

PROG = "hetero-dw"


class ArgumentParser(argparse.ArgumentParser):
    """
    ArgumentParser that raises ConfigError instead of exiting.
    """
    def error(self, message: str):
        raise ConfigError(message)


def parse_float_list(text: Any, name: str) -> List[float]:
    """
    Parse a comma-separated list (or a list from a config file) of reals.

    Args:
        text: "0.5,0.4,..." or a sequence of numbers
        name: Option name used in error messages

    Returns:
        List[float]: The parsed values
    """
    items = text if isinstance(text, (list, tuple)) else str(text).split(",")
    values = []
    for position, item in enumerate(items, start=1):
        try:
            values.append(float(str(item).strip()))
        except ValueError:
            raise ConfigError(f"{name}: entry {position} ({str(item).strip()!r}) is not a number") from None
    if not values:
        raise ConfigError(f"{name}: empty list")
    return values


def load_config_file(path: Path) -> Dict[str, Any]:
    """
    Read a flat key/value config document in JSON or TOML.

    Keys use the long option names, with dashes or underscores.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"config {path} is malformed: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a key/value document")
    return {str(key).replace("-", "_"): value for key, value in data.items()}


def resolve_settings(args: argparse.Namespace, defaults: Dict[str, Any]) -> Dict[str, Any]:
    """
    Merge settings with precedence flags > config file > defaults.

    Args:
        args: Parsed arguments; options not given on the command line are None
        defaults: Default value of every setting the command accepts

    Returns:
        Dict[str, Any]: The effective settings
    """
    settings = dict(defaults)
    if getattr(args, "config", None):
        config = load_config_file(args.config)
        unknown = sorted(set(config) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        settings.update(config)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def format_error(error: DWError) -> str:
    message = " ".join(str(error).split())
    return f"error code={error.exit_code} kind={type(error).__name__} message={message}"


def build_parser() -> ArgumentParser:
    from src.cli import commands

    parser = ArgumentParser(prog=PROG, description="Heterogeneous Deffuant-Weisbuch opinion dynamics toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    subparsers = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    subparsers.required = True

    for spec in commands.COMMANDS:
        sub = subparsers.add_parser(spec.name, help=spec.help)
        sub.add_argument("--config", type=Path, help="JSON or TOML file with option values")
        for flags, options in spec.arguments:
            sub.add_argument(*flags, default=None, **options)
        sub.set_defaults(handler=spec.handler, defaults=spec.defaults)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main entry point for the command-line application.

    Returns:
        int: Process exit code
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        level=logging.DEBUG if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        settings = resolve_settings(args, args.defaults)
        handler: Callable[[Dict[str, Any]], int] = args.handler
        return handler(settings)
    except DWError as e:
        logger.debug("Command failed", exc_info=True)
        print(format_error(e), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        error = ArtifactIOError(str(e))
        print(format_error(error), file=sys.stderr)
        return error.exit_code
