"""
Semi-Implicit Studio - Run Logging

Console logging goes through rich; every run also gets its own run.log in
the output directory with timestamped lines, so a finished (or crashed) run
can be read back without the terminal scrollback.
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

from rich.console import Console
from rich.logging import RichHandler

from config.settings import RunDefaults

_NOISY_LOGGERS = ("matplotlib", "urllib3", "numexpr", "asyncio")
_FILE_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"

console = Console(stderr=True)


def configure_logging(level: Union[str, int] = RunDefaults.LOG_LEVEL) -> None:
    """Install a single RichHandler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(console=console, show_path=False, rich_tracebacks=True))
    root.setLevel(level)
    for name in _NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)


class RunLogger:
    """Per-run log: explicit log() calls go to the console and run.log;
    library records at INFO and above are mirrored into run.log."""

    def __init__(self, output_dir: Union[str, Path], name: str = "run.log"):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.output_dir / name
        self.log_file = open(self.log_path, "w", buffering=1, encoding="utf-8")
        self._handler: Optional[logging.Handler] = logging.StreamHandler(self.log_file)
        self._handler.setLevel(logging.INFO)
        self._handler.setFormatter(logging.Formatter(_FILE_FORMAT, datefmt="%H:%M:%S"))
        logging.getLogger().addHandler(self._handler)

    def log(self, msg: str) -> None:
        """Write a status line to both the console and the run log."""
        ts = datetime.now().strftime("%H:%M:%S")
        line = f"[{ts}] {msg}"
        console.print(line, markup=False, highlight=False)
        if not self.log_file.closed:
            self.log_file.write(line + "\n")

    def close(self) -> None:
        if self._handler is not None:
            logging.getLogger().removeHandler(self._handler)
            self._handler = None
        if not self.log_file.closed:
            self.log_file.close()

    def __enter__(self) -> "RunLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
