"""Tests for console and JSON logging configuration.

CLI commands print JSON results on stdout, so per-epoch INFO lines must stay
off the console by default; --verbose restores them. The JSON file log keeps
full detail regardless.
"""

from __future__ import annotations

import io
import json
import logging

import pytest

from ssrl.logging import (
    ConfigError,
    NumericalError,
    SSRLError,
    _CompactConsoleRenderer,
    _mute_third_party,
    configure_logging,
    get_logger,
)


@pytest.fixture
def restore_logging():
    root = logging.getLogger()
    saved_handlers = root.handlers[:]
    saved_level = root.level
    yield root
    root.handlers[:] = saved_handlers
    root.setLevel(saved_level)


@pytest.fixture
def console_capture(restore_logging):
    """Run the real ``configure_logging`` and redirect its console handler to a buffer."""

    def configure(verbose: bool) -> io.StringIO:
        configure_logging(verbose=verbose, json_log=None)
        handlers = [h for h in restore_logging.handlers if type(h) is logging.StreamHandler]
        assert len(handlers) == 1, "expected exactly one console handler"
        buffer = io.StringIO()
        handlers[0].setStream(buffer)
        return buffer

    return configure


def test_info_suppressed_by_default(console_capture):
    output = console_capture(verbose=False)
    logger = get_logger("ssrl.test")

    logger.info("ssrl epoch", epoch=3)
    logger.warning("sinkhorn did not converge", violation=0.01)

    text = output.getvalue()
    assert "ssrl epoch" not in text
    assert "sinkhorn did not converge" in text


def test_info_shown_with_verbose(console_capture):
    output = console_capture(verbose=True)
    logger = get_logger("ssrl.test")

    logger.info("ssrl epoch", epoch=3)
    logger.debug("Loaded config", path="run.json")

    text = output.getvalue()
    assert "ssrl epoch" in text
    assert "Loaded config" in text


def test_json_file_log(restore_logging, tmp_path):
    path = tmp_path / "logs" / "run.log"
    configure_logging(verbose=False, json_log=str(path))
    get_logger("ssrl.test").info("warmup epoch", epoch=1, loss=0.5)
    for handler in restore_logging.handlers:
        handler.flush()

    entries = [json.loads(line) for line in path.read_text().splitlines()]
    entry = next(e for e in entries if e["event"] == "warmup epoch")
    assert entry["epoch"] == 1
    assert entry["loss"] == 0.5
    assert entry["level"] == "info"
    assert "timestamp" in entry


def test_compact_renderer_shortens_floats():
    line = _CompactConsoleRenderer()(
        None, "info", {"event": "ssrl epoch", "level": "info", "nmi": 0.123456789, "epoch": 4}
    )
    assert line == "[info] ssrl epoch nmi=0.123457 epoch=4"


def test_compact_renderer_omits_timestamp():
    line = _CompactConsoleRenderer()(
        None, "warning", {"event": "numerical abort", "timestamp": "2026-01-01T00:00:00Z"}
    )
    assert line == "[warning] numerical abort"


@pytest.mark.parametrize(
    ("name", "shown"),
    [
        ("ssrl.pipeline", True),
        ("matplotlib.font_manager", False),
        ("PIL.PngImagePlugin", False),
        ("numpy", True),
    ],
)
def test_third_party_muted_on_console(name, shown):
    record = logging.LogRecord(name, logging.WARNING, __file__, 1, "msg", None, None)
    assert _mute_third_party(record) is shown


def test_exit_codes():
    assert SSRLError.exit_code == 1
    assert ConfigError.exit_code == 2
    assert NumericalError.exit_code == 3
    assert issubclass(NumericalError, SSRLError)
