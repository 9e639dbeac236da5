import json
import os
from pathlib import Path

import pytest

ACCEPTANCE: list[str] = []

GOLDEN = Path(__file__).parent / "golden"


def golden(name: str, values: dict) -> dict:
    """Pinned values from ``tests/golden``; ``DMGN_WRITE_GOLDEN=1`` rewrites them."""
    path = GOLDEN / name
    if os.environ.get("DMGN_WRITE_GOLDEN") == "1":
        GOLDEN.mkdir(exist_ok=True)
        path.write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    if not path.is_file():
        pytest.fail(f"golden file {path} missing; run once with DMGN_WRITE_GOLDEN=1 after verifying")
    return json.loads(path.read_text())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
