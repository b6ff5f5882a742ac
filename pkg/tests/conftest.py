import os
import tempfile
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.yaml"

# criterion number -> (passed, detail); filled by test_acceptance
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def desk():
    """Workspace for the desk-scale acceptance run.

    Artifacts live under ``runs/acceptance`` and are reused when their cache
    keys match. ``FEATREGEN_FRESH=1`` builds everything in a temporary
    directory instead.
    """
    from featregen.cli import RunConfig, Workspace

    cfg = RunConfig.load(DESK_CONFIG)
    if os.environ.get("FEATREGEN_FRESH"):
        out = Path(tempfile.mkdtemp(prefix="featregen-desk-"))
    else:
        out = ROOT / "runs" / "acceptance"
    return Workspace(cfg.override("output_dir", str(out)))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
