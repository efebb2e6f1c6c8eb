import contextlib
import io
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deanet.cli import main  # noqa: E402

HELD_OUT = ("000", "001", "002", "003")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, parsed JSON stdout or None)."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["-q", *map(str, argv)])
    text = buf.getvalue()
    try:
        return code, json.loads(text) if text.strip() else None
    except json.JSONDecodeError:
        return code, text


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Desk-scale workflow: 8 training pairs, 4 held-out pairs, 2000 iterations with the default profile."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    assert run_cli("synth", "--procedural", 8, "--seed", 0, "--out", root / "train")[0] == 0
    assert run_cli("synth", "--procedural", 4, "--seed", 1, "--out", root / "held")[0] == 0
    code, report = run_cli("train", "--data", root / "train", "--out", root / "w.deaw")
    assert code == 0, report
    for d in ("pred", "gt", "hazy"):
        (root / d).mkdir()
    for i in HELD_OUT:
        c, _ = run_cli("infer", "--weights", root / "w.deaw", "--input", root / "held" / f"{i}_hazy.ppm",
                       "--output", root / "pred" / f"{i}.ppm")
        assert c == 0
        shutil.copy(root / "held" / f"{i}_clean.ppm", root / "gt" / f"{i}.ppm")
        shutil.copy(root / "held" / f"{i}_hazy.ppm", root / "hazy" / f"{i}.ppm")
    losses = [json.loads(s)["loss"] for s in (root / "w.deaw.loss.jsonl").read_text().splitlines()]
    return {"root": root, "report": report, "losses": losses, "elapsed": time.perf_counter() - t0}


# acceptance criteria register one line each here; printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
