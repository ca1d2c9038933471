import contextlib
import time

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(pytestconfig, capsys):
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    lines = pytestconfig.stash.setdefault(ACCEPTANCE, [])

    def emit(line):
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")

    @contextlib.contextmanager
    def run(name, limit=None):
        note = {}
        t0 = time.perf_counter()
        try:
            yield note
        except BaseException as exc:
            msg = str(exc).strip().splitlines()[0][:120] if str(exc).strip() else ""
            emit(f"FAIL  {name}  [{type(exc).__name__}: {msg}]")
            raise
        dt = time.perf_counter() - t0
        budget = f"{dt:.1f}s" + (f" of {limit:.0f}s" if limit else "")
        detail = ", ".join(f"{k}={v}" for k, v in note.items())
        if limit is not None and dt > limit:
            emit(f"FAIL  {name}  [runtime {budget}] {detail}")
            raise AssertionError(f"{name}: runtime {dt:.1f}s exceeds {limit}s")
        emit(f"PASS  {name}  [{budget}] {detail}")

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
