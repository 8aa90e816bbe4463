import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from clearhug.synth import CLASSES, SynthConfig, generate_record  # noqa: E402
from clearhug.tokenizer import TokenizedDataset, tokenize  # noqa: E402

torch.set_num_threads(1)


def make_dataset(n, N=3, T_b=8, seed=0, start=0):
    cfg = SynthConfig(seed=seed, n_records=max(n + start, 1))
    toks = [tokenize(generate_record(cfg, i)[0], N, T_b) for i in range(start, start + n)]
    return TokenizedDataset.from_records(toks, sorted(CLASSES))


@pytest.fixture(scope="session")
def toy_sets():
    """Small train/val/test tokenized sets matching the toy model (N 3, T_b 8)."""
    return make_dataset(40), make_dataset(12, start=40), make_dataset(16, start=52)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 11


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as report:`` records pass/fail plus the numbers put in ``report``."""
    results = request.config.stash[ACCEPTANCE]

    @contextmanager
    def record(number, title):
        report = {}
        try:
            yield report
        except BaseException:
            results[number] = (title, False, report)
            raise
        results[number] = (title, True, report)

    return record


def _fmt_detail(report):
    return "  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items())


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in results:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        title, ok, report = results[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}"
        if report:
            line += "  [" + _fmt_detail(report) + "]"
        terminalreporter.write_line(line)
