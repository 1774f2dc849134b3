import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shakti.model import Model, ModelConfig, random_weights  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, d_model=64, n_heads=2, head_dim=32, n_kv_heads=(1, 1), ffn_hidden=128,
                window=2048, max_positions=512)
    base.update(kw)
    if isinstance(base["n_kv_heads"], int):
        base["n_kv_heads"] = (base["n_kv_heads"],) * base["n_layers"]
    return ModelConfig(**base)


def tiny_model(seed=0, std=0.02, **kw) -> Model:
    cfg = tiny_config(**kw)
    return Model(cfg, random_weights(cfg, seed, std=std))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model_factory():
    return tiny_model


# --- acceptance criteria summary ---------------------------------------------

_criteria: dict[int, str] = {}
_outcomes: dict[int, list[str]] = defaultdict(list)
_item_criterion: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test gates")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            n, title = m.args
            _criteria[n] = title
            _item_criterion[item.nodeid] = n


def pytest_runtest_logreport(report):
    n = _item_criterion.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[n].append("skipped" if report.skipped else ("passed" if report.passed else "failed"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        res = _outcomes.get(n, [])
        if not res:
            status = "NOT RUN"
        elif "failed" in res:
            status = "FAIL"
        elif all(r == "skipped" for r in res):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n:>2}: {status:<7} {_criteria[n]}  ({len(res)} checks)")
