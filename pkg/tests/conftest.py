import json

import numpy as np
import pytest

import semprop
from semprop.hierarchy import load_hierarchy, load_hierarchy_file
from semprop.model import ModelConfig

TINY_MODEL = dict(m=4, m0=6, bottleneck=2, stem_channels=(4, 4, 6, 6, 6))


@pytest.fixture(scope="session")
def concept_tree():
    return load_hierarchy_file(semprop.data_path("concept_tree.json"))


@pytest.fixture(scope="session")
def concept_tree_doc():
    with open(semprop.data_path("concept_tree.json")) as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def toy_tree():
    return load_hierarchy_file(semprop.data_path("toy_tree.json"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    d = dict(TINY_MODEL)
    d.update(kw)
    return ModelConfig(**d)


def names(h, ids):
    return {h.name_of(i) for i in ids}


# --- acceptance reporting: one PASS/FAIL line per criterion -----------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    ok = rep.passed and rep.when == "call"
    if number in _ACCEPTANCE:  # parametrized criteria pass only if every case does
        _, prev_ok, prev_detail = _ACCEPTANCE[number]
        ok = ok and prev_ok
        detail = "; ".join(d for d in (prev_detail, detail) if d)
    _ACCEPTANCE[number] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
