import sys
from importlib import resources
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dlgc.skills import load_skills, snapshot  # noqa: E402

DATA = Path(__file__).parent / "data"
CORPUS = DATA / "corpus"


def scenario_files():
    root = resources.files("dlgc.data") / "scenarios"
    return sorted(str(p) for p in root.iterdir() if p.name.endswith(".txt"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")
    config.stash[RESULTS] = {}


RESULTS = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if rep.failed:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
        detail = "; ".join(x for x in (detail, msg) if x)
    item.config.stash[RESULTS][n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail = results[n]
        line = f"[{status}] {n:>2}. {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def registry():
    return load_skills()


@pytest.fixture
def fresh_registry(registry):
    """Registry whose backends can be mutated without affecting other tests."""
    return snapshot(registry)


@pytest.fixture(scope="session")
def templates():
    from dlgc.synth import load_templates
    return load_templates()


@pytest.fixture(scope="session")
def pairs(registry, templates):
    from dlgc.synth import expand
    return expand(registry, templates, depth=2, limit=10 ** 6, seed=0)


@pytest.fixture(scope="session")
def index(registry, templates, pairs):
    from dlgc.synth import build_parser_index, turn_pairs
    return build_parser_index(pairs + turn_pairs(registry, templates, 0), registry)


@pytest.fixture
def runtime(registry, index):
    from dlgc.dialogue import Runtime
    return Runtime(snapshot(registry), index=index)
