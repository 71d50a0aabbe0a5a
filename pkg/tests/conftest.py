import numpy as np
import pytest

from ecogrow.datamodel import save_panel
from ecogrow.synth import SyntheticSpec, generate


@pytest.fixture(scope="session")
def six_city_panel():
    return generate(SyntheticSpec(n=6, n_years=5, clusters=2, seed=3, n_industries=5, n_categories=4))


@pytest.fixture(scope="session")
def small_panel():
    return generate(SyntheticSpec(n=12, n_years=6, clusters=3, seed=11, n_industries=6, n_categories=5))


@pytest.fixture
def panel_dir(tmp_path, six_city_panel):
    save_panel(six_city_panel, tmp_path / "panel")
    return tmp_path / "panel"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build_panel(n, years=(2020,), coords=None, flows=None, poi=None, regs=None, features=None):
    """Minimal CityPanel around whichever tables a test cares about."""
    from ecogrow.datamodel import CityPanel

    years = list(years)
    ny = len(years)
    rng = np.random.default_rng(0)
    if coords is None:
        coords = np.column_stack([np.linspace(20, 30, n), np.linspace(100, 110, n)])
    if flows is None:
        flows = np.ones((n, n, ny))
    if poi is None:
        poi = np.ones((n, 2, ny))
    if regs is None:
        regs = rng.integers(1, 5, size=(n, 3, ny)).astype(float)
    if features is None:
        features = rng.uniform(1, 10, size=(n, ny, 4))
    flows, poi, regs = (np.asarray(a, float).reshape(a.shape[0], a.shape[1], ny) for a in (flows, poi, regs))
    return CityPanel(
        [f"c{i}" for i in range(n)], years, ["gdp", "population", "employment", "new_companies"],
        np.asarray(features, float), [f"i{k}" for k in range(regs.shape[1])], regs,
        [f"p{k}" for k in range(poi.shape[1])], poi, flows, np.asarray(coords, float), years, years, years,
    )


@pytest.fixture
def make_panel():
    return build_panel


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _ACCEPTANCE[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
