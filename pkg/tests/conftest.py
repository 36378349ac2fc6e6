import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from msdm.geodata import GeoRaster, GeoTransform, compute_band_stats

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_raster(data, origin=(0.0, 10.0), pixel=(1.0, 1.0), nodata=None, name="r", stats=True) -> GeoRaster:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    t = GeoTransform(origin[0], origin[1], pixel[0], pixel[1], "test")
    r = GeoRaster(data, t, tuple(f"b{i}" for i in range(data.shape[0])), nodata=nodata, name=name)
    return compute_band_stats(r) if stats else r


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_raster(rng):
    return make_raster(rng.standard_normal((3, 20, 30)), origin=(100.0, 50.0), pixel=(0.5, 0.25))


# --- acceptance reporting -------------------------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")
    config.addinivalue_line("markers", "slow: long-running training experiment")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, [title, True, []])
    if rep.failed:
        entry[1] = False
    detail = dict(item.user_properties).get("detail")
    if rep.when == "call" and detail:
        entry[2].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[n]
        extra = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}{extra}")
