import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """A config small enough to train end to end in a few seconds."""
    from mgpkad.config import RunConfig

    return RunConfig(
        instances_per_category=4, surface_points=128, samples_per_shape=512, image_res=8,
        d_img=16, d_geo=16, d_p=8, d_model=16, heads=2, encoder_hidden=16,
        frontend_hidden=(16, 16), kan_dims=(8, 4, 1), prototype_points=32,
        batch_size=4, queries_per_shape=16, steps=20, adapt_every=10, ckpt_every=10,
        eval_resolution=16, gt_resolution=24, eval_samples=500,
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    from mgpkad import pipeline as P

    ds = P.generate_dataset(tiny_cfg)
    lib, rows = P.build_priors(ds, tiny_cfg)
    return ds, lib, rows


# One PASS/FAIL line per acceptance criterion, printed after the run.

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = item.config._criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    if rep.failed or (rep.when == "setup" and rep.skipped):
        entry["ok"] = False
    if rep.when == "call":
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        c = criteria[number]
        line = f"criterion {number:2d} {'PASS' if c['ok'] else 'FAIL'}  {c['title']}"
        terminalreporter.write_line(line)
        for note in c["notes"]:
            terminalreporter.write_line(f"    {note}")
