import numpy as np
import pytest

from rapa import data, nets


@pytest.fixture(scope="session")
def small_splits():
    # full-contrast glyphs train fast; these fixtures only exercise plumbing
    easy = dict(noise=0.1, contrast=1.0, background=0.0)
    train = data.generate_shapeset(data.ShapeSetConfig(samples_per_class=64, seed=100, **easy))
    test = data.generate_shapeset(data.ShapeSetConfig(samples_per_class=16, seed=101, **easy))
    return train, test


@pytest.fixture(scope="session")
def small_models(small_splits):
    """Quickly trained cnn_bn and mlp; good enough for plumbing tests."""
    train, test = small_splits
    out = {}
    for name, seed, epochs in (("cnn_bn", 1, 6), ("mlp", 2, 30)):
        g = nets.build_model(name)
        p, _ = nets.train(g, nets.init_params(g, seed), train, nets.TrainHyper(epochs=epochs, seed=seed))
        out[name] = (g, nets.to_stored_precision(p))
    return out


@pytest.fixture(scope="session")
def attack_batch(small_splits):
    _, test = small_splits
    return data.assign_targets(test.subset(np.arange(12)), "random_excluding_true", 0)


# -- acceptance reporting ---------------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal summary;
# a test may attach a measured detail with ``record_property("detail", ...)``.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = f"error in {rep.when}: {rep.longrepr.reprcrash.message if hasattr(rep.longrepr, 'reprcrash') else ''}"
    _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}" + (f" | {detail}" if detail else ""))
