import pytest

from hsfs.classifier import MlpConfig, fit_pixel_classifier
from hsfs.pipeline import SplitSpec, pixelize, split, undersample_uniform
from hsfs.synthgen import default_spec, render_scene

# Seed of the default synthetic scene used by the end-to-end checks.
SCENE_SEED = 3


@pytest.fixture(scope="session")
def default_scene():
    return render_scene(default_spec(64, 8, seed=SCENE_SEED))


@pytest.fixture(scope="session")
def default_splits(default_scene):
    ds = undersample_uniform(pixelize(default_scene.cube, default_scene.mask), seed=SCENE_SEED)
    return split(ds, SplitSpec(seed=SCENE_SEED))


@pytest.fixture(scope="session")
def trained_pixel(default_splits):
    train, val, _ = default_splits
    return fit_pixel_classifier(train, val, MlpConfig(input_dim=64, seed=SCENE_SEED))


# -- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.checks = []

    def check(self, ok, text):
        self.checks.append((bool(ok), text))
        return bool(ok)

    @property
    def passed(self):
        return bool(self.checks) and all(ok for ok, _ in self.checks)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        details = "; ".join(("" if ok else "!") + text for ok, text in self.checks)
        return f"criterion {self.number} {status} {self.title}: {details}"

    def assert_all(self):
        failed = [text for ok, text in self.checks if not ok]
        assert not failed, self.line()


@pytest.fixture
def criterion(request):
    def make(number, title):
        log = CriterionLog(number, title)
        _CRITERIA[number] = log
        return log

    yield make
    for log in _CRITERIA.values():
        if log.checks and not getattr(log, "_printed", False):
            print(log.line())
            log._printed = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number].line())
