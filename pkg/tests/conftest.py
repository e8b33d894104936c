import pytest
import torch

from ccfg.model import CcfgModel

# every CcfgModel.predict call made anywhere in the suite is checked here
PREDICT_CHECKS = {"batches": 0, "violations": []}

_original_predict = CcfgModel.predict


def _checked_predict(self, images):
    probs, labels = _original_predict(self, images)
    with torch.no_grad():
        out = self(images)
    heads = {"e": out.t, "a": out.b}
    expect = sum(heads[h] for h in self.heads) / len(self.heads)
    mean_err = (probs - expect).abs().max().item()
    sum_err = (probs.sum(dim=1) - 1).abs().max().item()
    PREDICT_CHECKS["batches"] += 1
    if mean_err > 1e-7 or sum_err > 1e-5:
        PREDICT_CHECKS["violations"].append((mean_err, sum_err))
    return probs, labels


CcfgModel.predict = _checked_predict

CRITERIA = {}


def pytest_collection_modifyitems(items):
    # the inference-contract criterion reads the session-wide counters, so it runs last
    last = [i for i in items if i.get_closest_marker("criterion") and i.get_closest_marker("criterion").args[0] == 8]
    items[:] = [i for i in items if i not in last] + last


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion n")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = report.user_properties
    marker = dict(props).get("criterion")
    if marker:
        n, name = marker
        _, ok, details = CRITERIA.get(n, (name, True, []))
        details = details + [v for k, v in props if k == "detail" and v not in details]
        CRITERIA[n] = (name, ok and report.passed, details)


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker:
        item.user_properties.append(("criterion", marker.args))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        name, ok, details = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}")
        for line in details:
            terminalreporter.write_line(f"    {line}")


@pytest.fixture
def detail(request):
    """Attach a measured value to the criterion summary line."""
    return lambda text: request.node.user_properties.append(("detail", text))
