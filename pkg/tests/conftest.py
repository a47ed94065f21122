import numpy as np
import pytest

from ganova import autodiff as ad


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar numpy function; independent of the engine."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def engine_grad(fn, *arrays):
    """Gradient of ``sum(fn(*inputs))`` w.r.t. every input, via the autodiff engine."""
    tape = ad.Tape()
    ts = [tape.watch(a) for a in arrays]
    out = fn(*ts)
    loss = ad.sum(out) if out.size != 1 else ad.reshape(out, ())
    grads = ad.backward(loss, tape)
    return [grads[t].values if t in grads else np.zeros(t.shape) for t in ts]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------- acceptance report

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when != "call" and not (report.failed or report.skipped):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "results": []})
    if report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        entry["results"].append(("skip", item.name, reason.removeprefix("Skipped: ")))
    else:
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        entry["results"].append(("fail" if report.failed else "pass", item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        kinds = [r[0] for r in entry["results"]]
        if "fail" in kinds:
            status = "FAIL"
        elif "pass" not in kinds:
            status = "SKIP"
        elif "skip" in kinds:
            status = "INCOMPLETE"
        else:
            status = "PASS"
        notes = [f"{name} {kind}" + (f": {info}" if info else "") for kind, name, info in entry["results"]
                 if kind != "pass" or info]
        line = f"criterion {number} [{status}] {entry['title']}"
        terminalreporter.write_line(line + (" | " + " | ".join(notes) if notes else ""))
