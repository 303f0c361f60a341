import ipaddress

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from popdns.names import DomainName, QType, RecordKey

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

label = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=12)
names = st.lists(label, min_size=1, max_size=5).map(lambda ls: DomainName(tuple(ls)))
ipv4 = st.integers(0, 2**32 - 1).map(ipaddress.IPv4Address)
ipv6 = st.integers(0, 2**128 - 1).map(ipaddress.IPv6Address)
addr_keys = st.builds(RecordKey, names, st.sampled_from([QType.A, QType.AAAA]))


def answer_for(qtype, i):
    if qtype is QType.A:
        return ipaddress.IPv4Address(0x0A000000 + i)
    return ipaddress.IPv6Address((0x20010DB8 << 96) + i)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

_RESULTS: list[tuple[str, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "setup":
        # module fixtures (traces, oracles) count toward the criterion that first needs them
        item.setup_seconds = rep.duration
    if rep.when != "call":
        return
    label, title = mark.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    details.append(f"{rep.duration + getattr(item, 'setup_seconds', 0.0):.1f}s")
    detail = "; ".join(details)
    if hasattr(rep, "wasxfail"):
        status = "FAIL (known, xfail)" if rep.skipped else "PASS (xfail)"
    else:
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    _RESULTS.append((label, status, title, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, title, detail in sorted(_RESULTS):
        line = f"[{status}] {label} {title}"
        terminalreporter.write_line(line + (f" :: {detail}" if detail else ""))
