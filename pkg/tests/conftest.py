import numpy as np
import pytest

from qkvcomm.bitpack import pack_tensor
from qkvcomm.extraction import KINDS, Fact
from qkvcomm.quantizer import quantize
from qkvcomm.wire import LayerRecord, Payload, make_header


def ulp(x) -> float:
    """float32 spacing at the largest magnitude in ``x``."""
    return float(np.spacing(np.float32(np.max(np.abs(x)))))


def random_payload(rng: np.random.Generator, max_layers: int = 4, max_facts: int = 3) -> Payload:
    total = int(rng.integers(1, 12))
    n_sel = int(rng.integers(0, min(total, max_layers) + 1))
    indices = sorted(rng.choice(total, size=n_sel, replace=False).tolist())
    shape = (1, int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 9)))
    records = []
    for idx in indices:
        bits = int(rng.integers(2, 9))
        k = rng.normal(0, 3, shape).astype(np.float32)
        v = rng.normal(1, 2, shape).astype(np.float32)
        records.append(LayerRecord(idx, pack_tensor(quantize(k, bits)), pack_tensor(quantize(v, bits))))
    facts = []
    for i in range(int(rng.integers(0, max_facts + 1))):
        kind = KINDS[int(rng.integers(0, len(KINDS)))]
        meta = tuple((f"k{j}", f"v{i}{j}") for j in range(int(rng.integers(0, 3))))
        facts.append(Fact(kind, f"fact {i} é中", float(rng.uniform(0, 1)), meta))
    header = make_header(f"model-{total}", total, records, facts, shape[2],
                         calibrated=bool(rng.integers(0, 2)))
    return Payload(header, tuple(records), tuple(facts))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- one summary line per acceptance criterion ----------------------------------

_criteria: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    name = getattr(item, "originalname", item.name)
    if not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    title = (item.function.__doc__ or "").strip().splitlines()[0]
    if report.when == "call" or report.failed:
        if number not in _criteria or report.failed:
            _criteria[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
