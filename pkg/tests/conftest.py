import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from dataclasses import replace  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from cslid.corpus import Manifest  # noqa: E402
from cslid.synth import SynthConfig, synthesize_corpus  # noqa: E402


def absolute(manifest: Manifest, root) -> Manifest:
    return Manifest(tuple(replace(u, audio_path=str(root / u.audio_path)) for u in manifest), manifest.provenance)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """40 one-second utterances, balanced, easy; audio paths absolute."""
    root = tmp_path_factory.mktemp("small")
    m = synthesize_corpus(root, SynthConfig(n_utterances=40, duration_s=1.0), seed=3)
    return absolute(m, root), root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting --------------------------------------------------------
# Tests marked ``criterion(n, text)`` get one PASS/FAIL line in the terminal
# summary, with any ``detail`` recorded through ``record_property``.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, text = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "FAIL" if call.excinfo is not None else "PASS"
    _CRITERIA[number] = (status, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text, detail = _CRITERIA[n]
        line = f"{status} criterion {n}: {text}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
