import sys

import numpy as np
import pytest

from pancdet import _kernels
from pancdet.config import RunConfig

KERNEL_PATHS = ["numba", "numpy"] if _kernels.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=KERNEL_PATHS)
def kernel_path(request, monkeypatch):
    """Run the test once per available kernel implementation."""
    monkeypatch.setattr(_kernels, "HAVE_NUMBA", request.param == "numba")
    return request.param


@pytest.fixture
def tiny_cfg():
    # Small enough for a forward/backward pass in well under a second.
    return RunConfig(
        backbone_widths=(4, 4, 8, 8),
        pyramid_channels=8,
        descriptor_channels=8,
        dc_channels=4,
        head_hidden=16,
        pool_size=7,
        rois_per_image=8,
        rpn_batch=32,
        pre_nms_k=200,
        post_nms_k=20,
        iterations=4,
        log_every=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
