"""Shared test plumbing.

The matmul kernel selection is process-global state; the CLI flips it on
per its config and some suites flip it for speed.  Snapshot and restore it
around every module and every test so suites stay order-independent
(module scope also covers module-level fixtures that run the CLI).
"""

import pytest

from rnnlab import numerics


@pytest.fixture(scope="module", autouse=True)
def _module_gemm_mode():
    previous = numerics.fast_gemm_enabled()
    yield
    numerics.set_fast_gemm(previous)


@pytest.fixture(autouse=True)
def _test_gemm_mode():
    previous = numerics.fast_gemm_enabled()
    yield
    numerics.set_fast_gemm(previous)
