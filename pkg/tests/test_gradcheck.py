import time

import numpy as np
import pytest

from nestseg import gradcheck, ops
from nestseg.tensor import Tensor, record_branches


@pytest.fixture(scope="module")
def suite():
    t0 = time.perf_counter()
    results = gradcheck.run_all(seed=0)
    return results, time.perf_counter() - t0


def test_every_case_passes(suite):
    results, _ = suite
    failed = [str(r) for r in results if not r.passed]
    assert not failed, "\n".join(failed)


def test_suite_covers_ops_blocks_and_losses(suite):
    names = {r.name for r in suite[0]}
    expected_blocks = {"conv_block", "attention_gate", "channel attention", "attention module",
                       "edge enhancement", "edge magnitude", "NUB-bridge", "NUB-4", "NUB-5", "NUB-6", "NUB-7"}
    assert expected_blocks <= names
    assert {f"loss {k}" for k in ("BCE", "Dice", "BCE+Dice", "Focal", "EAL")} <= names
    assert {"conv2d", "maxpool2", "batchnorm train", "scaled dot attention"} <= names


def test_relative_error_definition():
    assert gradcheck.rel_error(1.0, 1.0) == 0.0
    assert gradcheck.rel_error(2.0, 1.0) == 0.5
    assert gradcheck.rel_error(0.0, 1e-9) == pytest.approx(0.1)


def test_wrong_backward_is_caught(rng):
    def bad_square(x):
        return Tensor._make(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # should be 2x

    x = Tensor(rng.normal(size=5))
    res = gradcheck.check("bad", lambda: ops.sum(bad_square(x)), [x], rng)
    assert not res.passed and res.max_rel_error == pytest.approx(0.5)
    assert "worst" in str(res)


def test_kink_straddling_coordinate_is_skipped(rng):
    x = Tensor(np.array([3e-6, 1.0, -2.0]))  # first entry sits within one step of the kink
    res = gradcheck.check("kink", lambda: ops.sum(ops.leaky_relu(x, 0.01)), [x], rng, per_leaf=3)
    assert res.skipped == 1 and res.checked == 2 and res.passed


def test_branch_log_records_piecewise_choices():
    with record_branches() as log:
        ops.leaky_relu(Tensor(np.array([-1.0, 2.0])))
        ops.maxpool2(Tensor(np.arange(4.0).reshape(1, 1, 2, 2)))
    assert len(log) == 2
    np.testing.assert_array_equal(log[0], [False, True])
