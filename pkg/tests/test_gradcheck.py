import numpy as np

from skeletal_radiance.gradcheck import (check_gradient, end_to_end_report, grad_check, relative_error,
                                         run_gradient_suite)
from skeletal_radiance.tensor import Tensor, matmul, relu


def test_sum_is_exact(rng):
    assert grad_check(lambda x: x.sum(), rng.standard_normal((3, 4))) < 1e-9


def test_matmul_chain(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((5, 2))
    assert grad_check(lambda x: matmul(matmul(Tensor(a), x), Tensor(b)).sum(), rng.standard_normal((4, 5))) < 1e-6


def test_relu_kink_is_skipped():
    report = check_gradient(lambda x: relu(x).sum(), np.array([0.0, 1.0, -1.0]))
    assert report.skipped == 1 and report.checked == 2
    assert report.passed


def test_wrong_gradient_is_caught():
    report = check_gradient(lambda x: (x * x).sum(), np.array([1.0, 2.0]), tol=1e-4)
    assert report.passed
    # the square is detached, so the tape only sees the linear term
    bad = check_gradient(lambda x: (Tensor(x.data ** 2) + x).sum(), np.array([1.0, 2.0]))
    assert not bad.passed and "FAILED" in str(bad)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-7, 0.0) == 1e-7 / 1e-5


def test_component_suite_passes():
    reports = run_gradient_suite(seed=0, end_to_end=False)
    assert len(reports) > 20
    assert [str(r) for r in reports if not r.passed] == []


def test_end_to_end():
    report = end_to_end_report(seed=0)
    assert report.passed, str(report)
    assert report.checked > 0
