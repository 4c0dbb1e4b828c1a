import numpy as np

from ssvos import tensor as T
from ssvos.gradcheck_suite import (EPS, OP_CASES, OP_COVERAGE, TOL, CheckResult, composed_cases, format_results,
                                   module_cases, run_suite)


def test_every_differentiable_op_has_a_case():
    ops = set(T.__all__) - {"Tensor", "Tape", "no_grad_tensor", "fd_gradcheck"}
    assert set(OP_COVERAGE) == ops
    assert set(OP_COVERAGE.values()) <= set(OP_CASES)


def test_thresholds():
    assert TOL == 1e-4 and EPS == 1e-5
    assert CheckResult("x", 9e-5, 1, 0.0).ok and not CheckResult("x", 1e-4, 1, 0.0).ok


def test_op_cases_pass():
    results = run_suite(op_trials=3, include=("ops",), seed=5)
    assert len(results) == len(OP_CASES)
    bad = [r for r in results if not r.ok]
    assert not bad, format_results(bad)


def test_gradcheck_detects_a_wrong_backward():
    def bad_square(x):
        return T._record(x.data ** 2, (x,), lambda g: (g * x.data,))   # missing factor 2
    err = T.fd_gradcheck(lambda t: T.sum(bad_square(t)), np.random.default_rng(0).normal(size=(3, 4)))
    assert err > 0.1


def test_module_and_model_case_names():
    assert {f"module.{n}" for n in ("pyramid", "vit_cls", "spatial_semantic", "memory_read",
                                    "decode_point_loss")} <= set(module_cases())
    assert set(composed_cases()) == {"model.frame0_pixels", "model.frame3_pixels", "model.frame4_pixels",
                                     "model.every_weight"}


def test_format_marks_failures():
    text = format_results([CheckResult("a", 1e-9, 1, 0.1), CheckResult("b", 1.0, 1, 0.1)])
    assert text.splitlines()[2].endswith("FAIL") and not text.splitlines()[1].endswith("FAIL")
