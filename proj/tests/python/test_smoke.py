"""Smoke tests for the python bindings."""

import math

import pytest

import bitbudget as bb


def test_version():
    assert bb.version().startswith("bitbudget")
    assert bb.worker_count() >= 1


def test_quantize_rtn_matches_reference_group():
    # bits=2 levels are {-1, 0, 1} with scale max|w| = 1.0 here.
    assert bb.quantize_rtn([1.0, -1.0, 0.4], [3], 2, 16) == [1.0, -1.0, 0.0]
    with pytest.raises(ValueError):
        bb.quantize_rtn([1.0], [1], 1, 16)


def test_mckp_solver_exact_and_feasible():
    values = [[0.1, 0.2, 0.7], [0.6, 0.3, 0.1], [0.2, 0.5, 0.3]]
    out = bb.mckp_solve(values, [10, 10, 10], [2, 3, 4], 3.0)
    assert out["optimal"]
    assert out["chosen_bits"] == [4, 2, 3]
    assert out["realized_avg_bits"] <= 3.0
    with pytest.raises(bb.InfeasibleBudgetError):
        bb.mckp_solve(values, [10, 10, 10], [2, 3, 4], 1.0)


def tiny_config(**overrides):
    cfg = dict(
        num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=24, vocab_size=32,
        max_seq_len=16, num_sequences=16, seq_len=16, steps=15, batch_size=4,
        lr=0.1, b_target=3.0,
    )
    cfg.update(overrides)
    return {k: str(v) for k, v in cfg.items()}


def test_learn_and_allocate_pipeline():
    scores = bb.learn_scores(tiny_config())
    assert len(scores["modules"]) == 2 * 7
    for row in scores["scores"]:
        assert math.isclose(sum(row), 1.0, abs_tol=1e-9)

    out = bb.solve_allocation(scores, 3.0)
    assert out["optimal"]
    assert out["realized_avg_bits"] <= 3.0
    assert -1.0 <= out["pearson"] <= 1.0
    assert len(out["chosen_bits"]) == len(scores["modules"])

    # Score reuse at another budget, no retraining.
    lower = bb.solve_allocation(scores, 2.5)
    assert lower["realized_avg_bits"] <= 2.5


def test_determinism():
    a = bb.learn_scores(tiny_config())
    b = bb.learn_scores(tiny_config())
    assert a["scores"] == b["scores"]


def test_allocation_similarity():
    assert math.isclose(bb.allocation_similarity([2, 3, 4], [2, 3, 4]), 1.0)
