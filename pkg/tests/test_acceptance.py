"""Acceptance suite: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the table. The training
criteria (6, 7a, 7b) are marked slow; deselect them with ``-m "not slow"``.
"""
import pytest

from csg3dct import verify


def _report(number, result, limit=None):
    line = f"[{number}] {result.line()}"
    if limit is not None:
        line += f"  (limit {limit:.0f}s)"
    print("\n" + line)
    assert result.passed, line
    if limit is not None:
        assert result.seconds < limit, f"{result.name} took {result.seconds:.1f}s, limit {limit}s"


def test_1_gradient_correctness():
    _report(1, verify.check_gradient_correctness(), limit=120)


def test_2_boring_video_inflation():
    _report(2, verify.check_boring_video(), limit=30)


def test_3_ca_fusion_equivalence_and_cost():
    r = verify.check_ca_fusion(instances=100)
    assert r.values["ratio"] <= 0.01
    _report(3, r)


def test_4_factorization_masks():
    _report(4, verify.check_factorization(coords=20))


def test_5_attention_and_norm_invariants():
    _report(5, verify.check_attention_invariants())


@pytest.mark.slow
def test_6_end_to_end_synthetic_task():
    _report(6, verify.check_end_to_end(count=1000, epochs=20), limit=30 * 60)


@pytest.mark.slow
def test_7a_inflated_init_beats_scratch():
    _report("7a", verify.check_ablation_init(seeds=(0, 1, 2)))


@pytest.mark.slow
def test_7b_fusion_modes_not_worse_than_none():
    _report("7b", verify.check_ablation_fusion(seeds=(0, 1, 2)))


def test_8_checkpoint_round_trip():
    _report(8, verify.check_checkpoint())
