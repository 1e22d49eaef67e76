"""Desk-scale directional checks on the reference configuration.

Each check trains tinycnn-s on synthetic shapes with the seed in
``configs/desk.cfg``; run them with ``pytest -m slow``.
"""

from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from core.config import RunConfig
from core.services.campaign_service import craft_evaluation_pool
from core.services.evaluation_service import EvaluationService
from core.services.patch_pool_service import PatchPoolService
from core.services.training_service import TrainingService

from conftest import load_split

pytestmark = pytest.mark.slow

DESK = Path(__file__).resolve().parent.parent / "configs" / "desk.cfg"


@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig(str(DESK))
    train, held = load_split(cfg)
    return cfg, train, held.subset(cfg.eval["samples"])


@pytest.fixture(scope="module")
def runs(desk):
    """Trained states per mode, all from the same seed and data."""
    cfg, train, _ = desk
    cache = {}

    def get(mode, **overrides):
        key = (mode, tuple(sorted((s, tuple(sorted(v.items()))) for s, v in overrides.items())))
        if key not in cache:
            run_cfg = cfg.copy(run={"mode": mode}, **overrides)
            cache[key] = (run_cfg, TrainingService(run_cfg, progress=False).train(train).state)
        return cache[key]

    return get


def test_gradient_structure_outlasts_raw_cosine(desk, runs):
    cfg, _, held = desk
    _, state = runs("standard-qat")
    n = cfg.eval["align_samples"]
    report = EvaluationService().alignment_report(state, held.images[:n], held.labels[:n], cfg.bits, taps=[])
    for a, b in combinations(cfg.bits, 2):
        values = {r.metric: r.value for r in report.similarities
                  if r.domain == "gradients" and (r.bits_a, r.bits_b) == (a, b)}
        assert values["hog-cosine"] - values["cosine"] >= 0.2, (a, b, values)


def test_full_precision_patches_transfer_to_quantized_variants(desk, runs):
    cfg, train, held = desk
    _, state = runs("standard-qat")
    triples = [t for t in cfg.pool_triples("train") if t[2] == 32]
    pool = PatchPoolService().craft_pool(
        state, train.images, train.labels, triples, cfg.attack_config(), cfg.attack["craft_samples"],
        train.images[:cfg.data["calibration_samples"]],
    )
    report = EvaluationService().transfer_matrix(
        state, [(p.patch_id, p) for p in pool], held.images, held.labels, cfg.bits,
    )
    means = report.mean_asr()
    for bits in cfg.bits[1:]:
        assert means[(32, bits)] > 3 * report.target_rate[bits]
    assert means[(32, 32)] >= means[(32, 2)]


def _unseen_cross_bit_asr(cfg, state, train, held):
    """Cross-bit ASR of the evaluation-pool patches built from the unseen triples."""
    pool = craft_evaluation_pool(cfg, state, train)
    unseen = pool[len(cfg.pool_triples("train")):]
    report = EvaluationService().transfer_matrix(state, unseen, held.images, held.labels, cfg.bits)
    return report.overall_asr(cross_bit=True)


def test_defense_lowers_unseen_cross_bit_asr(desk, runs):
    cfg, train, held = desk
    asr = {}
    for mode in ("standard-qat", "triqdef", "triqdef-no-fdp", "triqdef-no-gpdp"):
        run_cfg, state = runs(mode)
        asr[mode] = _unseen_cross_bit_asr(run_cfg, state, train, held)
    assert asr["standard-qat"] - asr["triqdef"] >= 0.15
    assert asr["triqdef-no-fdp"] > asr["triqdef-no-gpdp"] > asr["triqdef"]


def test_defense_keeps_clean_accuracy(desk, runs):
    cfg, _, held = desk
    service = EvaluationService()
    base = service.evaluate_clean(runs("standard-qat")[1], held.images, held.labels, cfg.bits)
    defended = service.evaluate_clean(runs("triqdef")[1], held.images, held.labels, cfg.bits)
    for bits in cfg.bits:
        assert defended[bits] >= base[bits] - 0.05


def test_curriculum_helps_the_lowest_bit_width(desk, runs):
    cfg, _, held = desk
    service = EvaluationService()
    staged = service.evaluate_clean(runs("standard-qat")[1], held.images, held.labels, [2])
    flat = service.evaluate_clean(runs("standard-qat", curriculum={"enabled": False})[1],
                                  held.images, held.labels, [2])
    assert staged[2] >= flat[2]


def test_seeded_runs_are_reproducible(desk):
    cfg, train, _ = desk
    short = cfg.copy(run={"epochs": 2}, attack={"iterations": 5})
    a = TrainingService(short, progress=False).train(train).checkpoint
    b = TrainingService(short, progress=False).train(train).checkpoint
    for name, value in a.weights.items():
        assert np.array_equal(b.weights[name], value)
    assert [p.pixels.tobytes() for p in a.pool] == [p.pixels.tobytes() for p in b.pool]
