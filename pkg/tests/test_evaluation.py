import numpy as np
import pytest

from core.attacks import PatchSpec
from core.errors import QuantizationError
from core.services.evaluation_service import (
    GRADIENT_TAP,
    HARD_METRICS,
    SOFT_METRICS,
    EvaluationService,
    SimilarityRecord,
    TransferCell,
    TransferReport,
)


@pytest.fixture
def restored(trained_run):
    held = trained_run["held"]
    return trained_run["result"].checkpoint, held.images, held.labels


def _cell(source, target, asr, seen):
    return TransferCell(f"p{source}", source, target, asr, 1.0 - asr, seen)


class TestTransferReport:
    @pytest.fixture
    def report(self):
        return TransferReport(cells=[
            _cell(32, 32, 0.8, True),
            _cell(32, 2, 0.4, True),
            _cell(2, 32, 0.2, False),
            _cell(2, 2, 0.6, False),
            _cell(2, 2, 1.0, False),
        ])

    def test_mean_asr_per_pair(self, report):
        means = report.mean_asr()
        assert means[(2, 2)] == pytest.approx(0.8)
        assert means[(32, 2)] == pytest.approx(0.4)
        assert list(means) == sorted(means)

    def test_split_and_cross_bit_filters(self, report):
        assert set(report.mean_asr("seen")) == {(32, 32), (32, 2)}
        assert set(report.mean_asr("unseen", cross_bit=True)) == {(2, 32)}

    def test_overall_asr_averages_cells(self, report):
        assert report.overall_asr() == pytest.approx(0.6)
        assert report.overall_asr("unseen") == pytest.approx(0.6)
        assert report.overall_asr(cross_bit=True) == pytest.approx(0.3)

    def test_overall_asr_without_cells_is_nan(self):
        assert np.isnan(TransferReport().overall_asr())

    def test_similarity_matrix(self):
        report = TransferReport(similarities=[
            SimilarityRecord("features", "conv0", 32, 4, "cosine", 0.9),
            SimilarityRecord("features", "conv0", 4, 2, "cosine", 0.5),
            SimilarityRecord("features", "conv0", 32, 2, "edge-iou", 0.1),
        ])
        m = report.similarity_matrix("features", "conv0", "cosine", [32, 4, 2])
        np.testing.assert_array_equal(np.diag(m), [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(m, m.T)
        assert m[0, 1] == 0.9 and m[1, 2] == 0.5
        assert np.isnan(m[0, 2])


class TestCleanAccuracy:
    def test_one_value_per_bit_width(self, restored):
        ckpt, images, labels = restored
        messages = []
        accuracy = EvaluationService(messages.append).evaluate_clean(ckpt.to_state(), images, labels, [32, 2])
        assert set(accuracy) == {32, 2}
        assert all(0.0 <= a <= 1.0 for a in accuracy.values())
        assert messages[0].startswith("Clean accuracy: 32b")

    def test_uncalibrated_bit_width(self, restored):
        ckpt, images, labels = restored
        with pytest.raises(QuantizationError):
            EvaluationService().evaluate_clean(ckpt.to_state(), images, labels, [32, 4])


class TestTransferMatrix:
    def test_cells_and_seen_flags(self, restored):
        ckpt, images, labels = restored
        seen = ckpt.pool[0]
        unseen = PatchSpec(np.full((3, 6, 6), 0.5), (20, 20), (32, 32), 2, target_class=0)
        pool = [(seen.patch_id, seen), (unseen.patch_id, unseen)]
        report = EvaluationService().transfer_matrix(
            ckpt.to_state(), pool, images, labels, [32, 2], training_signatures=ckpt.train_signatures,
        )
        assert len(report.cells) == 4
        assert [c.seen for c in report.cells] == [True, True, False, False]
        assert [(c.source_bits, c.target_bits) for c in report.cells] == [(32, 32), (32, 2), (2, 32), (2, 2)]
        assert set(report.clean_accuracy) == set(report.target_rate) == {32, 2}
        assert all(0.0 <= c.asr <= 1.0 for c in report.cells)

    def test_untargeted_pool_without_target_class(self, restored):
        ckpt, images, labels = restored
        patch = PatchSpec(np.zeros((3, 5, 5)), (0, 0), (32, 32), 32)
        report = EvaluationService().transfer_matrix(
            ckpt.to_state(), [(patch.patch_id, patch)], images, labels, [32], targeted=False,
        )
        assert report.target_rate == {}
        assert not report.cells[0].seen
        assert 0.0 <= report.cells[0].robust_accuracy <= 1.0


class TestAlignmentReport:
    def test_record_count(self, restored):
        ckpt, images, labels = restored
        state = ckpt.to_state()
        report = EvaluationService().alignment_report(state, images[:4], labels[:4], [32, 2])
        taps = len(state.model.taps)
        assert len(report.similarities) == (taps + 1) * len(HARD_METRICS + SOFT_METRICS)
        assert {r.tap for r in report.similarities if r.domain == "gradients"} == {GRADIENT_TAP}
        assert all(np.isfinite(r.value) for r in report.similarities)

    def test_identical_variants_are_aligned(self, restored):
        ckpt, images, labels = restored
        report = EvaluationService().alignment_report(ckpt.to_state(), images[:2], labels[:2], [32, 32])
        for r in report.similarities:
            if r.metric in ("cosine", "edge-iou"):
                assert r.value == pytest.approx(1.0)

    def test_patched_inputs(self, restored):
        ckpt, images, labels = restored
        patch = ckpt.pool[0]
        plain = EvaluationService().alignment_report(ckpt.to_state(), images[:2], labels[:2], [32, 2], taps=[])
        patched = EvaluationService().alignment_report(ckpt.to_state(), images[:2], labels[:2], [32, 2],
                                                       taps=[], patch=patch)
        assert len(plain.similarities) == len(patched.similarities) == 5
        assert [r.value for r in plain.similarities] != [r.value for r in patched.similarities]

    def test_needs_two_bit_widths(self, restored):
        ckpt, images, labels = restored
        with pytest.raises(QuantizationError):
            EvaluationService().alignment_report(ckpt.to_state(), images, labels, [32])
