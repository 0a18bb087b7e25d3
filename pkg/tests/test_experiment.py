import numpy as np
import pytest

from crispedge.config import RunConfig
from crispedge.data import synth_scenes
from crispedge.evaluate import CrispnessReport
from crispedge.experiment import ABResult, run_ab, synth_split, train

SMALL = RunConfig(synth_n=5, synth_train=3, synth_height=32, synth_width=32, epochs=2, batch_size=4)


def row(pre, thick):
    return CrispnessReport(pre, 0.0, thick, None, None)


class TestFusionWins:
    @pytest.mark.parametrize(
        "fusion, wce, expected",
        [
            (row(0.70, 1.0), row(0.69, 1.5), True),
            (row(0.69, 1.0), row(0.69, 1.5), False),  # ODS must be strictly higher
            (row(0.70, 1.21), row(0.69, 1.5), False),  # under 20% thinner is not enough
            (row(0.70, 1.19), row(0.69, 1.5), True),
            (row(0.60, 1.0), row(0.69, 1.5), False),
        ],
    )
    def test_rule(self, fusion, wce, expected):
        assert ABResult({"weighted-ce": wce, "fusion": fusion}).fusion_wins(0.20) is expected

    def test_table_lists_rows(self):
        text = ABResult({"weighted-ce": row(0.5, 2.0), "fusion": row(0.6, 1.0)}).to_table()
        assert text.splitlines()[1].startswith("weighted-ce") and "0.6000" in text


class TestSplit:
    def test_counts_and_ids(self):
        split = synth_split(SMALL)
        assert len(split.train) == 3 * SMALL.synth_annotators
        assert [s.id for s in split.test] == ["synth_0003", "synth_0004"]
        assert split.train[0].id.endswith("_a0")

    def test_test_uses_reference_annotation(self):
        scenes = synth_scenes(SMALL.synth_spec(), SMALL.synth_n)
        split = synth_split(SMALL)
        np.testing.assert_array_equal(split.test[0].annotation, scenes[3].annotations[0])
        for k in range(SMALL.synth_annotators):
            np.testing.assert_array_equal(split.train[k].annotation, scenes[0].annotations[k])


class TestTraining:
    def test_deterministic_and_logged(self):
        samples = synth_split(SMALL).train
        a, b = train(SMALL, samples), train(SMALL, samples)
        assert len(a.epoch_loss) == SMALL.epochs
        assert a.epoch_loss == b.epoch_loss
        for pa, pb in zip(a.net.params.values(), b.net.params.values()):
            np.testing.assert_array_equal(pa.values, pb.values)

    def test_run_ab_rows(self):
        res = run_ab(SMALL.replace(epochs=1))
        assert set(res.rows) == {"weighted-ce", "fusion"}
        for r in res.rows.values():
            assert 0.0 <= r.pre_nms_ods <= 1.0 and r.thickness_ratio >= 0.0
