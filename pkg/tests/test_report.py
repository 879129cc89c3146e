from __future__ import annotations

import numpy as np

from mtvg.evaluation import EvalReport
from mtvg.matching import ScoreMap2D
from mtvg.report import write_report
from mtvg.temporal import dense_candidates

ROWS = [("concat", EvalReport({0.3: 0.9, 0.5: 0.8, 0.7: 0.6}, 0.7667, 30)),
        ("ensemble", EvalReport({0.3: 0.95, 0.5: 0.9, 0.7: 0.7}, 0.85, 30))]
LOG = [{"epoch": k, "loss": 1.0 / k, "bce": 0.6 / k, "nce": 0.4 / k} for k in range(1, 6)]


def _map():
    mask = dense_candidates(12)
    return ScoreMap2D.from_cells(mask, np.random.default_rng(0).random(mask.count), "combined")


class TestWriteReport:
    def test_files(self, tmp_path):
        written = write_report(tmp_path, ROWS, LOG, [("v/q 1", _map(), (2, 5))])
        names = sorted(p.name for p in written)
        assert names == ["map_v_q_1.png", "recall.png", "table.tsv", "table.txt", "training.png"]
        assert (tmp_path / "table.tsv").read_text().splitlines()[1].startswith("concat\t0.9\t")

    def test_figures_are_byte_stable(self, tmp_path):
        a = write_report(tmp_path / "a", ROWS, LOG, [("m", _map(), None)])
        b = write_report(tmp_path / "b", ROWS, LOG, [("m", _map(), None)])
        for x, y in zip(a, b):
            assert x.read_bytes() == y.read_bytes(), x.name

    def test_tables_only(self, tmp_path):
        assert [p.name for p in write_report(tmp_path, ROWS)] == ["table.txt", "table.tsv", "recall.png"]
