import numpy as np
import pytest

from network.objective import METRIC_NAMES, MetricResult
from pipelines.reporting import (
    HISTORY_COLUMNS,
    best_dice_envelope,
    dice_curve,
    format_tables,
    loss_curve,
    read_history_csv,
    read_metrics_csv,
    write_history_csv,
    write_metrics_csv,
    write_overlays,
    write_report,
)
from pipelines.training import CheckpointEvent, HistoryRow, TrainHistory, ValidationEvent
from utils.errors import DataError, UsageError
from volumes.volgrid import LabelMask, Volume

pytestmark = pytest.mark.unit

PNG_MAGIC = b"\x89PNG"


def _published_results(published_tables):
    results = []
    for i in range(10):
        values = {
            cls: {metric: published_tables[(metric, cls)][i] / 100.0 for metric in METRIC_NAMES}
            for cls in ("bone", "nerve")
        }
        results.append(MetricResult(f"case{i + 1}", values))
    return results


def _history():
    history = TrainHistory()
    dice = {2: (0.2, 0.1), 4: (0.5, 0.3), 6: (0.4, 0.2), 8: (0.7, 0.5)}
    best = -1.0
    for it in range(1, 9):
        loss = 2.0 / it
        if it in dice:
            bone, nerve = dice[it]
            event = ValidationEvent(it, (it - 1) // 4, ("case_001",), bone, nerve)
            history.validations.append(event)
            improved = event.mean_dice > best
            if improved:
                best = event.mean_dice
                history.add_checkpoint(CheckpointEvent(it, best))
            history.rows.append(HistoryRow(it, (it - 1) // 4, loss, bone, nerve, improved))
        else:
            history.rows.append(HistoryRow(it, (it - 1) // 4, loss))
    return history


def _table_row(tables, title, class_name):
    block = next(b for b in tables.split("\n\n") if b.startswith(title))
    return next(line for line in block.splitlines() if line.startswith(class_name)).split()


class TestMetricsCsv:
    def test_round_trip(self, tmp_path, published_tables):
        results = _published_results(published_tables)
        path = write_metrics_csv(results, tmp_path / "out" / "metrics.csv")
        back = read_metrics_csv(path)
        assert [r.case_id for r in back] == [r.case_id for r in results]
        for a, b in zip(results, back):
            assert a.values == b.values

    @pytest.mark.parametrize(
        "content, fragment",
        [
            ("case,class,pixel_accuracy,iou,dice\n", "line 1"),
            ("case_id,class,pixel_accuracy,iou,dice\nc1,femur,0.5,0.5,0.5\n", "line 2"),
            ("case_id,class,pixel_accuracy,iou,dice\nc1,bone,0.5,0.5,0.5\nc1,nerve,0.5,95.0,0.5\n", "line 3"),
            ("case_id,class,pixel_accuracy,iou,dice\nc1,bone,0.5,0.5\n", "line 2"),
            ("case_id,class,pixel_accuracy,iou,dice\nc1,bone,0.5,abc,0.5\n", "line 2"),
            ("case_id,class,pixel_accuracy,iou,dice\n", "no metric rows"),
        ],
    )
    def test_rejects_malformed_files(self, tmp_path, content, fragment):
        path = tmp_path / "metrics.csv"
        path.write_text(content)
        with pytest.raises(DataError, match=fragment):
            read_metrics_csv(path)

    def test_rejects_inconsistent_classes(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text(
            "case_id,class,pixel_accuracy,iou,dice\nc1,bone,0.5,0.5,0.5\nc1,nerve,0.5,0.5,0.5\nc2,bone,0.5,0.5,0.5\n"
        )
        with pytest.raises(DataError):
            read_metrics_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_metrics_csv(tmp_path / "absent.csv")


class TestTables:
    def test_reproduces_published_means(self, published_tables):
        tables = format_tables(_published_results(published_tables))
        assert tables.count("\n\n") == 2
        assert _table_row(tables, "Dice score", "bone")[-1] == "94.5"
        assert _table_row(tables, "Dice score", "nerve")[-1] == "90.5"
        assert _table_row(tables, "IoU", "bone")[-1] == "89.7"
        assert _table_row(tables, "IoU", "nerve")[-1] == "82.7"
        assert _table_row(tables, "Pixel accuracy", "nerve")[-1] == "91.4"

    def test_columns_follow_cases(self, published_tables):
        tables = format_tables(_published_results(published_tables))
        header = tables.splitlines()[1].split()
        assert header == ["class"] + [f"case{i}" for i in range(1, 11)] + ["mean"]
        assert _table_row(tables, "Dice score", "bone")[1:11] == [
            f"{v:.1f}" for v in published_tables[("dice", "bone")]
        ]

    def test_needs_cases(self):
        with pytest.raises(UsageError):
            format_tables([])


class TestHistoryCsv:
    def test_round_trip(self, tmp_path):
        history = _history()
        path = write_history_csv(history, tmp_path / "history.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(HISTORY_COLUMNS)
        assert len(lines) == 9
        assert lines[1].endswith(",,,0")

        back = read_history_csv(path)
        assert back.rows == history.rows
        assert [v.iteration for v in back.validations] == [2, 4, 6, 8]
        assert [(c.iteration, c.best_dice) for c in back.checkpoints] == [
            (c.iteration, pytest.approx(c.best_dice)) for c in history.checkpoints
        ]

    @pytest.mark.parametrize(
        "rows",
        [
            ["1,0,0.5,,,1"],
            ["1,0,0.5,0.3,,0"],
            ["2,0,0.5,,,0", "1,0,0.4,,,0"],
            ["1,0,0.5,0.5,0.5,1", "2,0,0.4,0.4,0.4,1"],
            ["1,0,loss,,,0"],
            ["1,0,0.5,,"],
        ],
    )
    def test_rejects_inconsistent_rows(self, tmp_path, rows):
        path = tmp_path / "history.csv"
        path.write_text("\n".join([",".join(HISTORY_COLUMNS)] + rows) + "\n")
        with pytest.raises(DataError, match="line"):
            read_history_csv(path)

    def test_rejects_empty_history(self, tmp_path):
        path = tmp_path / "history.csv"
        path.write_text(",".join(HISTORY_COLUMNS) + "\n")
        with pytest.raises(DataError):
            read_history_csv(path)


class TestCurves:
    def test_loss_curve_block_means(self):
        history = _history()
        full = loss_curve(history)
        assert full == [(r.iteration, r.loss) for r in history.rows]
        halves = loss_curve(history, max_points=2)
        assert [p[0] for p in halves] == [4, 8]
        assert halves[0][1] == pytest.approx(np.mean([2.0, 1.0, 2 / 3, 0.5]))

    def test_dice_curve_and_envelope(self):
        history = _history()
        assert [p[0] for p in dice_curve(history)] == [2, 4, 6, 8]
        envelope = best_dice_envelope(history)
        assert [p[0] for p in envelope] == [2, 4, 8]
        assert [p[1] for p in envelope] == pytest.approx([0.15, 0.4, 0.6])

    def test_loss_curve_errors(self):
        with pytest.raises(UsageError):
            loss_curve(TrainHistory())
        with pytest.raises(UsageError):
            loss_curve(_history(), max_points=0)


def test_write_report(tmp_path):
    written = write_report(_history(), tmp_path / "report")
    assert set(written) == {"loss_curve", "dice_curve", "best_dice", "loss_plot", "dice_plot"}
    assert written["loss_plot"].read_bytes()[:4] == PNG_MAGIC
    assert written["dice_plot"].read_bytes()[:4] == PNG_MAGIC
    assert written["best_dice"].read_text().splitlines()[0] == "iteration,best_mean_dice"
    assert len(written["dice_curve"].read_text().splitlines()) == 5


def test_write_overlays(tmp_path, rng):
    ct = Volume(rng.normal(size=(3, 8, 9)).astype(np.float32))
    prediction = LabelMask(rng.integers(0, 3, size=(3, 8, 9)))
    paths = write_overlays(ct, prediction, tmp_path / "overlays")
    assert [p.name for p in paths] == ["slice_0000.png", "slice_0001.png", "slice_0002.png"]
    assert all(p.read_bytes()[:4] == PNG_MAGIC for p in paths)

    with pytest.raises(UsageError):
        write_overlays(ct, LabelMask(np.zeros((3, 8, 8), dtype=np.uint8)), tmp_path)
    with pytest.raises(UsageError):
        write_overlays(ct, prediction, tmp_path, alpha=1.5)
