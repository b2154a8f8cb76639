import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedinject.errors import InputError
from fedinject.evaluation import (FROZEN_LABEL, MATRIX_LABELS, matrix_cells, run_benchmark_matrix,
                                  run_zero_shot, zero_shot_rows)
from fedinject.metrics import (CSV_HEADER, NOT_CAPABLE, MetricsRow, classification_metrics,
                               parse_csv, rows_to_csv)
from fedinject.tasks import VALIDATION_TASKS, get_task

from conftest import fast_config


# ----------------------------------------------------------------- metrics

def test_metrics_half_right():
    r = classification_metrics([1, 1, 0, 0], [1, 0, 1, 0])
    assert (r.accuracy, r.precision, r.recall, r.f1, r.support) == (0.5, 0.5, 0.5, 0.5, 4)


def test_metrics_all_correct():
    r = classification_metrics([1, 0, 1], [1, 0, 1])
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_no_predicted_positives():
    r = classification_metrics([0, 0, 0], [1, 0, 1])
    assert r.precision == 0.0 and r.f1 == 0.0 and r.accuracy == pytest.approx(1 / 3)


def test_metrics_shape_errors():
    with pytest.raises(InputError):
        classification_metrics([1, 0], [1])
    with pytest.raises(InputError):
        classification_metrics([], [])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=1000))
@settings(max_examples=100, deadline=None)
def test_metrics_identities(pairs):
    p, y = np.array(pairs).T
    r = classification_metrics(p, y)
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    assert r.accuracy == pytest.approx((tp + tn) / len(p), abs=1e-15)
    for v in (r.accuracy, r.precision, r.recall, r.f1):
        assert 0.0 <= v <= 1.0
    if r.precision + r.recall > 0:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
    assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12


def test_csv_format_and_parse():
    rows = [MetricsRow("FedAvg_m", "covid19", 0.75, 0.5, 1.0, 2 / 3, 8),
            MetricsRow.not_capable("FrozenStub", "sepsis", 20)]
    text = rows_to_csv(rows)
    assert text.splitlines() == [CSV_HEADER,
                                 "FedAvg_m,covid19,0.750000,0.500000,1.000000,0.666667,8",
                                 f"FrozenStub,sepsis,{','.join([NOT_CAPABLE] * 4)},20"]
    back = parse_csv(text)
    assert back[1] == rows[1] and back[0].f1 == pytest.approx(2 / 3, abs=1e-6)


def test_csv_rejects_foreign_header():
    with pytest.raises(InputError):
        parse_csv("a,b,c\n")


# ------------------------------------------------------------------ matrix

def test_label_scheme():
    assert len(MATRIX_LABELS) == len(set(MATRIX_LABELS)) == 16
    assert MATRIX_LABELS[:4] == ["FedAvg_s", "FedAvg_s^+", "FedAvg_s^*", "FedAvg_s^F"]
    assert MATRIX_LABELS[-1] == "FedProx_m^F"


def test_matrix_cells_count():
    cells = matrix_cells(fast_config())
    assert len(cells) == 2 * 3 * 4 + 2 * 3
    assert all(c.federation.threads == 1 for c in cells)


@pytest.fixture(scope="module")
def matrix(small_dataset):
    cfg = fast_config()
    return cfg, run_benchmark_matrix(small_dataset, cfg)


def test_matrix_is_complete(matrix):
    cfg, mx = matrix
    assert len(mx.rows) == 16 * len(cfg.data.tasks)
    for task in cfg.data.tasks:
        assert [r.config for r in mx.rows if r.task == task] == MATRIX_LABELS
    assert all(r.capable for r in mx.rows)


@pytest.mark.parametrize("task", ["ecg_abnormal", "mortality"])
@pytest.mark.parametrize("surface", ["", "^+"])
def test_single_and_multi_agree_on_tasks_with_private_encoders(matrix, task, surface):
    _, mx = matrix
    for algo in ("FedAvg", "FedProx"):
        s = mx.row(f"{algo}_s{surface}", task)
        m = mx.row(f"{algo}_m{surface}", task)
        assert s.csv_line().split(",")[2:] == m.csv_line().split(",")[2:]


def test_matrix_rerun_gives_identical_bytes(small_dataset, matrix):
    cfg, mx = matrix
    again = run_benchmark_matrix(small_dataset, cfg, threads=4)
    assert rows_to_csv(again.rows).encode() == rows_to_csv(mx.rows).encode()


def test_zero_shot_rows(small_dataset, matrix):
    cfg, mx = matrix
    rows = run_zero_shot(small_dataset, mx, cfg)
    frozen = [r for r in rows if r.config == FROZEN_LABEL]
    assert len(frozen) == len(VALIDATION_TASKS) and not any(r.capable for r in frozen)
    multi = [r for r in rows if r.config in ("FedAvg_m^F", "FedProx_m^F")]
    assert len(multi) == 4 and all(r.capable for r in multi)
    # an image-only model cannot read the clinical twin
    r = next(r for r in rows if r.config == "FedAvg_s^F@lung_opacity" and r.task == "sepsis")
    assert not r.capable and NOT_CAPABLE in r.csv_line()


def test_zero_shot_path_on_a_training_task_matches_the_F_row(small_dataset, matrix):
    _, mx = matrix
    res = mx.injected[("fedprox", "multi", None)]
    for name in ("covid19", "mortality"):
        row = zero_shot_rows(res, small_dataset, [get_task(name)], "FedProx_m^F")[0]
        assert row == mx.row("FedProx_m^F", name)
