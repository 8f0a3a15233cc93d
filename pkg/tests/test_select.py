import numpy as np
import pytest

from sim.errors import ConfigError
from workloads.select import (
    COLUMNS,
    ROW_BYTES,
    SelectMode,
    constant_for,
    load_table,
    make_table,
    place_table,
    select_operator,
    select_oracle,
    selectivity_sweep,
)

ROWS = 200


@pytest.fixture
def table():
    return make_table(ROWS, np.random.default_rng(11))


def test_tables_and_the_oracle(table):
    assert table.shape == (ROWS, COLUMNS)
    assert table[:, 0].tolist() == list(range(ROWS))
    assert constant_for(0.25) == 250
    assert len(select_oracle(table, 1, constant_for(0.0))) == 0
    assert len(select_oracle(table, 1, constant_for(1.0))) == ROWS


def test_table_files(tmp_path, table):
    path = tmp_path / "rows.bin"
    path.write_bytes(table.astype("<u4").tobytes())
    assert np.array_equal(load_table(path), table)
    path.write_bytes(bytes(ROW_BYTES + 4))
    with pytest.raises(ConfigError):
        load_table(path)


@pytest.mark.parametrize("mode", list(SelectMode))
@pytest.mark.parametrize("selectivity", [0.0, 0.5, 1.0])
def test_both_modes_match_the_oracle(system, table, mode, selectivity):
    app = system.create_app("a")
    segment = place_table(app, table, "n0")
    handle = app.mcc_create("n0")
    constant = constant_for(selectivity)
    _, result = system.execute(app, select_operator(app, handle, segment, ROWS, 2, constant, mode))
    assert np.array_equal(np.sort(result.row_ids), select_oracle(table, 2, constant))
    assert result.elapsed_ns > 0


def test_column_is_checked(system, table):
    app = system.create_app("a")
    handle = app.mcc_create("n0")
    with pytest.raises(ValueError):
        next(select_operator(app, handle, place_table(app, table, "n0"), ROWS, COLUMNS, 1, SelectMode.STREAM))


def test_sweep_reports_both_modes():
    elapsed = selectivity_sweep([0.1, 0.9], 64, seed=2, progress=False)
    assert set(elapsed) == set(SelectMode)
    assert all(len(times) == 2 and min(times) > 0 for times in elapsed.values())


def test_stream_wins_sparse_results_and_materialize_wins_dense_ones():
    elapsed = selectivity_sweep([0.01, 0.9], 1024, seed=6, progress=False)
    stream, materialize = elapsed[SelectMode.STREAM], elapsed[SelectMode.MATERIALIZE]
    assert stream[0] < materialize[0]
    assert materialize[1] < stream[1]
