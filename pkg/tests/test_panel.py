import numpy as np
import pytest

from panel_fegmm.errors import DataError, ParseError, SchemaError, UnderIdentifiedError
from panel_fegmm.moments import linear_rc_iv, variance_components
from panel_fegmm.panel import CsvSchema, IndividualBlock, PanelDataset, load_csv, validate, write_csv


def write(tmp_path, text, name="p.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_groups_and_sorts_by_time(tmp_path):
    path = write(tmp_path, "id,t,y\nb,2,4\na,1,1\nb,1,3\na,3,2\n")
    panel = load_csv(path, {"id": "id", "time": "t", "values": ["y"]})
    assert panel.ids == ["b", "a"]
    assert panel[0].times.tolist() == [1, 2]
    assert panel[0].values[:, 0].tolist() == [3.0, 4.0]
    assert panel.T_i.tolist() == [2, 2]
    assert not panel.balanced or panel.T_bar == 2.0


def test_unbalanced_panel(tmp_path):
    path = write(tmp_path, "id,t,y\n1,1,0\n1,2,0\n2,1,0\n")
    panel = load_csv(path, {"id": "id", "time": "t", "values": ["y"]})
    assert not panel.balanced
    assert panel.T_bar == 1.5
    with pytest.raises(DataError):
        panel.stacked()


def test_grouped_schema_preset_orders_columns():
    s = CsvSchema.from_mapping({"id": "i", "time": "t", "y": "C", "x1": ["one", "P"], "x2": "L",
                                "w2": ["a", "b"]})
    assert s.values == ("C", "one", "P", "L", "a", "b")


@pytest.mark.parametrize("text,err", [
    ("id,t,y\n1,x,2\n", ParseError),
    ("id,t,y\n1,1,abc\n", ParseError),
    ("id,t,y\n1,1,nan\n", ParseError),
    ("id,t\n1,1\n", SchemaError),
    ("id,t,y\n1,1,2\n1,1,3\n", DataError),
    ("id,t,y\n", DataError),
])
def test_malformed_input(tmp_path, text, err):
    with pytest.raises(err):
        load_csv(write(tmp_path, text), {"id": "id", "time": "t", "values": ["y"]})


def test_schema_requires_id_and_values():
    with pytest.raises(SchemaError):
        CsvSchema.from_mapping({"time": "t", "values": ["y"]})
    with pytest.raises(SchemaError):
        CsvSchema.from_mapping({"id": "i", "time": "t"})


def test_round_trip(tmp_path, rng):
    panel = PanelDataset.from_arrays(rng.normal(size=(4, 6, 3)), columns=("a", "b", "c"))
    path = tmp_path / "out.csv"
    write_csv(panel, path)
    back = load_csv(path, {"id": "id", "time": "time", "values": ["a", "b", "c"]})
    assert back.ids == panel.ids
    for x, y in zip(back, panel):
        np.testing.assert_array_equal(x.values, y.values)
        np.testing.assert_array_equal(x.times, y.times)


def test_blocks_are_immutable(rng):
    b = IndividualBlock("1", np.arange(3), rng.normal(size=(3, 2)))
    with pytest.raises(ValueError):
        b.values[0, 0] = 1.0


def test_block_invariants():
    with pytest.raises(DataError):
        IndividualBlock("1", [1, 1], np.zeros((2, 1)))
    with pytest.raises(DataError):
        IndividualBlock("1", [1, 2], np.zeros((3, 1)))
    with pytest.raises(DataError):
        PanelDataset((IndividualBlock("1", [1], [[0.0]]), IndividualBlock("1", [2], [[0.0]])))


def test_validate_order_condition_names_individual(rng):
    panel = PanelDataset((IndividualBlock("ok", [1, 2, 3], rng.normal(size=(3, 1))),
                          IndividualBlock("short", [1], rng.normal(size=(1, 1)))))
    with pytest.raises(UnderIdentifiedError) as exc:
        validate(panel, variance_components())
    assert exc.value.ids == ["short"]


def test_validate_arity(rng):
    panel = PanelDataset.from_arrays(rng.normal(size=(2, 5, 3)))
    with pytest.raises(DataError):
        validate(panel, linear_rc_iv(2, 1, 3))
