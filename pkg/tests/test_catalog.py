import copy
import json

import pytest

from aact import catalog as cat
from conftest import data_json, data_path


def base_doc():
    return copy.deepcopy(data_json("catalog.json"))


def test_demo_catalogs_load():
    c = cat.load_catalog(data_path("catalog.json"))
    record = c.sut("sim-ecu-01")
    assert cat.resolve_symbol(record, "CAN_SPD").value == "5A1#1122334455667788"
    assert cat.resolve_tool(c, "sim-ecu-01", "exploit", "Blueborne").tool == "sim-exploit"
    assert c.can_window_s == 10
    full = cat.load_catalog(data_path("catalog_full.json"))
    assert set(c.patterns) < set(full.patterns)
    assert cat.validate_record(record) == []


def test_json_round_trip():
    c = cat.load_catalog(data_path("catalog_full.json"))
    again = cat.parse_catalog(json.loads(json.dumps(cat.catalog_to_json(c))))
    assert cat.catalog_to_json(again) == cat.catalog_to_json(c)


def test_lookup_is_exact():
    c = cat.load_catalog(data_path("catalog.json"))
    with pytest.raises(cat.UnknownPattern):
        cat.resolve_tool(c, "sim-ecu-01", "exploit", "blueborne")
    with pytest.raises(cat.UnknownSymbol) as err:
        cat.resolve_symbol(c.sut("sim-ecu-01"), "ETH_IF")
    assert err.value.placeholder == "ETH_IF"
    with pytest.raises(cat.CatalogError):
        c.sut("nope")


def test_override_shadows_library():
    doc = base_doc()
    doc["suts"][0]["toolOverrides"] = {
        "scan/BlueBorne": {"tool": "custom-scan", "params": ["${BT_IF}"]}}
    c = cat.parse_catalog(doc)
    assert cat.resolve_tool(c, "sim-ecu-01", "scan", "BlueBorne").tool == "custom-scan"


def _mutate(fn):
    doc = base_doc()
    fn(doc)
    return doc


@pytest.mark.parametrize("edit,error", [
    (lambda d: d["suts"][0]["symbols"].update(CAN_X={"kind": "can_frame", "value": "zz"}),
     cat.InvariantViolation),
    (lambda d: d["suts"][0]["symbols"].update(P={"kind": "port", "value": "70000"}),
     cat.InvariantViolation),
    (lambda d: d["suts"][0]["symbols"].update(P={"kind": "colour", "value": "red"}),
     cat.InvariantViolation),
    (lambda d: d["suts"][0]["symbols"].update(lower={"kind": "string", "value": "x"}),
     cat.InvariantViolation),
    (lambda d: d["suts"][0]["symbols"].update(P="x"), cat.FormatError),
    (lambda d: d["suts"].append(copy.deepcopy(d["suts"][0])), cat.InvariantViolation),
    (lambda d: d["patterns"].update({"x/Y": {"tool": "t", "params": ["${NOT_DEFINED}"]}}),
     cat.InvariantViolation),
    (lambda d: d["patterns"].update({"x/Y": {"tool": "t", "params": ["${bad-ref}"]}}),
     cat.InvariantViolation),
    (lambda d: d["patterns"].update({"x/Y": {"params": []}}), cat.FormatError),
    (lambda d: d["patterns"].update({"x/Y": {"tool": "t", "defaultDuration_s": -1}}),
     cat.InvariantViolation),
    (lambda d: d["patterns"].update({"x/Y": {"tool": "t", "extract": {"var": "v", "pattern": "("}}}),
     cat.InvariantViolation),
    (lambda d: d["patterns"].update({"x/Y": {"tool": "t", "extract": {"var": "v", "pattern": "x"}}}),
     cat.InvariantViolation),
    (lambda d: d["patterns"].update({"x/Y": {"tool": "t", "extract": {"var": "V", "pattern": "(x)"}}}),
     cat.InvariantViolation),
    (lambda d: d.update(canWindow_s=0), cat.InvariantViolation),
    (lambda d: d.update(suts={}), cat.FormatError),
])
def test_invalid_catalogs(edit, error):
    with pytest.raises(error):
        cat.parse_catalog(_mutate(edit))


def test_frame_values_are_normalized_on_load():
    c = cat.parse_catalog(base_doc())
    assert c.sut("sim-ecu-01").symbols["CAN_SPD"].value == "5A1#1122334455667788"


def test_bad_json_reports_location(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"suts": [\n  oops]}')
    with pytest.raises(cat.FormatError) as err:
        cat.load_catalog(p)
    assert ":2:" in str(err.value)


def test_records_are_read_only():
    c = cat.load_catalog(data_path("catalog.json"))
    with pytest.raises(TypeError):
        c.sut("sim-ecu-01").symbols["NEW"] = cat.SymbolBinding("string", "x")
