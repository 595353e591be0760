import json

import pytest
from hypothesis import given, strategies as st

from cxrdistl.data import (N_SYMPTOMS, SYMPTOMS, Box, DiseaseLabel, Manifest, ManifestError, class_counts,
                           dumps_record, load_manifest, parse_manifest, write_manifest)

from conftest import make_record


def _line(**over):
    obj = {"image_path": "x.png", "patient_id": "P1", "source": "s", "disease": "tb",
           "symptoms": [0, 1, 0, 0, 0, 0, 1], "boxes": [{"symptom": "effusion", "x": 1, "y": 2, "w": 3, "h": 4}]}
    obj.update(over)
    return json.dumps(obj)


def test_symptom_order_is_canonical():
    assert SYMPTOMS == ("infiltration", "effusion", "atelectasis", "nodule", "mass", "pneumothorax",
                        "consolidation")
    assert N_SYMPTOMS == 7


def test_disease_index():
    assert [d.index for d in (DiseaseLabel.NORMAL, DiseaseLabel.TB, DiseaseLabel.COVID)] == [0, 1, 2]
    assert DiseaseLabel.UNLABELED.index == -1
    assert DiseaseLabel.from_index(2) is DiseaseLabel.COVID


def test_empty_file(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert len(load_manifest(p)) == 0


def test_three_lines_in_order(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(_line(image_path=f"{i}.png") for i in range(3)) + "\n")
    m = load_manifest(p)
    assert [r.image_path for r in m.records] == ["0.png", "1.png", "2.png"]
    r = m.records[0]
    assert r.disease is DiseaseLabel.TB
    assert r.symptoms == (False, True, False, False, False, False, True)
    assert r.boxes == (Box("effusion", 1, 2, 3, 4),)


def test_short_symptom_vector_names_field():
    with pytest.raises(ManifestError, match="symptoms length") as e:
        parse_manifest([_line(), _line(image_path="b.png", symptoms=[0] * 6)])
    assert e.value.line == 2


@pytest.mark.parametrize("over, needle", [
    ({"disease": "flu"}, "disease"),
    ({"symptoms": [0, 0, 0, 0, 0, 0, 2]}, "symptoms"),
    ({"boxes": [{"symptom": "nodule", "x": -1, "y": 0, "w": 1, "h": 1}]}, "boxes"),
    ({"boxes": [{"symptom": "cough", "x": 0, "y": 0, "w": 1, "h": 1}]}, "boxes.symptom"),
    ({"patient_id": 3}, "patient_id"),
    ({"extra": 1}, "unknown key"),
])
def test_schema_violations_name_field(over, needle):
    with pytest.raises(ManifestError, match=needle):
        parse_manifest([_line(**over)])


def test_missing_key_and_bad_json():
    obj = json.loads(_line())
    del obj["source"]
    with pytest.raises(ManifestError, match="missing key.*source"):
        parse_manifest([json.dumps(obj)])
    with pytest.raises(ManifestError, match="line 1: parse error"):
        parse_manifest(["{not json"])


def test_duplicate_path_rejected():
    with pytest.raises(ManifestError, match="duplicate"):
        parse_manifest([_line(), _line()])
    r = make_record()
    with pytest.raises(ManifestError, match="duplicate"):
        Manifest((r, r))


def test_null_symptoms_distinct_from_all_false():
    m = parse_manifest([_line(symptoms=None, boxes=[]), _line(image_path="b.png", symptoms=[0] * 7)])
    assert m.records[0].symptoms is None
    assert m.records[1].symptoms == (False,) * 7


def test_class_counts_multilabel():
    recs = (make_record("a", symptoms=(1, 1, 0, 0, 0, 0, 0)),
            make_record("b", disease=DiseaseLabel.TB, symptoms=(0, 0, 0, 1, 0, 0, 1)))
    dis, sym = class_counts(Manifest(recs))
    assert sum(sym.values()) == 4
    assert dis == {DiseaseLabel.NORMAL: 1, DiseaseLabel.TB: 1, DiseaseLabel.COVID: 0}


def test_single_normal_record_counts():
    dis, _ = class_counts(Manifest((make_record(),)))
    assert dis == {DiseaseLabel.NORMAL: 1, DiseaseLabel.TB: 0, DiseaseLabel.COVID: 0}


def test_patients_and_select():
    recs = (make_record("a", "P2"), make_record("b", "P1"), make_record("c", "P2"))
    m = Manifest(recs)
    assert m.patients() == ["P2", "P1"]
    assert [r.image_path for r in m.select_patients(["P2"])] == ["a", "c"]


records = st.builds(
    lambda i, pid, dis, sym, boxes: make_record(f"img{i}.png", f"P{pid}", dis, sym, boxes),
    st.integers(0, 10**6), st.integers(0, 50), st.sampled_from(list(DiseaseLabel)),
    st.one_of(st.none(), st.tuples(*[st.booleans()] * 7)),
    st.lists(st.builds(Box, st.sampled_from(SYMPTOMS), *[st.integers(0, 500)] * 4), max_size=3),
)


@given(st.lists(records, max_size=8, unique_by=lambda r: r.image_path))
def test_round_trip_byte_identical(tmp_path_factory, recs):
    d = tmp_path_factory.mktemp("rt")
    write_manifest(Manifest(tuple(recs)), d / "a.jsonl")
    m = load_manifest(d / "a.jsonl")
    assert m.records == tuple(recs)  # symptom order never permuted
    write_manifest(m, d / "b.jsonl")
    assert (d / "a.jsonl").read_bytes() == (d / "b.jsonl").read_bytes()
    _, sym = class_counts(m)
    assert sum(sym.values()) == sum(r.symptom_count() for r in recs)


def test_dumps_sorted_keys():
    line = dumps_record(make_record())
    assert list(json.loads(line)) == sorted(json.loads(line))
