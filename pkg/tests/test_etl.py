import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srlrnn.cohort import DoctorPolicy, PatientModel, sample_cohort
from srlrnn.etl import (AGE_REASON, MISSING_REASON, CohortInfo, DataError, PreprocessSettings, RawRecord,
                        Standardizer, UnitSeries, apply_code_map, bin_to_units, filter_cohort, impute_knn,
                        preprocess_records, preprocess_trajectories, rank_codes, read_code_map, read_extract, read_jsonl,
                        restrict_vocab, to_batch, truncate_vocab, write_jsonl)
from srlrnn.tensor import make_rng


def record(measurements, meds=(), length=None, age=40.0, died=False, rid="a1"):
    return RawRecord(rid, {"age": age}, list(measurements), list(meds), [], died, length)


# binning -----------------------------------------------------------------------


def test_binning_examples():
    series = bin_to_units(record([(1.0, "glucose", 100.0), (5.0, "glucose", 120.0)], length=24))
    assert series.values.tolist() == [[110.0]]
    one = bin_to_units(record([(2.0, "hr", 80.0), (30.0, "hr", 90.0)], length=48))
    assert one.n_units == 2 and one.values[:, 0].tolist() == [80.0, 90.0]
    assert bin_to_units(record([(0.0, "hr", 1.0)], length=48)).n_units == 2


def test_binning_marks_missing_and_collects_meds():
    s = bin_to_units(record([(1.0, "hr", 70.0), (50.0, "sbp", 110.0)], meds=[(3.0, "B"), (4.0, "A"), (49.0, "A")],
                            length=72))
    assert s.variables == ("hr", "sbp")
    assert np.isnan(s.values[1]).all() and np.isnan(s.values[0, 1])
    assert s.meds == [["A", "B"], [], ["A"]]
    assert s.missing_variables == 0


def test_binning_rejects_empty_record():
    with pytest.raises(DataError):
        bin_to_units(record([]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 130), st.sampled_from(["a", "b", "c"]), st.floats(-5, 5)),
                min_size=1, max_size=40),
       st.floats(1.0, 120.0))
def test_binning_conserves_counts(points, length):
    rec = record(points, length=length)
    inside = [p for p in points if 0 <= p[0] <= length]
    if not inside:
        return
    s = bin_to_units(rec, ("a", "b", "c"))
    assert s.counts.sum() == len(inside)
    for j, name in enumerate("abc"):
        vals = [p[2] for p in inside if p[1] == name]
        assert np.nansum(s.values[:, j] * s.counts[:, j]) == pytest.approx(sum(vals), abs=1e-9)


# imputation --------------------------------------------------------------------


def test_impute_without_gaps_is_identity():
    X = make_rng(0).normal(size=(6, 3))
    assert np.array_equal(impute_knn(X, k=2), X)


def test_impute_copies_exact_duplicate():
    X = np.array([[1.0, 2.0, np.nan], [1.0, 2.0, 7.0], [5.0, -3.0, 1.0], [0.0, 9.0, 4.0]])
    assert impute_knn(X, k=1)[0, 2] == 7.0


def test_impute_five_row_hand_example():
    # columns a and b have the same spread (std sqrt(2.64)), so z-scored distances
    # from row 0 are the raw ones: 1, 1, sqrt(18), sqrt(32). k=2 averages rows 1 and 2.
    X = np.array([[0, 0, np.nan], [0, 1, 10], [1, 0, 20], [3, 3, 30], [4, 4, 40]], dtype=float)
    assert impute_knn(X, k=2)[0, 2] == pytest.approx(15.0, abs=1e-12)
    assert impute_knn(X, k=4)[0, 2] == pytest.approx(25.0, abs=1e-12)


def test_impute_without_comparable_donor_uses_column_mean():
    X = np.array([[1.0, np.nan], [np.nan, 4.0], [np.nan, 8.0]])
    assert impute_knn(X, k=1)[0, 1] == pytest.approx(6.0)


def test_impute_errors():
    X = np.array([[1.0, np.nan], [2.0, np.nan]])
    with pytest.raises(DataError, match="lactate"):
        impute_knn(X, names=["hr", "lactate"])
    with pytest.raises(ValueError):
        impute_knn(np.array([[1.0, np.nan]]), k=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_impute_leaves_observed_entries_untouched(seed, k):
    rng = make_rng(seed)
    X = rng.normal(size=(12, 4))
    holes = rng.random(X.shape) < 0.3
    holes[:, 0] = False                # every row keeps one observed value
    X[holes] = np.nan
    out = impute_knn(X, k=k)
    assert np.array_equal(out[~holes], X[~holes])
    assert np.all(np.isfinite(out))


# filtering and vocabularies ----------------------------------------------------


def series(rid, age, missing, n_vars=12):
    values = np.ones((2, n_vars))
    counts = np.ones((2, n_vars), dtype=int)
    counts[:, :missing] = 0
    values[:, :missing] = np.nan
    return UnitSeries(rid, {"age": age}, tuple(f"v{j}" for j in range(n_vars)), values, counts,
                      [[], []], [], False)


def test_filter_examples():
    kept, report = filter_cohort([series("a", 17, 0), series("b", 40, 11), series("c", 18, 10),
                                  series("d", 16, 12)])
    assert [a.id for a in kept] == ["c"]
    assert report.excluded == {AGE_REASON: 2, MISSING_REASON: 1}
    assert report.retained == 1
    assert ("d", AGE_REASON) in report.rows


def test_vocab_examples():
    def adm(meds, dx=()):
        return UnitSeries("x", {"age": 50}, ("v",), np.ones((len(meds), 1)), np.ones((len(meds), 1), dtype=int),
                          meds, list(dx), False)

    cohort = [adm([["m1", "m2"], ["m1"]], ["d9"]), adm([["m3"]], ["d1"])]
    vocab, coded = truncate_vocab(cohort, 100, 100)
    assert sorted(vocab.medications) == ["m1", "m2", "m3"] and sorted(vocab.diseases) == ["d1", "d9"]
    cohort = [adm([["x"]] * 5 + [["y"]] * 3)]
    vocab, coded = truncate_vocab(cohort, 1, 1)
    assert vocab.medications == ["x"] and coded[0].meds == [[0]] * 5 + [[]] * 3
    assert rank_codes({"b": 2, "a": 2, "c": 1}, 2) == ["a", "b"]


def test_code_map_merges_codes():
    s = UnitSeries("x", {"age": 50}, ("v",), np.ones((1, 1)), np.ones((1, 1), dtype=int),
                   [["amoxicillin", "ampicillin", "heparin"]], [], False)
    mapped = apply_code_map([s], {"amoxicillin": "J01C", "ampicillin": "J01C"})
    assert mapped[0].meds == [["J01C", "heparin"]]


def test_read_code_map(tmp_path):
    path = tmp_path / "map.csv"
    path.write_text("code,category\namoxicillin,J01C\nheparin,B01A\n")
    assert read_code_map(path) == {"amoxicillin": "J01C", "heparin": "B01A"}


# file formats and pipelines ------------------------------------------------------


def write_extract(d, rows_adm, rows_m, rows_rx, rows_dx):
    d.mkdir(exist_ok=True)
    (d / "admissions.csv").write_text("admission_id,died,length_hours,age,weight\n" + "".join(rows_adm))
    (d / "measurements.csv").write_text("admission_id,hours,variable,value\n" + "".join(rows_m))
    (d / "medications.csv").write_text("admission_id,hours,code\n" + "".join(rows_rx))
    (d / "diagnoses.csv").write_text("admission_id,code\n" + "".join(rows_dx))


def test_extract_pipeline(tmp_path):
    d = tmp_path / "extract"
    write_extract(
        d,
        ["a,0,48,60,70\n", "b,1,,30,80\n", "kid,0,24,12,30\n", "c,0,24,50,75\n"],
        ["a,1,hr,80\n", "a,2,hr,100\n", "a,30,sbp,120\n", "b,3,hr,60\n", "b,40,sbp,100\n",
         "kid,1,hr,110\n", "c,2,hr,70\n", "c,3,sbp,130\n"],
        ["a,1,heparin\n", "a,30,insulin\n", "b,5,heparin\n", "c,1,heparin\n"],
        ["a,428\n", "b,428\n", "b,250\n", "c,038\n"],
    )
    records = read_extract(d)
    trajs, vocab, variables, report = preprocess_records(records, PreprocessSettings(knn=1))
    assert [t.id for t in trajs] == ["a", "b", "c"]
    assert report.excluded == {AGE_REASON: 1}
    assert variables == ("hr", "sbp")
    assert vocab.medications == ["heparin", "insulin"] and vocab.diseases[0] == "428"
    a = trajs[0]
    assert a.length == 2 and a.obs[0, 0] == 90.0 and a.obs[1, 1] == 120.0
    assert np.all(np.isfinite(a.obs))
    assert a.meds == [[0], [1]] and a.rewards.tolist() == [0.0, 15.0]
    assert trajs[1].rewards[-1] == -15.0 and not trajs[1].survived
    # processed output is a fixed point of the pipeline
    again, rep = preprocess_trajectories(trajs)
    assert rep.retained == len(trajs)
    assert [t.to_json() for t in again] == [t.to_json() for t in trajs]


def test_extract_errors_name_file_and_line(tmp_path):
    d = tmp_path / "bad"
    write_extract(d, ["a,0,48,60,70\n"], ["a,1,hr,80\n", "a,x,hr,90\n"], [], [])
    with pytest.raises(DataError, match=r"measurements.csv:3"):
        read_extract(d)
    write_extract(d, ["a,0,48,60,70\n"], ["zz,1,hr,80\n"], [], [])
    with pytest.raises(DataError, match="unknown admission"):
        read_extract(d)
    write_extract(d, ["a,0,48,60,70\n"], ["a,1,hr,80\n"], [], [])
    (d / "diagnoses.csv").unlink()
    with pytest.raises(DataError, match="not found"):
        read_extract(d)


def test_jsonl_errors_report_line_numbers(tmp_path):
    cohort = sample_cohort(PatientModel(), DoctorPolicy(), 3, seed=0)
    path = tmp_path / "c.jsonl"
    write_jsonl(cohort, path)
    lines = path.read_text().splitlines()
    lines[1] = lines[1][:40]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"c.jsonl:2"):
        read_jsonl(path)


def test_synthetic_round_trip_is_idempotent(tmp_path):
    cohort = sample_cohort(PatientModel(), DoctorPolicy(), 200, seed=3)
    write_jsonl(cohort, tmp_path / "raw.jsonl")
    once, _ = preprocess_trajectories(read_jsonl(tmp_path / "raw.jsonl"), PreprocessSettings())
    write_jsonl(once, tmp_path / "once.jsonl")
    twice, _ = preprocess_trajectories(read_jsonl(tmp_path / "once.jsonl"), PreprocessSettings())
    write_jsonl(twice, tmp_path / "twice.jsonl")
    assert (tmp_path / "raw.jsonl").read_bytes() == (tmp_path / "once.jsonl").read_bytes()
    assert (tmp_path / "once.jsonl").read_bytes() == (tmp_path / "twice.jsonl").read_bytes()


def test_restrict_vocab_is_idempotent_when_truncating():
    cohort = sample_cohort(PatientModel(), DoctorPolicy(), 100, seed=4)
    once = restrict_vocab(cohort, 5, 4)
    info = CohortInfo.infer(once)
    assert info.n_meds <= 5 and info.n_diseases <= 4
    twice = restrict_vocab(once, 5, 4)
    assert [t.to_json() for t in once] == [t.to_json() for t in twice]


def test_batch_and_standardizer():
    cohort = sample_cohort(PatientModel(), DoctorPolicy(), 30, seed=5)
    info = CohortInfo.infer(cohort, n_meds=20, n_diseases=12)
    batch = to_batch(cohort, info)
    assert batch.lengths.tolist() == [t.length for t in cohort]
    sc = Standardizer.fit(batch)
    z = sc.transform(batch)
    assert np.allclose(z.ts[z.mask].mean(axis=0), 0, atol=1e-12)
    back = Standardizer.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert np.array_equal(back.transform(batch).ts, z.ts)
