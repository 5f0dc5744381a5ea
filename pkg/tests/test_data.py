import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pivotseg.data import (
    DataError,
    RecordAnnotation,
    SyntheticConfig,
    Utterance,
    generate_synthetic,
    labels_from_annotations,
    load_afmx,
    load_annotations,
    load_dataset,
    runs,
    save_afmx,
    save_annotations,
    save_dataset,
    split,
    split_sizes,
)
from pivotseg.nn import ConfigError

FAST = dict(semantic_dim=32, n_mels=16, latent_dim=8)


def record(n, highlights, rid="r"):
    utts = [Utterance(10.0 * i, 10.0 * i + 8.0, i % 3, i, 0, 8) for i in range(n)]
    return RecordAnnotation(rid, 10.0 * n, utts, highlights)


# -- file formats ----------------------------------------------------------


def test_afmx_round_trip(tmp_path, rng):
    m = rng.normal(size=(7, 5))
    save_afmx(m, tmp_path / "m.afmx")
    back = load_afmx(tmp_path / "m.afmx")
    assert back.dtype == np.float64 and back.shape == (7, 5)
    np.testing.assert_array_equal(back, m.astype(np.float32).astype(np.float64))
    raw = (tmp_path / "m.afmx").read_bytes()
    assert raw[:4] == b"AFMX" and len(raw) == 16 + 7 * 5 * 4


def test_afmx_rejects_bad_files(tmp_path):
    save_afmx(np.ones((2, 2)), tmp_path / "ok.afmx")
    raw = (tmp_path / "ok.afmx").read_bytes()
    (tmp_path / "magic.afmx").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.afmx").write_bytes(raw[:-4])
    for name in ("magic.afmx", "short.afmx"):
        with pytest.raises(DataError):
            load_afmx(tmp_path / name)
    with pytest.raises(DataError):
        save_afmx(np.ones(3), tmp_path / "flat.afmx")


def test_empty_annotation_file(tmp_path):
    (tmp_path / "a.jsonl").write_text("")
    assert load_annotations(tmp_path / "a.jsonl") == []


utterance_lists = st.lists(
    st.tuples(st.floats(0.5, 20), st.floats(0, 5), st.integers(0, 9)), min_size=1, max_size=12)


@settings(max_examples=40, deadline=None)
@given(rows=utterance_lists, data=st.data())
def test_annotation_round_trip(rows, data, tmp_path_factory):
    t, utts = 0.0, []
    for i, (dur, gap, spk) in enumerate(rows):
        t += gap
        utts.append(Utterance(t, t + dur, spk, i, 0, 1))
        t += dur
    k = data.draw(st.integers(0, len(utts) // 2))
    highlights = [(utts[2 * i].start_s, utts[2 * i].end_s) for i in range(k)]
    rec = RecordAnnotation("x", t, utts, highlights)
    path = tmp_path_factory.mktemp("ann") / "a.jsonl"
    save_annotations([rec, rec], path)
    assert load_annotations(path) == [rec, rec]


def test_overlapping_highlights_name_the_record(tmp_path):
    bad = record(6, [(0.0, 30.0), (20.0, 50.0)], rid="broken")
    save_annotations([record(3, [], "fine"), bad], tmp_path / "a.jsonl")
    with pytest.raises(DataError, match=r"a\.jsonl:2.*broken"):
        load_annotations(tmp_path / "a.jsonl")


def test_unordered_utterances_rejected(tmp_path):
    rec = record(3, [])
    rec.utterances[2].start_s = 5.0
    save_annotations([rec], tmp_path / "a.jsonl")
    with pytest.raises(DataError, match="utterance 2"):
        load_annotations(tmp_path / "a.jsonl")


def test_malformed_json_reports_line(tmp_path):
    (tmp_path / "a.jsonl").write_text('{"record_id": "a"}\n{nope\n')
    with pytest.raises(DataError, match=":1:"):
        load_annotations(tmp_path / "a.jsonl")


# -- labels ------------------------------------------------------------------


def test_labels_without_highlights():
    lab = labels_from_annotations(record(5, []))
    assert not lab.h_bar.any() and not lab.b_bar.any()
    assert np.all(lab.c_bar == 2)


def test_labels_single_run():
    # utterances 3..7 counting from one
    lab = labels_from_annotations(record(10, [(20.0, 68.0)]))
    np.testing.assert_array_equal(np.flatnonzero(lab.h_bar), [2, 3, 4, 5, 6])
    np.testing.assert_array_equal(np.flatnonzero(lab.b_bar), [2, 6])
    assert list(lab.c_bar[[2, 6]]) == [0, 1]


def test_labels_two_runs_one_gap():
    lab = labels_from_annotations(record(8, [(10.0, 28.0), (40.0, 58.0)]))
    assert lab.b_bar.sum() == 4
    np.testing.assert_array_equal(np.flatnonzero(lab.b_bar), [1, 2, 4, 5])


def test_labels_midpoint_rule_and_single_utterance_run():
    # covers the midpoint (4.0) of utterance 0 only
    lab = labels_from_annotations(record(3, [(3.0, 6.0)]))
    np.testing.assert_array_equal(lab.h_bar, [1, 0, 0])
    np.testing.assert_array_equal(lab.b_bar, [1, 0, 0])
    assert lab.c_bar[0] == 0


def test_labels_reject_overlap():
    with pytest.raises(DataError):
        labels_from_annotations(record(6, [(0.0, 30.0), (25.0, 40.0)]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40))
def test_boundary_count_invariant(mask):
    L = len(mask)
    rs = runs(mask)
    rec = record(L, [(10.0 * i, 10.0 * j + 8.0) for i, j in rs])
    lab = labels_from_annotations(rec)
    np.testing.assert_array_equal(lab.h_bar, np.asarray(mask, float))
    long_runs = sum(1 for i, j in rs if j > i)
    assert lab.b_bar.sum() == 2 * long_runs + (len(rs) - long_runs)
    for i, j in rs:
        assert lab.b_bar[i] == lab.b_bar[j] == 1


# -- generator ---------------------------------------------------------------


def test_generator_is_byte_deterministic(tmp_path):
    cfg = SyntheticConfig(n_records=6, scale=0.1, seed=5, **FAST)
    for name in ("a", "b"):
        save_dataset(generate_synthetic(cfg), tmp_path / name, fractions=(1, 1, 1))
    for f in ("annotations.jsonl", "semantic.afmx", "fbank.afmx", "splits.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_scale_tenth_gives_about_thirty_utterances():
    ds = generate_synthetic(SyntheticConfig(n_records=100, scale=0.1, seed=1, **FAST))
    mean = np.mean([len(r.utterances) for r in ds.annotations])
    assert abs(mean - 29.858) <= 0.2 * 29.858


@pytest.mark.parametrize("scale", [1.0, 0.1])
def test_highlight_share_matches_target(scale):
    ds = generate_synthetic(SyntheticConfig(n_records=200, scale=scale, seed=2, **FAST))
    share = np.mean([labels_from_annotations(r).h_bar.mean() for r in ds.annotations])
    assert abs(share - 0.0765) <= 0.02


def test_highlights_align_with_utterances():
    ds = generate_synthetic(SyntheticConfig(n_records=20, scale=0.2, seed=4, **FAST))
    for rec in ds.annotations:
        starts = {u.start_s for u in rec.utterances}
        ends = {u.end_s for u in rec.utterances}
        assert rec.highlights
        for s, e in rec.highlights:
            assert s in starts and e in ends
        lab = labels_from_annotations(rec)
        assert [(rec.utterances[i].start_s, rec.utterances[j].end_s)
                for i, j in runs(lab.h_bar > 0)] == rec.highlights


def _class_gap(signal):
    ds = generate_synthetic(SyntheticConfig(n_records=20, scale=1.0, seed=9,
                                            signal_strength=signal, **FAST))
    y = np.concatenate([labels_from_annotations(r).h_bar for r in ds.annotations]) > 0
    return np.linalg.norm(ds.semantic[y].mean(0) - ds.semantic[~y].mean(0))


def test_signal_strength_controls_separation():
    assert _class_gap(0.0) < 0.5
    assert _class_gap(2.0) > 1.5


def test_generator_config_validation():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(n_records=0))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(scale=0.05))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(highlight_ratio=1.2))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(semantic_dim=8, latent_dim=9))


# -- splits and datasets ---------------------------------------------------------


@pytest.mark.parametrize("n, sizes", [(3655, (3055, 100, 500)), (36, (30, 1, 5)),
                                      (40, (34, 1, 5))])
def test_split_sizes(n, sizes):
    assert split_sizes(n) == sizes


def test_split_fraction_form():
    assert split_sizes(40, (0.6, 0.2, 0.2)) == (24, 8, 8)
    with pytest.raises(ConfigError):
        split_sizes(5)
    with pytest.raises(ConfigError):
        split_sizes(10, (1, -1, 1))


def test_split_disjoint_and_complete():
    items = list(range(100))
    tr, va, te = split(items, seed=3)
    assert sorted(tr + va + te) == items
    assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    assert split(items, seed=3) == (tr, va, te)


def test_dataset_round_trip(small_dataset):
    root, groups, info = small_dataset
    assert info == {"semantic_dim": 16, "n_mels": 8, "n_speakers": info["n_speakers"]}
    assert 1 <= info["n_speakers"] <= 4
    assert [len(groups[k]) for k in ("train", "val", "test")] == [6, 3, 3]
    rec = groups["train"][0]
    L = len(rec.annotation.utterances)
    assert rec.features.semantic.shape == (L, 16)
    assert rec.features.pooled.shape == (L, 64)
    assert rec.labels.h_bar.shape == (L,)


def test_dataset_rejects_unknown_split_ids(tmp_path):
    save_dataset(generate_synthetic(SyntheticConfig(n_records=4, scale=0.1, **FAST)), tmp_path,
                 fractions=(2, 1, 1))
    splits = json.loads((tmp_path / "splits.json").read_text())
    splits["test"].append("ghost")
    (tmp_path / "splits.json").write_text(json.dumps(splits))
    with pytest.raises(DataError, match="ghost"):
        load_dataset(tmp_path)


def test_dataset_requires_each_feature_row_once(tmp_path):
    save_dataset(generate_synthetic(SyntheticConfig(n_records=3, scale=0.1, **FAST)), tmp_path,
                 fractions=(1, 1, 1))
    recs = load_annotations(tmp_path / "annotations.jsonl")
    recs[1].utterances[0].feature_row = recs[0].utterances[0].feature_row
    save_annotations(recs, tmp_path / "annotations.jsonl")
    with pytest.raises(DataError, match="exactly once"):
        load_dataset(tmp_path)
