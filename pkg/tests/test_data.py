import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtm import data as d
from mtm.errors import DataError, ParseError, SchemaError


def write_lines(tmp_path, lines):
    p = tmp_path / "ds.ndjson"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_load_minimal_record(tmp_path):
    p = write_lines(tmp_path, ['{"id":"a","label":1,"n_channels":2,"events":[{"t":0.5,"c":0,"v":1.0}]}'])
    (s,) = d.load_ndjson(p)
    assert s.id == "a" and s.label == 1
    assert d.to_dense(s).n_times == 1


def test_load_out_of_order_is_canonicalized(tmp_path):
    rec = {"id": "a", "label": 0, "n_channels": 2,
           "events": [{"t": 2.0, "c": 1, "v": 7.0}, {"t": 1.0, "c": 0, "v": 5.0}]}
    rec2 = dict(rec, events=list(reversed(rec["events"])))
    p = write_lines(tmp_path, [json.dumps(rec), json.dumps(rec2)])
    a, b = d.load_ndjson(p)
    da, db = d.to_dense(a), d.to_dense(b)
    assert np.array_equal(da.times, db.times)
    assert np.array_equal(da.values, db.values)
    assert np.array_equal(da.observed, db.observed)


def test_duplicate_event_is_data_error(tmp_path):
    p = write_lines(tmp_path, ['{"id":"a","label":0,"n_channels":2,"events":'
                               '[{"t":1,"c":0,"v":1},{"t":1,"c":0,"v":2}]}'])
    with pytest.raises(DataError, match="duplicate"):
        d.load_ndjson(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = write_lines(tmp_path, ['{"id":"a","label":0,"n_channels":1,"events":[]}', "{oops"])
    with pytest.raises(ParseError) as err:
        d.load_ndjson(p)
    assert err.value.line == 2


def test_channel_out_of_range_is_schema_error(tmp_path):
    p = write_lines(tmp_path, ['{"id":"a","label":0,"n_channels":2,"events":[{"t":1,"c":2,"v":1}]}'])
    with pytest.raises(SchemaError):
        d.load_ndjson(p)


def test_ndjson_round_trip(tmp_path):
    ds = d.synth_generate(d.SynthSpec(n_samples=5, n_channels=3, seed=1))
    d.dump_ndjson(ds, tmp_path / "x.ndjson")
    back = d.load_ndjson(tmp_path / "x.ndjson")
    for a, b in zip(ds, back):
        assert a.id == b.id and np.array_equal(a.v, b.v) and np.array_equal(a.t, b.t)


def series(events, C=2, label=0):
    return d.EventSeries.from_events("x", C, label, events)


def test_to_dense_async_pair():
    v = d.to_dense(series([(1, 0, 5.0), (2, 1, 7.0)]))
    assert v.n_times == 2
    assert v.observed.tolist() == [[True, False], [False, True]]


def test_to_dense_sync_pair():
    v = d.to_dense(series([(1, 0, 5.0), (1, 1, 7.0)]))
    assert v.observed.tolist() == [[True, True]]


def test_to_dense_empty_channel():
    v = d.to_dense(series([(1, 0, 5.0), (2, 1, 7.0)], C=3))
    assert not v.observed[:, 2].any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_dense_view_invariant_to_event_permutation(seed):
    rng = np.random.default_rng(seed)
    (s,) = d.synth_generate(d.SynthSpec(n_samples=1, n_channels=3, alpha=0.5, seed=seed))
    ev = s.events
    perm = [ev[i] for i in rng.permutation(len(ev))]
    a, b = d.to_dense(s), d.to_dense(series(perm, C=3))
    assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
    assert np.array_equal(a.observed, b.observed)
    assert a.observed.any(axis=1).all()
    assert np.all(np.diff(a.times) > 0)


def test_standardize_exact():
    train = [series([(0, 0, 2.0), (1, 0, 4.0), (0, 1, 3.0), (1, 1, 3.0)])]
    test = [series([(0, 0, 5.0), (0, 1, 3.0)])]
    norm, tr, te = d.standardize(train, test)
    assert norm.mean.tolist() == [3.0, 3.0]
    assert norm.std.tolist() == [1.0, 1e-8]
    assert sorted(tr[0].v[tr[0].c == 0].tolist()) == [-1.0, 1.0]
    assert tr[0].v[tr[0].c == 1].tolist() == [0.0, 0.0]
    assert te[0].v[te[0].c == 0].tolist() == [2.0]
    assert d.Normalizer.from_dict(json.loads(json.dumps(norm.to_dict()))).mean.tolist() == [3.0, 3.0]


def test_mask_ratio_zero_is_identity():
    ds = d.synth_generate(d.SynthSpec(n_samples=10, seed=2))
    out = d.mask_channels(ds, 0.0, seed=1)
    assert all(np.array_equal(a.v, b.v) for a, b in zip(ds, out))


def test_mask_half_of_four_channels():
    ds = d.synth_generate(d.SynthSpec(n_samples=20, n_channels=4, seed=2))
    out = d.mask_channels(ds, 0.5, seed=3)
    assert all(len(np.unique(s.c)) == 2 for s in out)


def test_mask_is_deterministic_and_keeps_survivors():
    ds = d.synth_generate(d.SynthSpec(n_samples=20, n_channels=4, alpha=0.5, seed=2))
    a, b = d.mask_channels(ds, 0.25, 9), d.mask_channels(ds, 0.25, 9)
    for orig, x, y in zip(ds, a, b):
        assert np.array_equal(x.t, y.t) and np.array_equal(x.c, y.c)
        kept = set(zip(x.t.tolist(), x.c.tolist(), x.v.tolist()))
        assert kept <= set(zip(orig.t.tolist(), orig.c.tolist(), orig.v.tolist()))
        # whole channels removed
        for c in np.unique(x.c):
            assert (x.c == c).sum() == (orig.c == c).sum()


def test_mask_drops_emptied_samples(caplog):
    s = series([(1, 0, 1.0)], C=2)
    with caplog.at_level(logging.WARNING):
        out = d.mask_channels([s] * 30, 0.5, seed=0)
    assert 0 < len(out) < 30
    assert "dropped" in caplog.text


def test_synth_alpha_one_is_disjoint():
    ds = d.synth_generate(d.SynthSpec(n_samples=50, n_channels=2, alpha=1.0, seed=3))
    assert sum(d.cooccurring_timepoints(s) for s in ds) == 0


def test_synth_alpha_zero_is_shared():
    ds = d.synth_generate(d.SynthSpec(n_samples=50, n_channels=3, alpha=0.0, seed=3))
    assert all(d.to_dense(s).observed.all() for s in ds)


def test_synth_majority_vote_oracle_is_perfect():
    ds, lat = d.synth_generate(d.SynthSpec(n_samples=300, n_channels=4, seed=4), return_latent=True)
    correct = 0
    for s, z in zip(ds, lat):
        signs = np.sign(z.amplitude)
        votes = [1 if signs[j] == signs[0] else -1 for j in range(1, len(signs))]
        correct += int((sum(votes) > 0) == bool(s.label))
    assert correct == len(ds)
    labels = [s.label for s in ds]
    assert 0.35 < np.mean(labels) < 0.65


def test_synth_cooccurrence_monotone_in_alpha():
    counts = []
    for alpha in (0.0, 0.5, 1.0):
        ds = d.synth_generate(d.SynthSpec(n_samples=40, n_channels=4, alpha=alpha, seed=8))
        counts.append(sum(d.cooccurring_timepoints(s) for s in ds))
    assert counts[0] >= counts[1] >= counts[2]


def test_synth_rejects_bad_spec():
    with pytest.raises(ValueError):
        d.synth_generate(d.SynthSpec(n_channels=1))


def test_split_80_10_10():
    ds = d.synth_generate(d.SynthSpec(n_samples=100, seed=5))
    tr, va, te = d.split(ds, d.SplitSpec(seed=1))
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    ids = [s.id for s in tr + va + te]
    assert sorted(ids) == sorted(s.id for s in ds) and len(set(ids)) == 100
    tr2, va2, te2 = d.split(ds, d.SplitSpec(seed=1))
    assert [s.id for s in te] == [s.id for s in te2]
    other = d.split(ds, d.SplitSpec(subset_id=2, seed=1))[2]
    assert [s.id for s in te] != [s.id for s in other]


def test_split_is_stratified():
    ds = d.synth_generate(d.SynthSpec(n_samples=400, seed=6))
    tr, va, te = d.split(ds)
    overall = np.mean([s.label for s in ds])
    for part in (tr, va, te):
        assert abs(np.mean([s.label for s in part]) - overall) < 0.03


def test_split_small_class_falls_back(caplog):
    ds = [series([(1, 0, 1.0)], label=0) for _ in range(10)] + [series([(1, 0, 1.0)], label=1)]
    with caplog.at_level(logging.WARNING):
        parts = d.split(ds)
    assert sum(map(len, parts)) == 11
    assert "unstratified" in caplog.text
