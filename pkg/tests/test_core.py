import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from silentab.core import (ClassLabel, ClassValue, Closer, ConversationEvent, DataError, Dataset,
                           EventKind, ObservationTriple, SubLabel, build_dataset, derive_class,
                           rate_from_unit, rate_to_unit, read_events_jsonl, read_triples_csv,
                           write_triples_csv)

MIN = 60_000


def ev(kind, t_min, closer=None, words=None, cid="c1"):
    return ConversationEvent(cid, EventKind(kind), int(round(t_min * MIN)),
                             Closer(closer) if closer else None, words)


class TestDeriveClass:
    def test_kab(self):
        label, tr = derive_class([ev("enter_queue", 0), ev("close", 5, "customer")])
        assert label.value is ClassValue.KAB
        assert (tr.u, tr.y, tr.delta, tr.weight_class) == (5.0, True, True, 2)

    def test_usab(self):
        events = [ev("enter_queue", 0), ev("customer_message", 1, words=7),
                  ev("agent_assigned", 8), ev("agent_message", 9), ev("close", 129, "system")]
        label, tr = derive_class(events)
        assert label.value is ClassValue.USAB
        assert (tr.u, tr.y, tr.delta, tr.weight_class) == (8.0, False, None, 0)
        assert tr.covariates == (7.0, 0.0)

    def test_served(self):
        events = [ev("enter_queue", 0), ev("agent_assigned", 3), ev("customer_message", 4),
                  ev("agent_message", 5)]
        label, tr = derive_class(events)
        assert label.value is ClassValue.SR
        assert (tr.u, tr.y, tr.delta, tr.weight_class) == (3.0, False, False, 1)

    def test_order_independent(self):
        events = [ev("agent_message", 5), ev("customer_message", 4), ev("enter_queue", 0),
                  ev("agent_assigned", 3)]
        assert derive_class(events)[0].value is ClassValue.SR

    def test_customer_close_after_assignment_is_not_kab(self):
        events = [ev("enter_queue", 0), ev("agent_assigned", 2), ev("close", 6, "customer")]
        label, tr = derive_class(events)
        assert label.value is ClassValue.USAB and tr.u == 2.0

    def test_words_only_counted_in_queue(self):
        events = [ev("enter_queue", 0), ev("customer_message", 1, words=3),
                  ev("customer_message", 2, words=4), ev("agent_assigned", 3),
                  ev("customer_message", 5, words=100)]
        assert derive_class(events)[1].covariates[0] == 7.0

    def test_unresolved_is_malformed(self):
        with pytest.raises(DataError, match="neither served"):
            derive_class([ev("enter_queue", 0), ev("close", 3, "system")])

    def test_nonpositive_u_rejected(self):
        with pytest.raises(DataError, match="non-positive"):
            derive_class([ev("enter_queue", 0), ev("agent_assigned", 0)])

    def test_duplicate_enter_rejected(self):
        with pytest.raises(DataError):
            derive_class([ev("enter_queue", 0), ev("enter_queue", 1), ev("agent_assigned", 2)])

    def test_close_needs_closer(self):
        with pytest.raises(DataError):
            ConversationEvent("c", EventKind.CLOSE, 0)
        with pytest.raises(DataError):
            ConversationEvent("c", EventKind.AGENT_MESSAGE, 0, Closer.AGENT)


def test_class_label_sub_only_for_usab():
    ClassLabel(ClassValue.USAB, SubLabel.SAB)
    with pytest.raises(DataError):
        ClassLabel(ClassValue.SR, SubLabel.SR1)


class TestObservationTriple:
    @pytest.mark.parametrize("y,delta", [(True, None), (True, False), (False, True)])
    def test_forbidden_combinations(self, y, delta):
        with pytest.raises(DataError):
            ObservationTriple(1.0, y, delta)

    @pytest.mark.parametrize("u", [0.0, -1.0, math.inf, math.nan])
    def test_bad_u(self, u):
        with pytest.raises(DataError):
            ObservationTriple(u, False, False)

    def test_weight_classes(self):
        assert ObservationTriple(1, True, True).weight_class == 2
        assert ObservationTriple(1, False, False).weight_class == 1
        assert ObservationTriple(1, False, None).weight_class == 0


def _conv(cid, kind):
    base = [{"conversation_id": cid, "kind": "enter_queue", "t": 0}]
    if kind == "kab":
        base.append({"conversation_id": cid, "kind": "close", "t": 5 * MIN, "closer": "customer"})
    elif kind == "sr":
        base += [{"conversation_id": cid, "kind": "agent_assigned", "t": 3 * MIN},
                 {"conversation_id": cid, "kind": "customer_message", "t": 4 * MIN}]
    elif kind == "usab":
        base += [{"conversation_id": cid, "kind": "agent_assigned", "t": 8 * MIN}]
    elif kind == "bad":
        base.append({"conversation_id": cid, "kind": "close", "t": MIN, "closer": "agent"})
    return [json.dumps(r) for r in base]


class TestBuildDataset:
    def test_three_conversations(self):
        lines = _conv("a", "kab") + _conv("b", "sr") + _conv("c", "usab")
        res = build_dataset(lines)
        assert res.dataset.n == 3
        assert res.dataset.counts() == {"n": 3, "sr": 1, "kab": 1, "usab": 1}
        assert res.conversation_ids == ("a", "b", "c")
        assert res.report.silent_throughout == ["c"]

    def test_one_malformed_of_four(self):
        lines = _conv("a", "kab") + _conv("b", "sr") + _conv("c", "usab") + _conv("d", "bad")
        res = build_dataset(lines)
        assert res.dataset.n == 3
        assert res.report.conversations == 4 and res.report.accepted == 3
        assert [c for c, _ in res.report.rejected] == ["d"]

    def test_empty_stream_warns(self):
        with pytest.warns(UserWarning):
            res = build_dataset([])
        assert res.dataset.n == 0

    def test_parse_errors_have_line_numbers(self):
        lines = _conv("a", "kab") + ["{not json", json.dumps({"kind": "close"})]
        res = build_dataset(lines)
        assert [ln for ln, _ in res.report.parse_errors] == [3, 4]
        assert res.dataset.n == 1

    def test_float_timestamp_rejected(self):
        with pytest.warns(UserWarning):
            res = build_dataset([json.dumps({"conversation_id": "a", "kind": "enter_queue",
                                             "t": 1.5})])
        assert len(res.report.parse_errors) == 1

    def test_jsonl_file(self, tmp_path):
        p = tmp_path / "ev.jsonl"
        p.write_text("\n".join(_conv("a", "kab") + _conv("b", "sr")) + "\n")
        res = read_events_jsonl(p)
        assert res.dataset.counts()["kab"] == 1

    def test_event_mapping_round_trip(self):
        e = ConversationEvent("x", EventKind.CLOSE, 12, Closer.MANAGER, 3, 10)
        assert ConversationEvent.from_mapping(e.to_mapping()) == e


class TestDataset:
    def test_units(self):
        ds = Dataset([1.0, 2.0], [False, True], [0, 1], unit="hours")
        np.testing.assert_array_equal(ds.u, [60.0, 120.0])
        np.testing.assert_array_equal(ds.u_native, [1.0, 2.0])
        assert rate_to_unit(rate_from_unit(4.0, "hours"), "hours") == pytest.approx(4.0)

    def test_immutable(self):
        ds = Dataset([1.0], [False], [None])
        with pytest.raises(ValueError):
            ds.u[0] = 2.0

    def test_invariants(self):
        with pytest.raises(DataError):
            Dataset([1.0], [True], [None])
        with pytest.raises(DataError):
            Dataset([1.0, 2.0], [False], [0])
        with pytest.raises(DataError, match="row 1"):
            Dataset([1.0, 0.0], [False, False], [0, 0])

    def test_covariate_names_checked(self):
        with pytest.raises(DataError):
            Dataset([1.0], [False], [0], [[1.0, 2.0]], ["a"])
        with pytest.raises(DataError):
            Dataset([1.0], [False], [0], [[1.0, 2.0]], ["a", "a"])

    def test_take_resamples(self):
        ds = Dataset([1.0, 2.0, 3.0], [False, True, False], [0, 1, None])
        sub = ds.take([2, 2, 0])
        np.testing.assert_array_equal(sub.m, [0, 0, 1])

    def test_m_matches_table(self):
        ds = Dataset([1.0, 2.0, 3.0], [False, True, False], [0, 1, None])
        for tr, m in zip(ds, ds.m):
            assert tr.weight_class == m


@given(st.lists(st.tuples(st.floats(1e-3, 1e4, allow_nan=False),
                          st.sampled_from([0, 1, 2]),
                          st.floats(-100, 100, allow_nan=False)), min_size=1, max_size=30))
def test_csv_round_trip_is_exact(rows):
    u = [r[0] for r in rows]
    m = np.array([r[1] for r in rows])
    x = np.array([[r[2]] for r in rows])
    ds = Dataset(u, m == 2, np.where(m == 2, 1, np.where(m == 1, 0, -1)).astype(np.int8), x,
                 ["words"])
    buf = io.StringIO()
    write_triples_csv(ds, buf)
    buf.seek(0)
    back = read_triples_csv(buf)
    assert back == ds
    assert back.digest() == ds.digest()


def test_millisecond_times_round_trip(tmp_path):
    ms = np.array([1, 999, 60_000, 123_456_789])
    ds = Dataset(ms / 60000.0, [False] * 4, [0] * 4)
    p = tmp_path / "t.csv"
    write_triples_csv(ds, p)
    back = read_triples_csv(p)
    np.testing.assert_array_equal(np.round(back.u * 60000.0).astype(int), ms)
    assert back == ds


def test_csv_reader_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("u,y,delta\n1.0,1,0\n")
    with pytest.raises(DataError):
        read_triples_csv(p)
    p.write_text("a,b,c\n")
    with pytest.raises(DataError, match="header"):
        read_triples_csv(p)
    p.write_text("u,y,delta,x1\n1.0,0,NA,2\n")
    with pytest.raises(DataError, match="not in file"):
        read_triples_csv(p, covariates=["x9"])


def test_digest_ignores_unit():
    ds = Dataset([1.0, 2.0], [False, True], [0, 1])
    assert ds.digest() == ds.with_unit("hours").digest()
    assert ds.digest() != Dataset([1.0, 2.5], [False, True], [0, 1]).digest()
