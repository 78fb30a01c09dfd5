import logging
import math
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interest_gossip.profile import Item, Profile, peer_similarity, profiles_to_csv
from interest_gossip.workload import CsvFormatError, WorkloadError, generate, ingest_csv


def test_generate_is_deterministic():
    a = generate(20, 3, 2, 6, 0.2, 11)
    b = generate(20, 3, 2, 6, 0.2, 11)
    assert a.profiles == b.profiles and a.ground_truth == b.ground_truth
    assert generate(20, 3, 2, 6, 0.2, 12).profiles != a.profiles


def test_too_many_interests_rejected():
    with pytest.raises(WorkloadError):
        generate(10, 2, 3, 5, 0.1, 0)


@pytest.mark.parametrize("noise", [-0.1, 1.1])
def test_noise_out_of_range_rejected(noise):
    with pytest.raises(WorkloadError):
        generate(10, 2, 1, 5, noise, 0)


def test_thousand_profiles_satisfy_partition():
    wl = generate(1000, 5, 2, 6, 0.3, 1)
    for p, prof in wl.profiles.items():
        prof.validate()
        ids = [i.id for iid in prof.interest_ids for i in prof.items(iid)]
        assert len(ids) == len(set(ids)) == 12
        assert len(wl.ground_truth[p]) == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_item_features_come_from_own_pool_or_noise(seed, noise):
    wl = generate(8, 3, 1, 4, noise, seed)
    for p, prof in wl.profiles.items():
        (c,) = wl.ground_truth[p]
        allowed = wl.pools[c] | wl.noise_pool
        for iid in prof.interest_ids:
            for item in prof.items(iid):
                assert item.features <= allowed
                assert wl.item_community[item.id] == c


def test_noise_zero_features_all_from_pool():
    wl = generate(10, 2, 1, 4, 0.0, 3)
    for p, prof in wl.profiles.items():
        (c,) = wl.ground_truth[p]
        assert all(i.features <= wl.pools[c] for i in prof.items(0))


def test_same_community_similar_disjoint_zero():
    wl = generate(40, 2, 1, 8, 0.0, 2)
    same = [(p, q) for p, q in combinations(wl.profiles, 2) if wl.ground_truth[p] == wl.ground_truth[q]]
    diff = [(p, q) for p, q in combinations(wl.profiles, 2) if not wl.ground_truth[p] & wl.ground_truth[q]]
    assert all(peer_similarity(wl.profiles[p], 0, wl.profiles[q]) == 0.0 for p, q in diff)
    assert any(peer_similarity(wl.profiles[p], 0, wl.profiles[q]) > 0.0 for p, q in same)


def test_identical_draws_give_similarity_one():
    wl = generate(2, 1, 1, 8, 0.0, 0, item_overlap=1.0)
    a, b = wl.profiles[0], wl.profiles[1]
    assert peer_similarity(a, 0, b) == 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_shared_community_more_similar_on_average(seed):
    wl = generate(60, 4, 1, 12, 0.1, seed)
    same, diff = [], []
    for p, q in combinations(sorted(wl.profiles), 2):
        s = peer_similarity(wl.profiles[p], 0, wl.profiles[q])
        (same if wl.ground_truth[p] & wl.ground_truth[q] else diff).append(s)
    margin = 0.1
    assert math.fsum(same) / len(same) - math.fsum(diff) / len(diff) > margin


def test_csv_round_trip_generated(tmp_path):
    wl = generate(15, 3, 2, 5, 0.2, 8)
    path = tmp_path / "w.csv"
    path.write_text(profiles_to_csv(wl.profiles.values()), encoding="utf-8")
    assert ingest_csv(path) == dict(wl.profiles)


def test_duplicate_rows_rejected(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("peer_id,interest_id,item_id,features,rating\n1,0,a,f,\n1,1,a,g,\n")
    with pytest.raises(CsvFormatError) as exc:
        ingest_csv(path)
    assert exc.value.line == 3


def test_header_only_is_empty_with_warning(tmp_path, caplog):
    path = tmp_path / "h.csv"
    path.write_text("peer_id,interest_id,item_id,features,rating\n")
    with caplog.at_level(logging.WARNING):
        assert ingest_csv(path) == {}
    assert "header only" in caplog.text


@pytest.mark.parametrize(
    "body,line",
    [
        ("1,0,a,f\n", 2),
        ("1,0,a,,0.5\n", 2),
        ("1,0,a,f,2.0\n", 2),
        ("1,0,a,f,x\n", 2),
        ("1,0,a,f,\n,0,b,f,\n", 3),
    ],
)
def test_malformed_rows_report_line(tmp_path, body, line):
    path = tmp_path / "m.csv"
    path.write_text("peer_id,interest_id,item_id,features,rating\n" + body)
    with pytest.raises(CsvFormatError) as exc:
        ingest_csv(path)
    assert exc.value.line == line and f":{line}:" in str(exc.value)


def test_missing_interest_column_reapplies_assignment(tmp_path):
    path = tmp_path / "n.csv"
    path.write_text("peer_id,item_id,features,rating\n7,a,f1;f2,\n7,b,f1;f2,0.5\n7,c,z,\n")
    prof = ingest_csv(path)[7]
    assert prof.interest_of("a") == prof.interest_of("b") != prof.interest_of("c")
    assert prof.items(prof.interest_of("b")) >= {Item("b", frozenset({"f1", "f2"}), 0.5)}


def test_missing_required_column(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("peer_id,item_id,rating\n")
    with pytest.raises(CsvFormatError):
        ingest_csv(path)


def test_string_peer_ids_survive(tmp_path):
    prof = Profile("alice", {"music": {Item("s1", frozenset({"jazz"}), 1.0)}})
    path = tmp_path / "s.csv"
    path.write_text(profiles_to_csv([prof]))
    assert ingest_csv(path) == {"alice": prof}
