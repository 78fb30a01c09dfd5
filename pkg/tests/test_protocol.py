import random
from collections import Counter, deque
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interest_gossip import protocol as proto
from interest_gossip.profile import Profile, peer_similarity
from interest_gossip.protocol import (
    Message,
    NeighborEntry,
    PeerState,
    ProtocolError,
    Variant,
    gossip_cycle,
    handle_conn_request,
    handle_rec_push,
    handle_rec_request,
    join,
    push_new_item,
)
from interest_gossip.simnet import SimConfig, Simulation
from interest_gossip.workload import generate

from builders import at_level, focal, item, level_sim, state_with
from oracles import top_c_exhaustive


def sims(st_, interest=0):
    return sorted((e.similarity for e in st_.neighbors(interest)), reverse=True)


# -- Algorithm 1 ---------------------------------------------------------------


def test_conn_empty_neighborhood_accepts():
    st_ = state_with([], 4)
    d = handle_conn_request(st_, at_level("x", 1), 0)
    assert d.accepted and d.new_peers == ()
    assert d.state.neighbor_ids(0) == ("x",)


@pytest.mark.parametrize("level,accepted", [(6, True), (2, False), (4, True)])
def test_conn_accept_iff_at_least_min(level, accepted):
    st_ = state_with([("p", 4), ("q", 10)], 8)  # sims 0.2 and 0.5
    d = handle_conn_request(st_, at_level("x", level), 0)
    assert d.accepted is accepted
    if not accepted:
        assert d.state is st_ and d.new_peers == ()


def test_conn_accept_evicts_lowest_when_full():
    st_ = state_with([("p", 8), ("q", 12)], 2)  # 0.4, 0.6
    d = handle_conn_request(st_, at_level("x", 10), 0)  # 0.5
    assert d.accepted
    assert set(d.state.neighbor_ids(0)) == {"q", "x"}
    cand = [("p", level_sim(8)), ("q", level_sim(12)), ("x", level_sim(10))]
    assert set(d.state.neighbor_ids(0)) == top_c_exhaustive(cand, 2)


def test_conn_new_peers_filtered_by_theta_conn():
    st_ = state_with([("p", 2), ("q", 15)], 8, theta_conn=0.5)
    d = handle_conn_request(st_, at_level("x", 16), 0)
    # sims of neighbors to x: p={a0,a1} vs 16 items -> 2/16; q -> 15/16
    assert [p.peer_id for p in d.new_peers] == ["q"]
    assert "x" not in [p.peer_id for p in d.new_peers]


def test_conn_unknown_interest_is_protocol_error():
    with pytest.raises(ProtocolError):
        handle_conn_request(state_with([], 2), at_level("x", 1), 99)
    with pytest.raises(ProtocolError):
        handle_conn_request(state_with([], 2), focal(), 0)


# -- Algorithm 2 ---------------------------------------------------------------


def test_gossip_known_peers_leave_state_unchanged():
    st_ = state_with([("p", 4), ("q", 10)], 3)
    out, skipped = gossip_cycle(st_, 0, {"p": [at_level("q", 10)], "q": [at_level("p", 4)]})
    assert out.neighborhoods == st_.neighborhoods and skipped == 0


def test_gossip_worked_example():
    st_ = state_with([("n1", 18), ("n2", 16), ("n3", 2)], 3)  # 0.9 0.8 0.1
    out, _ = gossip_cycle(st_, 0, {"n1": [at_level("c1", 10), at_level("c2", 1)]})  # 0.5 0.05
    assert sims(out) == [0.9, 0.8, 0.5]


def test_gossip_best_candidate_survives():
    st_ = state_with([("n1", 5), ("n2", 6)], 2)
    out, _ = gossip_cycle(st_, 0, {"n1": [at_level("star", 19)]})
    assert "star" in out.neighbor_ids(0)


def test_gossip_non_neighbor_reply_skipped():
    st_ = state_with([("n1", 5)], 2)
    out, skipped = gossip_cycle(st_, 0, {"ghost": [at_level("c", 9)]})
    assert skipped == 1 and out.neighbor_ids(0) == ("n1",)


def test_gossip_malformed_candidates_counted():
    st_ = state_with([("n1", 5)], 4)
    out, skipped = gossip_cycle(st_, 0, {"n1": ["junk", focal(), at_level("c", 3)]})
    assert skipped == 2 and set(out.neighbor_ids(0)) == {"n1", "c"}


@st.composite
def gossip_cases(draw):
    cap = draw(st.integers(1, 4))
    n_old = draw(st.integers(0, cap))
    levels = draw(st.lists(st.integers(0, 20), min_size=n_old, max_size=8))
    ids = draw(st.permutations(list(range(len(levels)))))
    return cap, list(zip(ids, levels))[:n_old], list(zip(ids, levels))[n_old:]


@settings(max_examples=400)
@given(gossip_cases())
def test_gossip_equals_exhaustive_top_c(case):
    cap, old, cands = case
    st_ = state_with(old, cap)
    out, _ = gossip_cycle(st_, 0, {old[0][0]: [at_level(p, j) for p, j in cands]} if old else {})
    if not old:
        out, _, _ = proto.admit_candidates(st_, 0, [at_level(p, j) for p, j in cands])
    union = [(p, level_sim(j)) for p, j in old + cands]
    assert set(out.neighbor_ids(0)) == top_c_exhaustive(union, cap)
    assert len(out.neighbors(0)) <= cap


@settings(max_examples=200)
@given(gossip_cases())
def test_admission_floor_never_drops_in_static_gossip(case):
    cap, old, cands = case
    st_ = state_with(old, cap)
    floor = st_.admission_floor(0)
    for p, j in cands:
        st_, _, _ = proto.admit_candidates(st_, 0, [at_level(p, j)])
        assert st_.admission_floor(0) >= floor
        floor = st_.admission_floor(0)


# -- neighbor state ------------------------------------------------------------


def test_entry_similarity_matches_recomputation():
    st_ = state_with([("p", 7)], 2)
    (e,) = st_.neighbors(0)
    assert e.similarity == peer_similarity(st_.profile, 0, e.profile)


def test_expire_stale_uses_admission_grace():
    st_ = state_with([("p", 7)], 2)
    e = st_.neighbors(0)[0]
    fresh = NeighborEntry(e.peer_id, e.remote_interest, e.similarity, 5, e.profile, since=5)
    st_ = st_._with(0, [fresh])
    kept, removed = proto.expire_stale(st_, 6, 0)
    assert removed == [] and kept.neighbor_ids(0) == ("p",)
    _, removed = proto.expire_stale(st_, 7, 0)
    assert removed == ["p"]


def test_hearsay_entries_are_not_reshared():
    st_ = state_with([("p", 7)], 4)
    st_, _, _ = proto.admit_candidates(st_, 0, [at_level("h", 9)])
    assert [q.peer_id for q in proto.neighbor_reply_peers(st_, "z", 0)] == ["p"]
    st_ = proto.refresh_neighbor(st_, at_level("h", 9), 3)
    assert {q.peer_id for q in proto.neighbor_reply_peers(st_, "z", 0)} == {"p", "h"}


def test_message_rejects_bad_new_peers():
    with pytest.raises(ValueError):
        Message(Variant.NEIGHBOR_REPLY, 1, 2, 0, peers=(at_level(3, 1), at_level(3, 1)))
    with pytest.raises(ValueError):
        Message(Variant.NEIGHBOR_REPLY, 1, 2, 0, peers=(at_level(2, 1),))


# -- Algorithm 3 ---------------------------------------------------------------


def rec_pair(theta):
    feats = [f"f{k}" for k in range(10)]
    responder = Profile("r", {0: {
        item("s", *feats),
        item("x1", *feats[:9]),
        item("x2", *feats[:5]),
        item("x3", *feats[:2]),
    }})
    requester = Profile("q", {0: {item("s", *feats)}})
    st_ = PeerState.new(responder, 4, theta_rec=theta)
    st_, _, _ = proto.admit_candidates(st_, 0, [requester], hearsay=False)
    return st_, requester


def test_rec_request_threshold_filter():
    st_, req = rec_pair(0.5)
    assert [i.id for i in handle_rec_request(st_, req, 0)] == ["x1", "x2"]


def test_rec_request_theta_zero_returns_all_not_held():
    st_, req = rec_pair(0.0)
    assert [i.id for i in handle_rec_request(st_, req, 0)] == ["x1", "x2", "x3"]


def test_rec_request_identical_requester_gets_nothing():
    st_, _ = rec_pair(0.0)
    twin = Profile("t", st_.profile.interests)
    st_, _, _ = proto.admit_candidates(st_, 0, [twin], hearsay=False)
    assert handle_rec_request(st_, twin, 0) == ()


def test_rec_request_from_non_neighbor_refused():
    st_, _ = rec_pair(0.0)
    with pytest.raises(ProtocolError):
        handle_rec_request(st_, at_level("stranger", 3), 0)


# -- Algorithm 4 ---------------------------------------------------------------


def test_push_without_neighbors_sends_nothing():
    st_ = state_with([], 4)
    st2, msgs = push_new_item(st_, item("new", "f"))
    assert msgs == [] and "new" in st2.seen


def test_push_to_every_neighbor_at_theta_zero():
    st_ = state_with([("p", 3), ("q", 5), ("r", 7)], 4)
    _, msgs = push_new_item(st_, item("new", "f"))
    assert sorted(m.receiver for m in msgs) == ["p", "q", "r"]
    assert all(m.variant is Variant.REC_PUSH for m in msgs)


def test_push_seen_item_is_silent():
    st_ = state_with([("p", 3)], 4)
    st_, _ = push_new_item(st_, item("new", "f"))
    again, msgs = push_new_item(st_, item("new", "f"))
    assert msgs == [] and again is st_
    adopted, fwd, _ = handle_rec_push(st_, item("new", "f"))
    assert (adopted, fwd) == (False, [])


def test_push_respects_theta_rec():
    st_ = state_with([("p", 3)], 4, theta_rec=0.9)
    _, msgs = push_new_item(st_, item("new", "unrelated"))
    assert msgs == []


def mesh(peer_ids, links):
    """Identical-profile peers linked by ``links`` (undirected)."""
    base = {item(f"c{k}", "f") for k in range(4)}
    states = {p: PeerState.new(Profile(p, {0: base}), 8) for p in peer_ids}
    for a, b in links:
        for x, y in ((a, b), (b, a)):
            states[x], _, _ = proto.admit_candidates(states[x], 0, [states[y].profile], hearsay=False)
    return states


def replay(states, source, new_item):
    """Synchronous rounds of push delivery; returns per-peer adopt counts,
    per-peer delivery counts, and the round each peer adopted."""
    states[source], msgs = push_new_item(states[source], new_item)
    adopted_at = {source: 0}
    adopts, deliveries = Counter({source: 1}), Counter()
    queue, r = deque(msgs), 0
    while queue:
        r += 1
        batch, queue = list(queue), deque()
        for m in batch:
            deliveries[m.receiver] += 1
            ok, fwd, states[m.receiver] = handle_rec_push(states[m.receiver], m.items[0])
            if ok:
                adopts[m.receiver] += 1
                adopted_at[m.receiver] = r
                queue.extend(fwd)
    return adopts, deliveries, adopted_at


def test_push_triangle_each_peer_handles_item_once():
    states = mesh(["A", "B", "C"], [("A", "B"), ("B", "C"), ("A", "C")])
    adopts, deliveries, _ = replay(states, "A", item("h", "f"))
    assert adopts == Counter({"A": 1, "B": 1, "C": 1})
    # A sends 2; B and C each forward to their other 2 neighbors
    assert sum(deliveries.values()) == 6
    assert deliveries["A"] == 2  # re-pushes reach A but are no-ops


def test_push_ring_of_five_covers_within_five_rounds():
    ring = [0, 1, 2, 3, 4]
    states = mesh(ring, [(k, (k + 1) % 5) for k in ring])
    adopts, _, adopted_at = replay(states, 0, item("h", "f"))
    assert set(adopts) == set(ring) and max(adopts.values()) == 1
    assert max(adopted_at.values()) <= 5


# -- join ----------------------------------------------------------------------


@pytest.mark.parametrize("n_interests,n_boot,want", [(2, 3, 6), (1, 1, 1), (1, 0, 0)])
def test_join_request_counts(n_interests, n_boot, want):
    me = Profile("me", {k: {item(f"i{k}")} for k in range(n_interests)})
    boot = [at_level(f"b{k}", 3) for k in range(n_boot)]
    _, msgs = join(PeerState.new(me, 4), boot)
    assert len(msgs) == want
    assert all(m.variant is Variant.CONN_REQUEST for m in msgs)


def test_join_beats_bootstrap_only_baseline():
    wl = generate(40, 2, 1, 12, 0.1, 4)
    cfg = SimConfig(peers=40, capacity=3, rounds=12, seed=4)
    sim = Simulation(cfg, wl, trace=True)
    boot = {}
    for m in sim.trace:
        if m.variant is Variant.CONN_REQUEST and m.round == 0:
            boot.setdefault(m.sender, []).append(m.receiver)
    for _ in range(cfg.rounds):
        sim.step()
    for p, targets in boot.items():
        prof = wl.profiles[p]
        baseline = sorted((peer_similarity(prof, 0, wl.profiles[q]) for q in targets), reverse=True)
        got = sims(sim.state.peers[p])
        assert len(got) >= len(baseline)
        assert all(g >= b for g, b in zip(got, baseline))


def test_determinism_same_inputs_same_outputs():
    rng = random.Random(3)
    st_ = state_with([("p", 3), ("q", 9)], 3)
    cands = [at_level(f"c{k}", rng.randint(0, 20)) for k in range(6)]
    a, _ = gossip_cycle(st_, 0, {"p": cands})
    b, _ = gossip_cycle(st_, 0, {"p": cands})
    assert a.neighborhoods == b.neighborhoods


def test_expired_peer_ignored_second_hand_until_heard_from():
    st_ = state_with([("p", 7), ("n", 3)], 4, suspect_rounds=3)
    old = st_.neighbors(0)
    st_ = st_._with(0, [NeighborEntry(e.peer_id, e.remote_interest, e.similarity, 5 if e.peer_id == "n" else 2,
                                      e.profile, since=0) for e in old])
    st_, removed = proto.expire_stale(st_, 5, 0)
    assert removed == ["p"] and st_.suspects == {"p": 5}
    blocked, admitted, _ = proto.admit_candidates(st_, 0, [at_level("p", 7)], 6)
    assert admitted == []
    later, admitted, _ = proto.admit_candidates(st_, 0, [at_level("p", 7)], 8)
    assert admitted == ["p"]
    # a direct message clears the suspicion at once
    d = handle_conn_request(blocked, at_level("p", 7), 0, 6)
    assert d.accepted and "p" not in d.state.suspects


def test_suspects_pruned_after_window():
    st_ = state_with([], 4, suspect_rounds=2)
    st_ = replace(st_, suspects={"x": 1, "y": 4})
    st_, _ = proto.expire_stale(st_, 4, 0)
    assert st_.suspects == {"y": 4}
