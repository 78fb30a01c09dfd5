"""Per-peer protocol state machine.

Every operation is a pure transition: it takes a :class:`PeerState` plus the
incoming payload and returns the new state together with whatever messages
the peer emits. Neighborhoods are kept per local interest, capped at
``capacity`` and ordered best-first by ``(-similarity, canonical peer id)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from enum import Enum
from typing import Mapping, Sequence

from .profile import (
    DEFAULT_MERGE_THRESHOLD,
    InterestId,
    Item,
    PeerId,
    Profile,
    assign_interest,
    canonical_key,
    item_peer_similarity,
    match_interest,
    peer_similarity,
)


class ProtocolError(Exception):
    """A message that the receiving peer cannot process; it is dropped."""


class Variant(str, Enum):
    CONN_REQUEST = "ConnRequest"
    CONN_ACCEPT = "ConnAccept"
    CONN_REFUSE = "ConnRefuse"
    NEIGHBOR_QUERY = "NeighborQuery"
    NEIGHBOR_REPLY = "NeighborReply"
    REC_REQUEST = "RecRequest"
    REC_REPLY = "RecReply"
    REC_PUSH = "RecPush"


@dataclass(frozen=True)
class Message:
    """One protocol message.

    ``interest`` is always the receiver-side interest the message concerns and
    ``origin_interest`` the sender-side one. ``profile`` is the sender's
    profile digest, except for a routed ConnRequest where it is the joining
    peer's (see :attr:`requester`). ``peers`` carries NewPeers profiles and
    ``items`` recommended items. ``ttl`` is the number of further routing hops
    a refused join request may take.
    """

    variant: Variant
    sender: PeerId
    receiver: PeerId
    round: int
    interest: InterestId = None
    origin_interest: InterestId = None
    profile: Profile | None = field(default=None, repr=False)
    peers: tuple = field(default=(), repr=False)
    items: tuple = field(default=(), repr=False)
    ttl: int = 0

    def __post_init__(self):
        if not self.peers:
            return
        ids = [p.peer_id for p in self.peers]
        if len(set(ids)) != len(ids):
            raise ValueError("NewPeers list contains duplicates")
        if self.receiver in ids:
            raise ValueError("NewPeers list contains the receiver")

    @property
    def requester(self) -> PeerId:
        return self.profile.peer_id if self.profile is not None else self.sender

    @property
    def payload_size(self) -> int:
        """Item ids carried: the profile digest, every NewPeers digest, and recommended items."""
        own = len(self.profile.all_item_ids) if self.profile is not None else 0
        return own + sum(len(p.all_item_ids) for p in self.peers) + len(self.items)


@dataclass(frozen=True)
class NeighborEntry:
    peer_id: PeerId
    remote_interest: InterestId
    similarity: float
    refreshed: int
    profile: Profile = field(repr=False)
    # learned second-hand and not yet heard from directly; never re-shared
    hearsay: bool = False
    # round the entry was admitted
    since: int | None = None

    def __post_init__(self):
        if self.since is None:
            object.__setattr__(self, "since", self.refreshed)

    @cached_property
    def rank(self) -> tuple:
        return (-self.similarity, canonical_key(self.peer_id))


def _entry(own: Profile, interest, other: Profile, round: int, hearsay: bool = False,
           since: int | None = None) -> NeighborEntry:
    m = match_interest(own, interest, other)
    return NeighborEntry(other.peer_id, m.remote_interest, m.similarity, round, other, hearsay, since)


@dataclass(frozen=True)
class PeerState:
    profile: Profile
    capacity: int
    theta_conn: float = 0.0
    theta_rec: float = 0.0
    merge_threshold: float = DEFAULT_MERGE_THRESHOLD
    neighborhoods: Mapping = field(default_factory=dict)
    seen: frozenset = frozenset()
    forwarded: frozenset = frozenset()
    # peers already sent a ConnRequest, per interest, since the last join
    contacted: Mapping = field(default_factory=dict)
    # rounds during which an expired neighbor is ignored when reported second-hand
    suspect_rounds: int = 0
    suspects: Mapping = field(default_factory=dict)  # peer id -> round it was expired

    __hash__ = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        for name in ("theta_conn", "theta_rec"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @classmethod
    def new(cls, profile: Profile, capacity: int, **kw) -> "PeerState":
        return cls(
            profile=profile,
            capacity=capacity,
            neighborhoods={iid: () for iid in profile.interest_ids},
            seen=profile.all_item_ids,
            **kw,
        )

    @property
    def peer_id(self) -> PeerId:
        return self.profile.peer_id

    def neighbors(self, interest) -> tuple:
        return self.neighborhoods.get(interest, ())

    def neighbor_ids(self, interest) -> tuple:
        return tuple(e.peer_id for e in self.neighbors(interest))

    def min_similarity(self, interest) -> float:
        """Minimum similarity over current neighbors; 0 for an empty neighborhood."""
        entries = self.neighbors(interest)
        return entries[-1].similarity if entries else 0.0

    def admission_floor(self, interest) -> float:
        """Similarity a candidate must reach to enter: 0 while there is spare capacity."""
        entries = self.neighbors(interest)
        return entries[-1].similarity if len(entries) >= self.capacity else 0.0

    def _with(self, interest, entries, **kw) -> "PeerState":
        hoods = dict(self.neighborhoods)
        hoods[interest] = tuple(entries)
        return replace(self, neighborhoods=hoods, **kw)


def _insert_bounded(entries: list, entry: NeighborEntry, capacity: int) -> None:
    """Insert keeping best-first order, then evict the worst while over capacity."""
    key = entry.rank
    pos = len(entries)
    while pos > 0 and entries[pos - 1].rank > key:
        pos -= 1
    entries.insert(pos, entry)
    while len(entries) > capacity:
        entries.pop()


def _heard_from(state: PeerState, peer: PeerId) -> PeerState:
    # direct contact clears any suspicion of failure
    if peer not in state.suspects:
        return state
    return replace(state, suspects={q: r for q, r in state.suspects.items() if q != peer})


def _require_interest(state: PeerState, interest) -> None:
    if not state.profile.has_interest(interest):
        raise ProtocolError(f"peer {state.peer_id!r} has no interest {interest!r}")


@dataclass(frozen=True)
class ConnDecision:
    accepted: bool
    new_peers: tuple
    state: PeerState


def handle_conn_request(state: PeerState, sender: Profile, interest, round: int = 0) -> ConnDecision:
    """Accept ``sender`` into the ``interest`` neighborhood if it is at least as
    similar as the current worst neighbor; on accept, also return the current
    neighbors whose similarity to the sender reaches ``theta_conn``.
    """
    if sender.peer_id == state.peer_id:
        raise ProtocolError("connection request from self")
    _require_interest(state, interest)
    state = _heard_from(state, sender.peer_id)
    others = [e for e in state.neighbors(interest) if e.peer_id != sender.peer_id]
    new = _entry(state.profile, interest, sender, round)
    threshold = min((e.similarity for e in others), default=0.0)
    if new.similarity < threshold:
        return ConnDecision(False, (), state)
    new_peers = tuple(
        e.profile
        for e in others
        if not e.hearsay and peer_similarity(e.profile, e.remote_interest, sender) >= state.theta_conn
    )
    _insert_bounded(others, new, state.capacity)
    return ConnDecision(True, new_peers, state._with(interest, others))


def admit_candidates(
    state: PeerState, interest, candidates: Sequence[Profile], round: int = 0, hearsay: bool = True
) -> tuple:
    """Neighbor refinement over a candidate list.

    Each previously unknown candidate enters if the neighborhood has spare
    capacity or its similarity reaches the current minimum; the worst entries
    are then evicted down to capacity. Candidates relayed by a third party
    are admitted as ``hearsay``. Returns ``(state, admitted_ids,
    skipped)`` where ``skipped`` counts malformed candidates.
    """
    entries = list(state.neighbors(interest))
    known = {e.peer_id for e in entries}
    admitted = []
    skipped = 0
    for cand in candidates:
        if not isinstance(cand, Profile) or not cand.interests or cand.peer_id == state.peer_id:
            skipped += 1
            continue
        if cand.peer_id in known:
            continue
        if hearsay and round - state.suspects.get(cand.peer_id, -(10**9)) < state.suspect_rounds:
            continue
        known.add(cand.peer_id)
        e = _entry(state.profile, interest, cand, round, hearsay)
        if len(entries) < state.capacity or e.similarity >= entries[-1].similarity:
            _insert_bounded(entries, e, state.capacity)
            admitted.append(cand.peer_id)
    kept = {e.peer_id for e in entries}
    admitted = [p for p in admitted if p in kept]
    return state._with(interest, entries), admitted, skipped


def gossip_cycle(
    state: PeerState, interest, replies: Mapping[PeerId, Sequence[Profile]], round: int = 0
) -> tuple:
    """Fold the NewPeers lists returned by current neighbors into ``interest``'s
    neighborhood. Replies are processed in canonical sender order; replies from
    peers that are not neighbors are skipped. Returns ``(state, skipped)``.
    """
    _require_interest(state, interest)
    current = set(state.neighbor_ids(interest))
    skipped = 0
    flat = []
    for sender in sorted(replies, key=canonical_key):
        if sender not in current:
            skipped += len(replies[sender]) or 1
            continue
        flat.extend(replies[sender])
    state, _, bad = admit_candidates(state, interest, flat, round)
    return state, skipped + bad


def refresh_neighbor(state: PeerState, profile: Profile, round: int) -> PeerState:
    """Recompute the entry for ``profile``'s peer in every neighborhood holding it."""
    state = _heard_from(state, profile.peer_id)
    hoods = None
    for iid, entries in state.neighborhoods.items():
        pos = next((k for k, e in enumerate(entries) if e.peer_id == profile.peer_id), None)
        if pos is None:
            continue
        old = entries[pos]
        if old.profile is profile:
            # same digest: only the liveness timestamp moves
            touched = list(entries)
            touched[pos] = NeighborEntry(old.peer_id, old.remote_interest, old.similarity, round,
                                         profile, False, old.since)
            if hoods is None:
                hoods = dict(state.neighborhoods)
            hoods[iid] = tuple(touched)
        else:
            rest = [e for e in entries if e.peer_id != profile.peer_id]
            fresh = _entry(state.profile, iid, profile, round, since=old.since)
            _insert_bounded(rest, fresh, state.capacity)
            if hoods is None:
                hoods = dict(state.neighborhoods)
            hoods[iid] = tuple(rest)
    return state if hoods is None else replace(state, neighborhoods=hoods)


def rescore(state: PeerState, interest) -> PeerState:
    """Recompute all entries of one neighborhood after the local profile changed."""
    entries = state.neighbors(interest)
    fresh = sorted(
        (_entry(state.profile, interest, e.profile, e.refreshed, e.hearsay, e.since) for e in entries),
        key=lambda e: e.rank,
    )
    return state._with(interest, fresh)


def expire_stale(state: PeerState, round: int, max_age: int) -> tuple:
    """Drop neighbors that missed more than ``max_age`` consecutive query replies.

    A neighbor is queried every round and answers two rounds later, so a live
    neighbor's ``refreshed`` equals the current round from its second round
    on. Dropped peers become suspects: for ``suspect_rounds`` rounds they are
    not re-admitted from second-hand reports. Returns ``(state, removed)``.
    """
    def stale(e):
        return round - max(e.refreshed, e.since + 1) > max_age

    removed = []
    hoods = dict(state.neighborhoods)
    for iid, entries in state.neighborhoods.items():
        if any(stale(e) for e in entries):
            removed.extend(e.peer_id for e in entries if stale(e))
            hoods[iid] = tuple(e for e in entries if not stale(e))
    suspects = state.suspects
    if suspects and any(round - r >= state.suspect_rounds for r in suspects.values()):
        suspects = {q: r for q, r in suspects.items() if round - r < state.suspect_rounds}
    if removed and state.suspect_rounds:
        suspects = dict(suspects)
        suspects.update((q, round) for q in removed)
    if not removed:
        return (state if suspects is state.suspects else replace(state, suspects=suspects)), []
    return replace(state, neighborhoods=hoods, suspects=suspects), removed


def neighbor_reply_peers(state: PeerState, requester: PeerId, interest) -> tuple:
    """NewPeers list answering a NeighborQuery: the directly confirmed
    neighborhood minus the requester."""
    _require_interest(state, interest)
    return tuple(
        e.profile for e in state.neighbors(interest) if e.peer_id != requester and not e.hearsay
    )


def handle_rec_request(state: PeerState, requester: Profile, interest) -> tuple:
    """Items of ``interest`` that the requesting neighbor lacks and that clear
    ``theta_rec`` against the requester's matched interest, sorted by item id.
    """
    _require_interest(state, interest)
    if requester.peer_id not in state.neighbor_ids(interest):
        raise ProtocolError(f"recommendation request from non-neighbor {requester.peer_id!r}")
    target = match_interest(state.profile, interest, requester).remote_interest
    held = requester.all_item_ids
    out = [
        item
        for item in state.profile.items(interest)
        if item.id not in held
        and item_peer_similarity(item, requester, target) >= state.theta_rec
    ]
    return tuple(sorted(out, key=lambda i: i.id))


def push_new_item(state: PeerState, item: Item, round: int = 0) -> tuple:
    """Learn a new item and push it to similar neighbors of its interest.

    Returns ``(state, messages)``. An already-seen item yields no messages.
    """
    if item.id in state.seen:
        return state, []
    iid, profile = assign_interest(item, state.profile, state.merge_threshold)
    hoods = dict(state.neighborhoods)
    hoods.setdefault(iid, ())
    state = replace(
        state,
        profile=profile,
        neighborhoods=hoods,
        seen=state.seen | {item.id},
        forwarded=state.forwarded | {item.id},
    )
    state = rescore(state, iid)
    msgs = [
        Message(Variant.REC_PUSH, state.peer_id, e.peer_id, round, interest=e.remote_interest,
                origin_interest=iid, items=(item,))
        for e in state.neighbors(iid)
        if item_peer_similarity(item, e.profile, e.remote_interest) >= state.theta_rec
    ]
    return state, msgs


def handle_rec_push(state: PeerState, item: Item, round: int = 0) -> tuple:
    """Adopt a pushed item if unseen and forward it. Returns ``(adopted, forwards, state)``."""
    if item.id in state.seen:
        return False, [], state
    state, msgs = push_new_item(state, item, round)
    return True, msgs, state


def join(state: PeerState, bootstrap: Sequence[Profile], round: int = 0, interests=None,
         ttl: int = 1) -> tuple:
    """One ConnRequest per bootstrap peer per local interest.

    The target interest on each bootstrap peer is the one its profile matches
    best; ``ttl`` bounds how far a refused request is routed onward. Returns
    ``(state, messages)``; an empty bootstrap emits nothing.
    """
    boot = [b for b in bootstrap if b.peer_id != state.peer_id]
    if not boot:
        return state, []
    iids = state.profile.interest_ids if interests is None else interests
    msgs = []
    contacted = dict(state.contacted)
    for iid in iids:
        done = set()
        for b in boot:
            target = match_interest(state.profile, iid, b).remote_interest
            msgs.append(conn_request(state, b.peer_id, target, iid, round, ttl))
            done.add(b.peer_id)
        contacted[iid] = frozenset(done)
    return replace(state, contacted=contacted), msgs


def conn_request(state: PeerState, to: PeerId, target, own_interest, round: int, ttl: int = 0) -> Message:
    return Message(Variant.CONN_REQUEST, state.peer_id, to, round, interest=target,
                   origin_interest=own_interest, profile=state.profile, ttl=ttl)


def route_join(state: PeerState, request: Message, round: int = 0) -> list:
    """Forward a refused join request to the neighbors similar enough to the
    joining peer (the same ``theta_conn`` test that selects NewPeers on
    accept). Each forwarded copy still names the joiner as requester."""
    if request.ttl <= 0:
        return []
    _require_interest(state, request.interest)
    joiner = request.profile
    out = []
    for e in state.neighbors(request.interest):
        if e.hearsay or e.peer_id in (joiner.peer_id, request.sender):
            continue
        if peer_similarity(e.profile, e.remote_interest, joiner) < state.theta_conn:
            continue
        target = match_interest(joiner, request.origin_interest, e.profile).remote_interest
        out.append(Message(Variant.CONN_REQUEST, state.peer_id, e.peer_id, round, interest=target,
                           origin_interest=request.origin_interest, profile=joiner,
                           ttl=request.ttl - 1))
    return out


def handle_conn_refuse(state: PeerState, refuser: Profile, interest, round: int = 0) -> PeerState:
    """Requester side of a refused join. The refuser keeps no link to us, but
    its profile is known, so it is still a candidate entry point for our own
    neighborhood."""
    _require_interest(state, interest)
    state = _heard_from(state, refuser.peer_id)
    state, _, _ = admit_candidates(state, interest, [refuser], round, hearsay=False)
    return state


def connect_requests(state: PeerState, interest, peers: Sequence[PeerId], round: int = 0) -> tuple:
    """ConnRequests to neighbors admitted by gossip that have not been contacted
    since the last join, letting them link back. Returns ``(state, messages)``."""
    contacted = set(state.contacted.get(interest, ()))
    by_id = {e.peer_id: e for e in state.neighbors(interest)}
    msgs = []
    for p in peers:
        e = by_id.get(p)
        if e is None or p in contacted:
            continue
        contacted.add(p)
        msgs.append(conn_request(state, p, e.remote_interest, interest, round))
    if not msgs:
        return state, msgs
    hood = dict(state.contacted)
    hood[interest] = frozenset(contacted)
    return replace(state, contacted=hood), msgs


def handle_conn_accept(state: PeerState, accepter: Profile, interest, new_peers: Sequence[Profile],
                       round: int = 0) -> tuple:
    """Requester side of an accepted join: admit the accepter and the NewPeers it
    sent, and route the join onward to NewPeers not contacted yet.
    Returns ``(state, messages)``.
    """
    _require_interest(state, interest)
    state = _heard_from(state, accepter.peer_id)
    state, _, _ = admit_candidates(state, interest, [accepter], round, hearsay=False)
    state, _, _ = admit_candidates(state, interest, new_peers, round)
    contacted = set(state.contacted.get(interest, ())) | {accepter.peer_id}
    msgs = []
    for p in new_peers:
        if p.peer_id in contacted or p.peer_id == state.peer_id:
            continue
        contacted.add(p.peer_id)
        target = match_interest(state.profile, interest, p).remote_interest
        msgs.append(conn_request(state, p.peer_id, target, interest, round))
    hood = dict(state.contacted)
    hood[interest] = frozenset(contacted)
    return replace(state, contacted=hood), msgs
