"""Deterministic round-based simulation engine.

Each round runs four phases in a fixed order:

1. deliver every pending message, sorted by (sender, receiver, sequence);
2. each alive peer expires silent neighbors, folds the neighbor replies it
   received into one gossip cycle per interest, (re)joins interests without
   a useful neighbor, and queries its neighbors for the next cycle;
3. churn: peers die and revive with the configured per-round rate;
4. scheduled item injections.

Message latency is one round. All randomness comes from one seeded
``random.Random`` consumed in a fixed order.
"""

from __future__ import annotations

import logging
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

from . import protocol as proto
from .metrics import (
    Event,
    OracleIndex,
    RoundRecord,
    SimReport,
    community_purity,
    neighbor_quality,
    percolation_coverage,
    recommendation_recall_precision,
)
from .profile import Item, PeerId, Profile, canonical_key
from .protocol import Message, PeerState, ProtocolError, Variant
from .workload import PlantedWorkload

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Injection:
    round: int
    peer: PeerId
    item: Item
    community: int | None = None


@dataclass(frozen=True)
class SimConfig:
    peers: int
    capacity: int = 8
    theta_conn: float = 0.05
    theta_rec: float = 0.0
    merge_threshold: float = 0.1
    rounds: int = 30
    churn: float = 0.0
    loss: float = 0.0
    seed: int = 0
    injections: tuple = ()
    bootstrap_fanout: int = 3
    # consecutive missed NeighborReplies tolerated before a neighbor is dropped
    stale_after: int = 0
    rejoin_after: int = 1
    # rounds an expired neighbor is ignored in second-hand reports; 0 disables
    suspect_rounds: int = 3
    # 0 disables periodic pull recommendation requests
    pull_interval: int = 0
    convergence_target: float = 0.9

    def validate(self) -> None:
        if self.peers < 2:
            raise ConfigError("peer count must be >= 2")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.capacity < 1:
            raise ConfigError("capacity must be >= 1")
        for name in ("theta_conn", "theta_rec", "merge_threshold", "convergence_target"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        for name in ("churn", "loss"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1)")
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if self.bootstrap_fanout < 1:
            raise ConfigError("bootstrap_fanout must be >= 1")
        if (self.stale_after < 0 or self.rejoin_after < 1 or self.pull_interval < 0
                or self.suspect_rounds < 0):
            raise ConfigError("need stale_after >= 0, rejoin_after >= 1, pull_interval >= 0, "
                              "suspect_rounds >= 0")
        for inj in self.injections:
            if not 0 <= inj.round < self.rounds:
                raise ConfigError(f"injection round {inj.round} outside [0, {self.rounds})")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["injections"] = [
            {"round": i.round, "peer": i.peer, "item": i.item.id, "community": i.community}
            for i in self.injections
        ]
        return d


@dataclass
class SimState:
    round: int
    peers: dict  # peer id -> PeerState
    alive: set
    pending: list  # of (seq, Message)
    events: list = field(default_factory=list)


def _sorted_ids(ids) -> list:
    return sorted(ids, key=canonical_key)


@dataclass
class ChurnOutcome:
    state: SimState
    died: list
    revived: list
    dropped: list  # messages removed because an endpoint died
    messages: list  # rejoin ConnRequests from revived peers


def apply_churn(state: SimState, rate: float, rng: random.Random,
                make_peer: Callable[[Profile], PeerState], fanout: int = 3) -> ChurnOutcome:
    """Independent per-peer death/revival with probability ``rate``.

    One draw per peer, in canonical order. Revived peers restart with empty
    neighborhoods and rejoin through random alive bootstrap peers. Pending
    messages from or to a dead peer are removed and returned as dropped.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"churn rate {rate} outside [0, 1)")
    if rate == 0.0:
        return ChurnOutcome(state, [], [], [], [])
    died, revived = [], []
    for p in _sorted_ids(state.peers):
        if rng.random() < rate:
            (died if p in state.alive else revived).append(p)
    alive = (set(state.alive) - set(died)) | set(revived)
    dead_now = set(died)
    keep, dropped = [], []
    for seq, m in state.pending:
        (dropped if m.sender in dead_now or m.receiver in dead_now else keep).append((seq, m))
    peers = dict(state.peers)
    msgs = []
    pool = _sorted_ids(alive - set(revived))
    for p in revived:
        st = make_peer(peers[p].profile)
        others = [q for q in pool if q != p]
        boot = rng.sample(others, min(fanout, len(others))) if others else []
        st, out = proto.join(st, [peers[q].profile for q in boot], state.round)
        peers[p] = st
        msgs.extend(out)
    events = list(state.events)
    events.extend(Event(state.round, "die", p) for p in died)
    events.extend(Event(state.round, "revive", p) for p in revived)
    new = SimState(state.round, peers, alive, keep, events)
    return ChurnOutcome(new, died, revived, [m for _, m in dropped], msgs)


class Simulation:
    """One simulation run. Use :func:`run` unless you need to step manually."""

    def __init__(self, config: SimConfig, workload, trace: bool = False,
                 observer: Callable[["Simulation"], None] | None = None):
        config.validate()
        if isinstance(workload, PlantedWorkload):
            profiles = dict(workload.profiles)
            self.ground_truth = dict(workload.ground_truth)
            self.item_community = dict(workload.item_community)
        else:
            if not isinstance(workload, Mapping):
                workload = {p.peer_id: p for p in workload}
            profiles = dict(workload)
            self.ground_truth = None
            self.item_community = {}
        if len(profiles) != config.peers:
            raise ConfigError(f"workload has {len(profiles)} profiles, config expects {config.peers}")
        for p, prof in profiles.items():
            prof.validate()
            if prof.peer_id != p:
                raise ConfigError(f"profile keyed {p!r} has peer id {prof.peer_id!r}")
        for inj in config.injections:
            if inj.peer not in profiles:
                raise ConfigError(f"injection at unknown peer {inj.peer!r}")
            if inj.community is not None:
                self.item_community[inj.item.id] = inj.community

        self.config = config
        self.rng = random.Random(config.seed)
        self.observer = observer
        self.trace_enabled = trace
        self.trace: list = []
        self.seq = 0
        self.cohorts: dict = defaultdict(lambda: [0, 0, 0])  # round -> [sent, delivered, dropped]
        self.drop_reasons: Counter = Counter()
        self.gossip_skipped = 0
        self.replies: dict = defaultdict(dict)
        self.join_round: dict = {}
        self.forward_counts: Counter = Counter()
        self.floor_decreases = 0
        self._floors: dict = {}
        self.records: list = []
        self.oracle = OracleIndex(config.capacity)
        self.injected: list = []

        peers = {p: self._make_peer(profiles[p]) for p in _sorted_ids(profiles)}
        self.state = SimState(0, peers, set(peers), [])
        outgoing = []
        ids = _sorted_ids(peers)
        for p in ids:
            others = [q for q in ids if q != p]
            boot = self.rng.sample(others, min(config.bootstrap_fanout, len(others)))
            st, msgs = proto.join(peers[p], [peers[q].profile for q in boot], 0)
            peers[p] = st
            for iid in st.profile.interest_ids:
                self.join_round[(p, iid)] = 0
            outgoing.extend(msgs)
        self._send_all(outgoing)

    def _make_peer(self, profile: Profile) -> PeerState:
        c = self.config
        return PeerState.new(profile, c.capacity, theta_conn=c.theta_conn,
                             theta_rec=c.theta_rec, merge_threshold=c.merge_threshold,
                             suspect_rounds=c.suspect_rounds)

    # -- message accounting -------------------------------------------------

    def _send_all(self, msgs) -> None:
        for m in msgs:
            self.seq += 1
            self.cohorts[m.round][0] += 1
            self.state.pending.append((self.seq, m))
            if self.trace_enabled:
                self.trace.append(m)

    def _drop(self, m: Message, reason: str) -> None:
        self.cohorts[m.round][2] += 1
        self.drop_reasons[reason] += 1

    # -- phases -------------------------------------------------------------

    def _deliver(self) -> None:
        r = self.state.round
        batch = sorted(
            self.state.pending,
            key=lambda sm: (canonical_key(sm[1].sender), canonical_key(sm[1].receiver), sm[0]),
        )
        self.state.pending = []
        for _, m in batch:
            if m.receiver not in self.state.alive or m.sender not in self.state.alive:
                self._drop(m, "churn")
                continue
            if self.config.loss and self.rng.random() < self.config.loss:
                self._drop(m, "loss")
                continue
            try:
                out = self._dispatch(m, r)
            except ProtocolError as exc:
                log.debug("round %d: dropping %s %s->%s: %s", r, m.variant.value, m.sender, m.receiver, exc)
                self._drop(m, "protocol_error")
                continue
            self.cohorts[m.round][1] += 1
            self._send_all(out)

    def _dispatch(self, m: Message, r: int) -> list:
        peers = self.state.peers
        st = peers[m.receiver]
        v = m.variant
        out = []
        if v is Variant.CONN_REQUEST:
            d = proto.handle_conn_request(st, m.profile, m.interest, r)
            st = d.state
            out.append(Message(
                Variant.CONN_ACCEPT if d.accepted else Variant.CONN_REFUSE, st.peer_id, m.requester, r,
                interest=m.origin_interest, origin_interest=m.interest, profile=st.profile,
                peers=d.new_peers,
            ))
            if not d.accepted:
                out.extend(proto.route_join(st, m, r))
        elif v is Variant.CONN_ACCEPT:
            st, out = proto.handle_conn_accept(st, m.profile, m.interest, m.peers, r)
        elif v is Variant.CONN_REFUSE:
            st = proto.handle_conn_refuse(st, m.profile, m.interest, r)
        elif v is Variant.NEIGHBOR_QUERY:
            new_peers = proto.neighbor_reply_peers(st, m.sender, m.interest)
            out.append(Message(Variant.NEIGHBOR_REPLY, st.peer_id, m.sender, r,
                               interest=m.origin_interest, origin_interest=m.interest,
                               profile=st.profile, peers=new_peers))
        elif v is Variant.NEIGHBOR_REPLY:
            if not st.profile.has_interest(m.interest):
                raise ProtocolError(f"unknown interest {m.interest!r}")
            st = proto.refresh_neighbor(st, m.profile, r)
            self.replies[(m.receiver, m.interest)][m.sender] = m.peers
        elif v is Variant.REC_REQUEST:
            items = proto.handle_rec_request(st, m.profile, m.interest)
            out.append(Message(Variant.REC_REPLY, st.peer_id, m.sender, r,
                               interest=m.origin_interest, origin_interest=m.interest, items=items))
        elif v is Variant.REC_REPLY:
            self.state.events.extend(Event(r, "deliver_pull", m.receiver, i.id, m.sender) for i in m.items)
        elif v is Variant.REC_PUSH:
            (item,) = m.items
            self.state.events.append(Event(r, "deliver_push", m.receiver, item.id, m.sender))
            adopted, out, st = proto.handle_rec_push(st, item, r)
            if adopted:
                self.state.events.append(Event(r, "adopt", m.receiver, item.id, m.sender))
                self._record_forward(m.receiver, item.id, r)
        peers[m.receiver] = st
        return out

    def _record_forward(self, peer, item_id, r) -> None:
        self.forward_counts[(peer, item_id)] += 1
        self.state.events.append(Event(r, "forward", peer, item_id))

    def _gossip(self) -> None:
        r = self.state.round
        c = self.config
        peers = self.state.peers
        alive_sorted = _sorted_ids(self.state.alive)
        outgoing = []
        for p in alive_sorted:
            st = peers[p]
            st, _ = proto.expire_stale(st, r, c.stale_after)
            for iid in st.profile.interest_ids:
                got = self.replies.pop((p, iid), None)
                if got:
                    before = set(st.neighbor_ids(iid))
                    st, skipped = proto.gossip_cycle(st, iid, got, r)
                    self.gossip_skipped += skipped
                    fresh = [q for q in st.neighbor_ids(iid) if q not in before]
                    st, msgs = proto.connect_requests(st, iid, fresh, r)
                    outgoing.extend(msgs)
                hood = st.neighbors(iid)
                if not any(e.similarity > 0.0 for e in hood):
                    last = self.join_round.get((p, iid))
                    if last is None or r - last >= c.rejoin_after:
                        others = [q for q in alive_sorted if q != p]
                        boot = self.rng.sample(others, min(c.bootstrap_fanout, len(others)))
                        st, msgs = proto.join(st, [peers[q].profile for q in boot], r, interests=[iid])
                        self.join_round[(p, iid)] = r
                        outgoing.extend(msgs)
                for e in st.neighbors(iid):
                    outgoing.append(Message(Variant.NEIGHBOR_QUERY, p, e.peer_id, r,
                                            interest=e.remote_interest, origin_interest=iid))
                if c.pull_interval and r % c.pull_interval == 0:
                    for e in st.neighbors(iid):
                        outgoing.append(Message(Variant.REC_REQUEST, p, e.peer_id, r,
                                                interest=e.remote_interest, origin_interest=iid,
                                                profile=st.profile))
            peers[p] = st
        self.replies.clear()
        self._send_all(outgoing)

    def _churn(self) -> None:
        if not self.config.churn:
            return
        res = apply_churn(self.state, self.config.churn, self.rng, self._make_peer,
                          self.config.bootstrap_fanout)
        self.state = res.state
        for m in res.dropped:
            self._drop(m, "churn")
        for p in res.revived:
            for iid in self.state.peers[p].profile.interest_ids:
                self.join_round[(p, iid)] = self.state.round
        for p in res.died:
            for key in [k for k in self.replies if k[0] == p]:
                del self.replies[key]
        self._send_all(res.messages)

    def _inject(self) -> None:
        r = self.state.round
        for inj in self.config.injections:
            if inj.round != r:
                continue
            if inj.peer not in self.state.alive:
                log.warning("round %d: injection of %s at dead peer %s skipped", r, inj.item.id, inj.peer)
                continue
            st = self.state.peers[inj.peer]
            if inj.item.id in st.seen:
                log.warning("round %d: peer %s already knows %s", r, inj.peer, inj.item.id)
                continue
            st, msgs = proto.push_new_item(st, inj.item, r)
            self.state.peers[inj.peer] = st
            self.state.events.append(Event(r, "inject", inj.peer, inj.item.id))
            self._record_forward(inj.peer, inj.item.id, r)
            if inj.item.id not in self.item_community and self.ground_truth is not None:
                comms = self.ground_truth.get(inj.peer, frozenset())
                if len(comms) == 1:
                    (self.item_community[inj.item.id],) = comms
            self.injected.append((inj.item.id, inj.peer, r))
            self._send_all(msgs)

    # -- metrics ------------------------------------------------------------

    def profiles(self) -> dict:
        return {p: st.profile for p, st in self.state.peers.items()}

    def neighborhoods(self) -> dict:
        return {
            (p, iid): st.neighbor_ids(iid)
            for p, st in self.state.peers.items()
            if p in self.state.alive
            for iid in st.profile.interest_ids
        }

    def _track_floors(self) -> None:
        floors = {}
        for p in self.state.alive:
            st = self.state.peers[p]
            for iid in st.profile.interest_ids:
                floors[(p, iid)] = (st.admission_floor(iid), st.profile)
        for key, (f, prof) in floors.items():
            old = self._floors.get(key)
            if old is not None and old[1] is prof and f < old[0]:
                self.floor_decreases += 1
        self._floors = floors

    def _measure(self) -> RoundRecord:
        r = self.state.round
        profiles = self.profiles()
        ideal = self.oracle.top(profiles, self.state.alive)
        quality = neighbor_quality(self.neighborhoods(), ideal, self.config.capacity)
        purity = recall = precision = None
        coverage = {}
        if self.ground_truth is not None:
            links = [
                (p, e.peer_id)
                for p in _sorted_ids(self.state.alive)
                for hood in self.state.peers[p].neighborhoods.values()
                for e in hood
            ]
            purity = community_purity(links, self.ground_truth)
            recall, precision = recommendation_recall_precision(
                self.state.events, self.ground_truth, self.item_community,
                items=[i for i, _, _ in self.injected], upto=r,
            )
        for item_id, _, start in self.injected:
            comm = self.item_community.get(item_id)
            if comm is None or self.ground_truth is None:
                continue
            members = [p for p, cs in self.ground_truth.items() if comm in cs]
            coverage[item_id] = percolation_coverage(self.state.events, item_id, members, start, r)[0]
        return RoundRecord(r, len(self.state.alive), quality, purity, recall, precision, coverage)

    # -- driver -------------------------------------------------------------

    def step(self) -> RoundRecord:
        self._deliver()
        self._gossip()
        self._churn()
        self._inject()
        self._track_floors()
        rec = self._measure()
        self.records.append(rec)
        if self.observer is not None:
            self.observer(self)
        self.state.round += 1
        return rec

    def finish(self) -> SimReport:
        for _, m in self.state.pending:
            self._drop(m, "shutdown")
        self.state.pending = []
        for rec in self.records:
            rec.sent, rec.delivered, rec.dropped = self.cohorts.get(rec.round, (0, 0, 0))
        return SimReport(self.records, self._summary(), self.state.events, self.trace)

    def _summary(self) -> dict:
        c = self.config
        conv = next((rec.round for rec in self.records if rec.quality >= c.convergence_target), None)
        last = self.records[-1]
        sent = sum(v[0] for v in self.cohorts.values())
        delivered = sum(v[1] for v in self.cohorts.values())
        dropped = sum(v[2] for v in self.cohorts.values())
        items = {}
        for item_id, source, start in self.injected:
            comm = self.item_community.get(item_id)
            entry = {"source": source, "round": start, "community": comm,
                     "coverage": None, "rounds_to_90pct": None}
            if comm is not None and self.ground_truth is not None:
                members = [p for p, cs in self.ground_truth.items() if comm in cs]
                cov, reach = percolation_coverage(self.state.events, item_id, members, start, last.round)
                entry.update(coverage=cov, rounds_to_90pct=reach, community_size=len(members))
            items[item_id] = entry
        return {
            "config": c.as_dict(),
            "rounds": len(self.records),
            "convergence_round": conv,
            "final": {
                "alive": last.alive,
                "quality": last.quality,
                "purity": last.purity,
                "recall": last.recall,
                "precision": last.precision,
            },
            "messages": {
                "sent": sent,
                "delivered": delivered,
                "dropped": dropped,
                "dropped_by_reason": dict(sorted(self.drop_reasons.items())),
            },
            "gossip_skipped": self.gossip_skipped,
            "floor_decreases": self.floor_decreases,
            "forward_violations": sum(1 for n in self.forward_counts.values() if n > 1),
            "items": items,
        }


def run(config: SimConfig, workload, trace: bool = False,
        observer: Callable[[Simulation], None] | None = None) -> SimReport:
    """Run ``config.rounds`` rounds over ``workload`` (a PlantedWorkload, a
    ``{peer_id: Profile}`` mapping or an iterable of profiles)."""
    sim = Simulation(config, workload, trace=trace, observer=observer)
    for _ in range(config.rounds):
        sim.step()
    return sim.finish()
