"""Overlay and dissemination metrics, including the omniscient top-C oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .profile import canonical_key, peer_similarity


def oracle_topC(profiles: Mapping, capacity: int, peers: Iterable | None = None) -> dict:
    """Exact top-``capacity`` neighbors for every (peer, interest).

    Candidates are all other peers in ``peers`` (default: every profile) with
    positive similarity, ranked by similarity then canonical id. Returns
    ``{(peer, interest): tuple of peer ids}``.
    """
    pool = sorted(profiles if peers is None else peers, key=canonical_key)
    out = {}
    for p in pool:
        prof = profiles[p]
        for iid in prof.interest_ids:
            scored = []
            for q in pool:
                if q == p:
                    continue
                s = peer_similarity(prof, iid, profiles[q])
                if s > 0.0:
                    scored.append((-s, canonical_key(q), q))
            scored.sort()
            out[(p, iid)] = tuple(q for _, _, q in scored[:capacity])
    return out


class OracleIndex:
    """Oracle rankings precomputed over all peers, filtered per alive set.

    Rankings are rebuilt whenever a profile object changes; the alive-set
    restriction is a cheap filter, so churned runs stay fast.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._profiles: dict = {}
        self._ranked: dict = {}

    def _sync(self, profiles: Mapping) -> None:
        if len(profiles) == len(self._profiles) and all(
            self._profiles.get(p) is prof for p, prof in profiles.items()
        ):
            return
        changed = {p for p, prof in profiles.items() if self._profiles.get(p) is not prof}
        rebuild_all = set(self._profiles) != set(profiles)
        self._profiles = dict(profiles)
        pool = sorted(profiles, key=canonical_key)
        for p in pool:
            prof = profiles[p]
            for iid in prof.interest_ids:
                key = (p, iid)
                if not rebuild_all and p not in changed and key in self._ranked:
                    # only rows touching a changed peer need re-scoring
                    row = [t for t in self._ranked[key] if t[2] not in changed]
                    for q in changed:
                        if q != p:
                            s = peer_similarity(prof, iid, profiles[q])
                            if s > 0.0:
                                row.append((-s, canonical_key(q), q))
                    row.sort()
                    self._ranked[key] = row
                    continue
                row = []
                for q in pool:
                    if q != p:
                        s = peer_similarity(prof, iid, profiles[q])
                        if s > 0.0:
                            row.append((-s, canonical_key(q), q))
                row.sort()
                self._ranked[key] = row
        live = {(p, iid) for p, prof in profiles.items() for iid in prof.interest_ids}
        for key in list(self._ranked):
            if key not in live:
                del self._ranked[key]

    def top(self, profiles: Mapping, alive: Iterable) -> dict:
        self._sync(profiles)
        alive = set(alive)
        out = {}
        for (p, iid), row in self._ranked.items():
            if p not in alive:
                continue
            picked = []
            for _, _, q in row:
                if q in alive:
                    picked.append(q)
                    if len(picked) == self.capacity:
                        break
            out[(p, iid)] = tuple(picked)
        return out


def neighbor_quality(actual: Mapping, ideal: Mapping, capacity: int) -> float:
    """Mean of ``|actual ∩ ideal| / min(C, |ideal|)`` over keys with a non-empty ideal set."""
    parts = []
    for key in sorted(ideal, key=lambda k: (canonical_key(k[0]), canonical_key(k[1]))):
        want = ideal[key]
        if not want:
            continue
        have = set(actual.get(key, ()))
        parts.append(len(have & set(want)) / min(capacity, len(want)))
    return math.fsum(parts) / len(parts) if parts else 0.0


def community_purity(links: Iterable, ground_truth: Mapping) -> float:
    """Fraction of (peer, neighbor) links whose endpoints share a planted community."""
    total = good = 0
    for p, q in links:
        total += 1
        if ground_truth.get(p, frozenset()) & ground_truth.get(q, frozenset()):
            good += 1
    return good / total if total else 0.0


@dataclass(frozen=True)
class Event:
    round: int
    kind: str  # inject | adopt | forward | deliver_push | deliver_pull | die | revive
    peer: object
    item: str | None = None
    other: object = None


def adopters_by_round(events: Iterable[Event], item_id: str) -> dict:
    """``{peer: first round it held the item}`` from inject/adopt events."""
    out = {}
    for e in events:
        if e.item == item_id and e.kind in ("inject", "adopt") and e.peer not in out:
            out[e.peer] = e.round
    return out


def percolation_coverage(
    events: Iterable[Event],
    item_id: str,
    members: Iterable,
    start: int,
    end: int,
    target: float = 0.9,
) -> tuple:
    """Coverage of ``item_id`` over its community ``members`` by round ``end``,
    and rounds after ``start`` until coverage first reached ``target`` (None if never).
    """
    members = set(members)
    if not members:
        return 0.0, None
    first = adopters_by_round(events, item_id)
    rounds = sorted(r for p, r in first.items() if p in members and r <= end)
    reached = None
    for k, r in enumerate(rounds, start=1):
        if k / len(members) >= target:
            reached = r - start
            break
    return len(rounds) / len(members), reached


def coverage_at(events: Iterable[Event], item_id: str, members: Iterable, round: int) -> float:
    return percolation_coverage(events, item_id, members, 0, round)[0]


def recommendation_recall_precision(
    events: Iterable[Event],
    ground_truth: Mapping,
    item_community: Mapping,
    items: Iterable[str] | None = None,
    upto: int | None = None,
) -> tuple:
    """Recall and precision of delivered recommendations against planted communities.

    A delivery is relevant when the receiver belongs to the item's community.
    Precision is over all deliveries of items with a known community; recall
    is, per item in ``items`` (default: every delivered item), the fraction of
    the community's members other than the source that received it, averaged.
    Both are 0 when undefined.
    """
    delivered = relevant = 0
    receivers: dict = {}
    sources: dict = {}
    for e in events:
        if upto is not None and e.round > upto:
            continue
        if e.kind == "inject":
            sources[e.item] = e.peer
        if e.kind not in ("deliver_push", "deliver_pull"):
            continue
        c = item_community.get(e.item)
        if c is None:
            continue
        delivered += 1
        if c in ground_truth.get(e.peer, ()):
            relevant += 1
            receivers.setdefault(e.item, set()).add(e.peer)
    precision = relevant / delivered if delivered else 0.0
    pool = sorted(receivers) if items is None else sorted(items)
    parts = []
    for it in pool:
        c = item_community.get(it)
        if c is None:
            continue
        members = {p for p, cs in ground_truth.items() if c in cs} - {sources.get(it)}
        if members:
            parts.append(len(receivers.get(it, set()) & members) / len(members))
    recall = math.fsum(parts) / len(parts) if parts else 0.0
    return recall, precision


@dataclass
class RoundRecord:
    round: int
    alive: int
    quality: float
    purity: float | None
    recall: float | None
    precision: float | None
    coverage: dict = field(default_factory=dict)
    sent: int = 0
    delivered: int = 0
    dropped: int = 0


ROUNDS_HEADER = (
    "round", "alive", "quality", "purity", "recall", "precision",
    "coverage", "sent", "delivered", "dropped",
)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


@dataclass
class SimReport:
    """Per-round records plus a run summary.

    Message counts in a record cover the messages *sent* in that round, split
    by their eventual fate, so each row satisfies ``sent == delivered + dropped``.
    """

    records: list
    summary: dict
    events: list = field(default_factory=list, repr=False)
    trace: list = field(default_factory=list, repr=False)

    def rounds_csv(self) -> str:
        lines = [",".join(ROUNDS_HEADER)]
        for r in self.records:
            cov = ";".join(f"{k}={v:.6f}" for k, v in sorted(r.coverage.items()))
            lines.append(",".join((
                str(r.round), str(r.alive), _fmt(r.quality), _fmt(r.purity), _fmt(r.recall),
                _fmt(r.precision), cov, str(r.sent), str(r.delivered), str(r.dropped),
            )))
        return "\n".join(lines) + "\n"

    def trace_csv(self) -> str:
        lines = ["round,sender,receiver,variant,interest,payload_size"]
        lines.extend(
            f"{m.round},{m.sender},{m.receiver},{m.variant.value},"
            f"{'' if m.interest is None else m.interest},{m.payload_size}"
            for m in self.trace
        )
        return "\n".join(lines) + "\n"

    def conservation_ok(self) -> bool:
        rows_ok = all(r.sent == r.delivered + r.dropped for r in self.records)
        s = self.summary["messages"]
        return rows_ok and s["sent"] == s["delivered"] + s["dropped"]
