"""Items, peer profiles and the Jaccard-based similarity measures.

A profile holds a peer's items split into peer-local interests. Every
similarity in the system reduces to :func:`jaccard`: between item-id sets for
peer/peer comparisons, and between feature sets for item/interest affinity.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Hashable, Iterable, Mapping, TextIO, Union

PeerId = Union[int, str]
InterestId = Hashable

CSV_HEADER = ("peer_id", "interest_id", "item_id", "features", "rating")
DEFAULT_MERGE_THRESHOLD = 0.1

_INT_RE = re.compile(r"-?\d+\Z")


class ProfileError(ValueError):
    """A profile or item violates its invariants."""


def canonical_key(ident) -> tuple:
    """Sort key giving a total order over mixed int/str identifiers.

    Ints sort before strings; this is the tie-break order used by every argmax
    and top-C selection.
    """
    if isinstance(ident, int) and not isinstance(ident, bool):
        return (0, ident, "")
    return (1, 0, str(ident))


def parse_ident(text: str) -> PeerId:
    """Inverse of ``str()`` for identifiers: integer-looking text becomes int."""
    text = text.strip()
    return int(text) if _INT_RE.match(text) else text


def jaccard(a: Iterable, b: Iterable) -> float:
    """``|a & b| / |a | b|``, with ``jaccard(empty, empty) == 0``."""
    if not isinstance(a, (set, frozenset)):
        a = set(a)
    if not isinstance(b, (set, frozenset)):
        b = set(b)
    if not a and not b:
        return 0.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


@dataclass(frozen=True)
class Item:
    id: str
    features: frozenset
    rating: float | None = None

    def __post_init__(self):
        if not isinstance(self.features, frozenset):
            object.__setattr__(self, "features", frozenset(self.features))
        if not self.features:
            raise ProfileError(f"item {self.id!r} has no features")
        if self.rating is not None and not 0.0 <= self.rating <= 1.0:
            raise ProfileError(f"item {self.id!r} rating {self.rating} outside [0, 1]")


@dataclass(frozen=True)
class InterestMatch:
    local_interest: InterestId
    remote_interest: InterestId
    similarity: float


@dataclass(frozen=True, eq=True)
class Profile:
    """A peer's items partitioned into interests.

    ``interests`` may be passed as a mapping; it is normalised to a tuple of
    ``(interest_id, frozenset[Item])`` pairs in canonical order so profiles are
    hashable and compare by value.
    """

    peer_id: PeerId
    interests: tuple = field(default=())

    def __post_init__(self):
        raw = self.interests
        pairs = raw.items() if isinstance(raw, Mapping) else raw
        norm = tuple(
            sorted(((iid, frozenset(items)) for iid, items in pairs), key=lambda p: canonical_key(p[0]))
        )
        seen: dict[str, InterestId] = {}
        ids = set()
        for iid, items in norm:
            if iid in ids:
                raise ProfileError(f"peer {self.peer_id!r}: interest {iid!r} listed twice")
            ids.add(iid)
            if not items:
                raise ProfileError(f"peer {self.peer_id!r}: interest {iid!r} is empty")
            for item in items:
                if item.id in seen:
                    raise ProfileError(
                        f"peer {self.peer_id!r}: item {item.id!r} in interests "
                        f"{seen[item.id]!r} and {iid!r}"
                    )
                seen[item.id] = iid
        object.__setattr__(self, "interests", norm)

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self) -> int:
        return hash((self.peer_id, self.interests))

    @cached_property
    def _by_id(self) -> dict:
        return dict(self.interests)

    @cached_property
    def _item_ids(self) -> dict:
        return {iid: frozenset(i.id for i in items) for iid, items in self.interests}

    @cached_property
    def _features(self) -> dict:
        return {iid: frozenset().union(*(i.features for i in items)) for iid, items in self.interests}

    @cached_property
    def _owner(self) -> dict:
        return {i.id: iid for iid, items in self.interests for i in items}

    @property
    def interest_ids(self) -> tuple:
        return tuple(iid for iid, _ in self.interests)

    def has_interest(self, iid) -> bool:
        return iid in self._by_id

    def items(self, iid) -> frozenset:
        try:
            return self._by_id[iid]
        except KeyError:
            raise KeyError(f"peer {self.peer_id!r} has no interest {iid!r}") from None

    def item_ids(self, iid) -> frozenset:
        self.items(iid)
        return self._item_ids[iid]

    def feature_union(self, iid) -> frozenset:
        self.items(iid)
        return self._features[iid]

    @property
    def all_item_ids(self) -> frozenset:
        return frozenset(self._owner)

    def interest_of(self, item_id: str):
        return self._owner.get(item_id)

    def with_item(self, iid, item: Item) -> "Profile":
        if item.id in self._owner:
            raise ProfileError(f"peer {self.peer_id!r} already holds item {item.id!r}")
        mapping = dict(self._by_id)
        mapping[iid] = mapping.get(iid, frozenset()) | {item}
        return Profile(self.peer_id, mapping)

    def validate(self) -> None:
        """Full invariant check, including the at-least-one-interest rule."""
        if not self.interests:
            raise ProfileError(f"peer {self.peer_id!r} has no interests")


def fresh_interest_id(profile: Profile) -> int:
    ints = [i for i in profile.interest_ids if isinstance(i, int) and not isinstance(i, bool)]
    return max(ints) + 1 if ints else 0


def interest_affinity(item: Item, profile: Profile, iid) -> float:
    return jaccard(item.features, profile.feature_union(iid))


def assign_interest(
    item: Item, profile: Profile, merge_threshold: float = DEFAULT_MERGE_THRESHOLD
) -> tuple:
    """Greedy local interest assignment for a new item.

    The item joins the interest whose feature union it overlaps most (ties to
    the smallest interest id) when that affinity reaches ``merge_threshold``,
    and opens a fresh interest otherwise. Returns ``(interest_id, profile)``.
    """
    if item.id in profile.all_item_ids:
        raise ProfileError(f"peer {profile.peer_id!r} already holds item {item.id!r}")
    best, best_aff = None, -1.0
    for iid in profile.interest_ids:
        aff = interest_affinity(item, profile, iid)
        if aff > best_aff:
            best, best_aff = iid, aff
    if best is None or best_aff < merge_threshold:
        best = fresh_interest_id(profile)
    return best, profile.with_item(best, item)


@lru_cache(maxsize=1 << 18)
def _best_match(local_ids: frozenset, remote: Profile) -> tuple:
    best, best_sim = None, -1.0
    for iid in remote.interest_ids:
        s = jaccard(local_ids, remote.item_ids(iid))
        if s > best_sim:
            best, best_sim = iid, s
    return best, best_sim


def match_interest(local: Profile, local_interest, remote: Profile) -> InterestMatch:
    """Remote interest whose item set is closest to ``local_interest``'s."""
    ids = local.item_ids(local_interest)
    if not remote.interests:
        raise ProfileError(f"peer {remote.peer_id!r} has no interests")
    remote_iid, sim = _best_match(ids, remote)
    return InterestMatch(local_interest, remote_iid, sim)


def peer_similarity(p1: Profile, i1, p2: Profile) -> float:
    return match_interest(p1, i1, p2).similarity


def item_peer_similarity(item: Item, profile: Profile, interest) -> float:
    return jaccard(item.features, profile.feature_union(interest))


def write_profiles_csv(profiles: Iterable[Profile], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in sorted(profiles, key=lambda p: canonical_key(p.peer_id)):
        for iid, items in p.interests:
            for item in sorted(items, key=lambda i: i.id):
                rating = "" if item.rating is None else repr(float(item.rating))
                w.writerow((p.peer_id, iid, item.id, ";".join(sorted(item.features)), rating))


def profiles_to_csv(profiles: Iterable[Profile]) -> str:
    buf = io.StringIO()
    write_profiles_csv(profiles, buf)
    return buf.getvalue()
