"""Synthetic workloads with planted interest communities, plus CSV ingestion."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .profile import (
    CSV_HEADER,
    DEFAULT_MERGE_THRESHOLD,
    Item,
    Profile,
    ProfileError,
    assign_interest,
    canonical_key,
    parse_ident,
)

log = logging.getLogger(__name__)


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadParams:
    n_peers: int = 200
    n_communities: int = 4
    interests_per_peer: int = 1
    items_per_interest: int = 12
    feature_noise: float = 0.1
    seed: int = 0
    # expected fraction of a community catalog held by one interest
    item_overlap: float = 0.5
    features_per_item: int = 4
    pool_size: int = 12
    noise_pool_size: int = 64

    def validate(self) -> None:
        if self.n_peers < 1:
            raise WorkloadError("n_peers must be >= 1")
        if self.n_communities < 1:
            raise WorkloadError("n_communities must be >= 1")
        if self.interests_per_peer < 1:
            raise WorkloadError("interests_per_peer must be >= 1")
        if self.interests_per_peer > self.n_communities:
            raise WorkloadError(
                f"interests_per_peer={self.interests_per_peer} exceeds n_communities={self.n_communities}"
            )
        if self.items_per_interest < 1:
            raise WorkloadError("items_per_interest must be >= 1")
        if not 0.0 <= self.feature_noise <= 1.0:
            raise WorkloadError("feature_noise must lie in [0, 1]")
        if not 0.0 < self.item_overlap <= 1.0:
            raise WorkloadError("item_overlap must lie in (0, 1]")
        if self.features_per_item < 1 or self.features_per_item > min(self.pool_size, self.noise_pool_size):
            raise WorkloadError("features_per_item must be in [1, min(pool sizes)]")


@dataclass(frozen=True)
class PlantedWorkload:
    profiles: Mapping  # peer id -> Profile
    ground_truth: Mapping  # peer id -> frozenset of community ids
    pools: Mapping  # community id -> frozenset of feature tokens
    noise_pool: frozenset
    catalog: Mapping  # community id -> tuple of catalog Items
    item_community: Mapping  # item id -> community id
    params: WorkloadParams

    def members(self, community: int) -> frozenset:
        return frozenset(p for p, cs in self.ground_truth.items() if community in cs)

    def fresh_item(self, community: int, item_id: str, rng: random.Random) -> Item:
        """A new item (not in any catalog) drawn like the community's catalog items."""
        return _draw_item(item_id, self.pools[community], self.noise_pool, self.params, rng)


def _draw_item(item_id, pool, noise_pool, params: WorkloadParams, rng: random.Random, rating=None) -> Item:
    pool = sorted(pool)
    noise = sorted(noise_pool)
    k = params.features_per_item
    n_noise = sum(rng.random() < params.feature_noise for _ in range(k))
    feats = rng.sample(pool, k - n_noise) + rng.sample(noise, n_noise)
    return Item(item_id, frozenset(feats), rating)


def generate(
    n_peers: int,
    n_communities: int,
    interests_per_peer: int,
    items_per_interest: int,
    feature_noise: float,
    seed: int,
    **extra,
) -> PlantedWorkload:
    """Planted-community workload.

    Each community owns a feature pool and an item catalog of about
    ``items_per_interest / item_overlap`` items. Every catalog item takes each
    of its features from the global noise pool with probability
    ``feature_noise`` and from the community pool otherwise. A peer gets
    ``interests_per_peer`` distinct communities and, for each, one interest of
    ``items_per_interest`` items sampled from that catalog, with a private
    rating per item.
    """
    params = WorkloadParams(n_peers, n_communities, interests_per_peer, items_per_interest,
                            feature_noise, seed, **extra)
    params.validate()
    rng = random.Random(seed)
    pools = {
        c: frozenset(f"c{c}f{j}" for j in range(params.pool_size)) for c in range(n_communities)
    }
    noise_pool = frozenset(f"nf{j}" for j in range(params.noise_pool_size))
    catalog_size = max(items_per_interest, math.ceil(items_per_interest / params.item_overlap))
    catalog = {}
    item_community = {}
    for c in range(n_communities):
        items = tuple(
            _draw_item(f"c{c}-i{k}", pools[c], noise_pool, params, rng) for k in range(catalog_size)
        )
        catalog[c] = items
        item_community.update((i.id, c) for i in items)

    profiles = {}
    truth = {}
    for p in range(n_peers):
        comms = sorted(rng.sample(range(n_communities), interests_per_peer))
        interests = {}
        for j, c in enumerate(comms):
            chosen = rng.sample(catalog[c], items_per_interest)
            interests[j] = frozenset(
                Item(i.id, i.features, round(rng.random(), 3)) for i in chosen
            )
        profiles[p] = Profile(p, interests)
        truth[p] = frozenset(comms)
    return PlantedWorkload(profiles, truth, pools, noise_pool, catalog, item_community, params)


class CsvFormatError(WorkloadError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def ingest_csv(path, merge_threshold: float = DEFAULT_MERGE_THRESHOLD) -> dict:
    """Read profiles written by :func:`profile.write_profiles_csv`.

    The ``interest_id`` column is optional; when it is missing (or blank for a
    row) the item is placed by :func:`assign_interest` in file order. Returns
    ``{peer_id: Profile}``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(path, 1, "missing header row") from None
        required = [h for h in CSV_HEADER if h != "interest_id"]
        missing = [h for h in required if h not in header]
        if missing:
            raise CsvFormatError(path, 1, f"header lacks columns {missing}")
        col = {h: header.index(h) for h in header}
        has_interest = "interest_id" in col

        explicit: dict = {}  # peer -> {iid: [items]}
        pending: dict = {}  # peer -> [items] awaiting assignment
        seen_pairs: set = set()
        rows = 0
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(path, line, f"expected {len(header)} fields, got {len(row)}")
            rows += 1
            peer = parse_ident(row[col["peer_id"]])
            item_id = row[col["item_id"]].strip()
            if peer == "" or not item_id:
                raise CsvFormatError(path, line, "empty peer_id or item_id")
            feats = [f for f in row[col["features"]].split(";") if f]
            raw_rating = row[col["rating"]].strip()
            try:
                rating = float(raw_rating) if raw_rating else None
                item = Item(item_id, frozenset(feats), rating)
            except (ValueError, ProfileError) as exc:
                raise CsvFormatError(path, line, str(exc)) from None
            if (peer, item_id) in seen_pairs:
                raise CsvFormatError(path, line, f"duplicate item {item_id!r} for peer {peer!r}")
            seen_pairs.add((peer, item_id))
            iid_text = row[col["interest_id"]].strip() if has_interest else ""
            if iid_text:
                explicit.setdefault(peer, {}).setdefault(parse_ident(iid_text), []).append(item)
            else:
                pending.setdefault(peer, []).append(item)

    if rows == 0:
        log.warning("%s: header only, no profiles", path)
        return {}

    profiles = {}
    for peer in sorted(set(explicit) | set(pending), key=canonical_key):
        try:
            prof = Profile(peer, explicit.get(peer, {}))
            for item in pending.get(peer, []):
                _, prof = assign_interest(item, prof, merge_threshold)
            prof.validate()
        except ProfileError as exc:
            raise WorkloadError(f"{path}: {exc}") from None
        profiles[peer] = prof
    return profiles
