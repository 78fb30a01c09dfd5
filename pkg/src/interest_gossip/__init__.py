"""Interest-based gossip overlays and epidemic recommendation diffusion."""

from .profile import (
    InterestMatch,
    Item,
    Profile,
    ProfileError,
    assign_interest,
    item_peer_similarity,
    jaccard,
    match_interest,
    peer_similarity,
)
from .protocol import Message, NeighborEntry, PeerState, ProtocolError, Variant
from .simnet import ConfigError, Injection, SimConfig, Simulation, run
from .workload import PlantedWorkload, generate, ingest_csv

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Injection",
    "InterestMatch",
    "Item",
    "Message",
    "NeighborEntry",
    "PeerState",
    "PlantedWorkload",
    "Profile",
    "ProfileError",
    "ProtocolError",
    "SimConfig",
    "Simulation",
    "Variant",
    "assign_interest",
    "generate",
    "ingest_csv",
    "item_peer_similarity",
    "jaccard",
    "match_interest",
    "peer_similarity",
    "run",
]
