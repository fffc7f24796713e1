from .topology import ClusterTopology, GatewaySpec, NodeSpec, Topology, TopologyError, load_topology
from .world import World, UnknownUrn

__all__ = [
    "ClusterTopology",
    "GatewaySpec",
    "NodeSpec",
    "Topology",
    "TopologyError",
    "UnknownUrn",
    "World",
    "load_topology",
]
