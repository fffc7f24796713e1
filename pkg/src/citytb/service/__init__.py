from .heatmap import NoData, heatmap_grid
from .plane import AsiFilter, BadFilter, NotServiceRegistered, ServicePlane

__all__ = [
    "AsiFilter",
    "BadFilter",
    "NoData",
    "NotServiceRegistered",
    "ServicePlane",
    "heatmap_grid",
]
