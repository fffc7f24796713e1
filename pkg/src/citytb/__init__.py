"""citytb: a desk-scale city IoT testbed.

A deterministic simulation of a city-wide sensor deployment (gateway-headed
mesh clusters, dual radio planes, vehicle-mounted mobile nodes) managed by a
real control plane: publish-subscribe event bus, resource directory,
soft-state monitoring, reservations, experiment sessions with over-the-air
reprogramming, and an application-support plane for observations.
"""

__version__ = "0.1.0"
