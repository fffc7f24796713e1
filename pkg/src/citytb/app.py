"""Wires a full testbed: simulated world + broker + directory + portal +
configurators + gateway/fleet agents + reservation system + sessions + ASI.

One discrete-event kernel drives everything. In step mode (tests, scenarios)
the caller advances time explicitly; in live mode a kernel thread free-runs
with optional wall-clock pacing and other threads inject work via ``call``.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Optional, TypeVar, Union

from .agent import GatewayAgent, ManifestEntry, MobileFleetAgent
from .bus.broker import Broker
from .config import TestbedConfig
from .directory import ResourceDirectory
from .kernel import Kernel
from .model import MOBILE, NodeRole, Urn
from .portal import ExperimentConfigurator, PortalManager, ServiceConfigurator
from .ports import EmbeddedBusPort
from .runtime import Availability, ReservationSystem, SessionManager
from .service import ServicePlane
from .sim.topology import Topology, load_topology
from .sim.world import World

T = TypeVar("T")


class Testbed:
    __test__ = False  # not a pytest class

    def __init__(
        self,
        topology: Union[Topology, str, os.PathLike],
        config: Optional[TestbedConfig] = None,
        seed: int = 0,
        persist_dir: Optional[str] = None,
        embedded_agents: bool = True,
    ):
        self.config = config or TestbedConfig()
        self.kernel = Kernel()
        if not isinstance(topology, Topology):
            topology = load_topology(topology)
        self.topology = topology
        self.world = World(self.kernel, topology, seed=seed)

        dispatch = self.kernel.call_soon
        bus_dir = rd_path = asi_path = None
        if persist_dir is not None:
            bus_dir = os.path.join(persist_dir, "bus")
            rd_path = os.path.join(persist_dir, "rd.log")
            asi_path = os.path.join(persist_dir, "asi.log")
        self.broker = Broker(dispatch=dispatch, persist_dir=bus_dir)
        self.rd = ResourceDirectory(persist_path=rd_path, dispatch=dispatch)
        self.service = ServicePlane(dispatch=dispatch, persist_path=asi_path)
        self.availability = Availability()

        self.portal = PortalManager(
            self.kernel, self.rd, EmbeddedBusPort(self.broker, "portal"), self.config
        )
        self.experiment_configurator = ExperimentConfigurator(
            self.kernel, EmbeddedBusPort(self.broker, "tr-configurator"), self.availability
        )
        self.service_configurator = ServiceConfigurator(
            self.kernel, EmbeddedBusPort(self.broker, "usn-configurator"), self.service
        )
        self.reservations = ReservationSystem(
            self.kernel.now, self.availability, self.rd, self.config
        )
        self.sessions = SessionManager(
            self.kernel, self.world, self.reservations, self.availability, self.config
        )

        self.agents: dict[Urn, GatewayAgent] = {}
        self.fleet: Optional[MobileFleetAgent] = None
        if embedded_agents:
            for gw_urn in sorted(topology.gateways, key=str):
                manifest = self.gateway_manifest(gw_urn)
                self.agents[gw_urn] = GatewayAgent(
                    self.kernel,
                    self.world,
                    EmbeddedBusPort(self.broker, f"agent-{gw_urn.node_id}"),
                    gw_urn,
                    manifest,
                    self.config,
                    sink=self._make_sink(manifest),
                )
            mobile_manifest = self.mobile_manifest()
            if mobile_manifest:
                self.fleet = MobileFleetAgent(
                    self.kernel,
                    self.world,
                    EmbeddedBusPort(self.broker, "agent-fleet"),
                    mobile_manifest,
                    self.config,
                    sink=self._make_sink(mobile_manifest),
                )

        self._live_thread: Optional[threading.Thread] = None
        self._started = False

    # ----------------------------------------------------------- manifests

    def gateway_manifest(self, gw_urn: Urn) -> dict[Urn, ManifestEntry]:
        gw_spec = self.topology.gateways[gw_urn]
        manifest: dict[Urn, ManifestEntry] = {
            gw_urn: ManifestEntry(
                role=NodeRole.INFRASTRUCTURAL,
                position=gw_spec.position,
                serves=False,
                meta=dict(gw_spec.meta),
            )
        }
        for urn in self.topology.clusters[gw_urn].members:
            spec = self.topology.nodes[urn]
            manifest[urn] = ManifestEntry(
                role=spec.role,
                position=spec.location,
                serves=spec.serves,
                meta=dict(spec.meta),
            )
        return manifest

    def mobile_manifest(self) -> dict[Urn, ManifestEntry]:
        manifest: dict[Urn, ManifestEntry] = {}
        for spec in self.topology.mobile_nodes():
            manifest[spec.urn] = ManifestEntry(
                role=spec.role,
                position=MOBILE,
                serves=spec.serves,
                meta=dict(spec.meta),
            )
        return manifest

    def _make_sink(self, manifest: dict[Urn, ManifestEntry]):
        def sink(obs) -> None:
            entry = manifest.get(obs.source)
            if entry is not None and entry.serves:
                self.service.offer(obs)

        return sink

    # -------------------------------------------------------------- control

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.portal.start()
        self.experiment_configurator.start()
        self.service_configurator.start()
        for agent in self.agents.values():
            agent.start()
        if self.fleet is not None:
            self.fleet.start()

    def run_until(self, t_ms: int) -> None:
        self.kernel.run_until(t_ms)

    def run_for(self, dt_ms: int) -> None:
        self.kernel.run_for(dt_ms)

    def run_live(self, pace: float = 0.0) -> None:
        """Start the kernel free-running on its own thread (service mode)."""
        if self._live_thread is not None:
            return
        self._live_thread = threading.Thread(
            target=self.kernel.run_live, kwargs={"pace": pace}, daemon=True
        )
        self._live_thread.start()

    @property
    def live(self) -> bool:
        return self._live_thread is not None and self._live_thread.is_alive()

    def call(self, fn: Callable[[], T]) -> T:
        """Run ``fn`` on the kernel thread and return its result."""
        if not self.live:
            return fn()
        done = threading.Event()
        box: dict = {}

        def wrapper() -> None:
            try:
                box["value"] = fn()
            except BaseException as exc:  # propagate to the caller thread
                box["error"] = exc
            finally:
                done.set()

        self.kernel.submit(wrapper)
        if not done.wait(timeout=30):
            raise TimeoutError("kernel did not pick up the command")
        if "error" in box:
            raise box["error"]
        return box["value"]

    def shutdown(self) -> None:
        self.kernel.stop()
        if self._live_thread is not None:
            self._live_thread.join(timeout=5)
            self._live_thread = None
        self.broker.close()
        self.rd.close()
        self.service.close()

    # ------------------------------------------------------------- helpers

    def wait_for_cold_start(self, limit_ms: Optional[int] = None) -> int:
        """Step time until every seeded resource is registered (step mode).

        Returns the simulated time at which the directory caught up.
        """
        expected = len(self.topology.nodes) + len(self.topology.gateways)
        deadline = self.kernel.now() + (limit_ms or 10 * 60_000)
        while self.kernel.now() < deadline:
            if self.rd.count() >= expected:
                return self.kernel.now()
            self.kernel.run_for(1_000)
        raise TimeoutError(
            f"cold start incomplete: {self.rd.count()}/{expected} registered "
            f"after {self.kernel.now()} ms"
        )
