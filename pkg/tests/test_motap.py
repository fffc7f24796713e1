"""Flash dissemination protocol: pipelined bound, loss recovery, atomicity."""

from __future__ import annotations

from collections import deque

import pytest

from citytb.config import TestbedConfig
from citytb.kernel import Kernel
from citytb.model import parse_urn
from citytb.runtime.motap import MotapEngine, NodeImage
from citytb.seeds import seed_path
from citytb.sim.topology import load_topology, parse_topology
from citytb.sim.world import World

from helpers import gateway_line, mobile_line, node_line, urn


def chain_cluster_topo(loss: float = 0.0) -> str:
    """1 gateway, 4 relays at 100 m pitch, 15 leaves behind the last relay."""
    lines = [
        f"world range=120 loss={loss} latency=10",
        gateway_line("gw1", 0, 0),
    ]
    for i in range(4):
        lines.append(node_line(f"a{i + 1}", (i + 1) * 100.0, 0, "gw1"))
    for i in range(15):
        lines.append(node_line(f"l{i + 1:02d}", 500.0, -52 + i * 7.5, "gw1"))
    return "\n".join(lines)


def graph_diameter(topo) -> int:
    cluster = next(iter(topo.clusters.values()))
    nodes = set(cluster.members) | {cluster.gateway}
    adj = {n: set() for n in nodes}
    for a, b in cluster.mesh_edges:
        adj[a].add(b)
        adj[b].add(a)
    best = 0
    for start in nodes:
        dist = {start: 0}
        work = deque([start])
        while work:
            cur = work.popleft()
            for nxt in adj[cur]:
                if nxt not in dist:
                    dist[nxt] = dist[cur] + 1
                    work.append(nxt)
        best = max(best, max(dist.values()))
    return best


def build(loss: float, seed: int = 0):
    kernel = Kernel()
    topo = parse_topology(chain_cluster_topo(loss))
    world = World(kernel, topo, seed=seed)
    engine = MotapEngine(kernel, world, TestbedConfig())
    return kernel, topo, world, engine


def all_targets(topo):
    return sorted(next(iter(topo.clusters.values())).members, key=str)


def test_broadcast_lossless_completes_within_pipelined_bound():
    kernel, topo, world, engine = build(loss=0.0)
    targets = all_targets(topo)
    image = NodeImage("img-echo", "echo", b"\x07" * 1024)  # 16 chunks of 64 B
    transfer = engine.start(image, targets, "broadcast")
    kernel.run_until(60_000)
    assert transfer.status == "complete"
    assert sorted(transfer.completed, key=str) == targets
    diameter = graph_diameter(topo)
    assert diameter == 5
    assert transfer.rounds <= diameter + 16
    # every target rebooted into the new behavior at a bumped version
    for target in targets:
        installed = world.installed_image(target)
        assert (installed.behavior_id, installed.version) == ("echo", 2)


def test_broadcast_with_loss_completes_using_more_frames():
    _, topo, _, engine0 = build(loss=0.0)
    targets = all_targets(topo)
    image = NodeImage("img-echo", "echo", b"\x07" * 1024)
    kernel0, topo0, _, engine0 = build(loss=0.0)
    t0 = engine0.start(image, all_targets(topo0), "broadcast")
    kernel0.run_until(120_000)
    kernel1, topo1, world1, engine1 = build(loss=0.2, seed=1234)
    t1 = engine1.start(image, all_targets(topo1), "broadcast")
    kernel1.run_until(600_000)
    assert t0.status == "complete"
    assert t1.status == "complete"
    assert len(t1.completed) == len(all_targets(topo1))
    assert t1.frames_sent > t0.frames_sent
    assert t1.rounds > t0.rounds


def test_unicast_to_partitioned_node_partial_failure():
    kernel, topo, world, engine = build(loss=0.0)
    victim = parse_urn(urn("l01"))
    world.inject_fault(parse_urn(urn("a4")), "node-death", at=0)  # cuts the chain
    kernel.run_until(1)
    transfer = engine.start(NodeImage("img-echo", "echo", b"\x01" * 128), [victim], "unicast")
    kernel.run_until(10_000)
    assert transfer.status == "partial-failure"
    assert transfer.failed == [victim]
    assert transfer.completed == []


def test_installed_image_swaps_atomically():
    kernel, topo, world, engine = build(loss=0.0)
    target = parse_urn(urn("l05"))
    image = NodeImage("img-blink", "blink", b"\x05" * 4096)  # 64 chunks
    before = world.installed_image(target)
    transfer = engine.start(image, [target], "unicast")
    # partway through dissemination nothing must have changed on the node
    kernel.run_until(2_000)
    assert 0.0 < transfer.progress()[target.render()] < 100.0
    mid = world.installed_image(target)
    assert (mid.image_id, mid.version, mid.behavior_id) == (
        before.image_id,
        before.version,
        before.behavior_id,
    )
    kernel.run_until(60_000)
    assert transfer.status == "complete"
    after = world.installed_image(target)
    assert after.image_id == "img-blink"
    assert after.version == before.version + 1


def test_mobile_target_flashes_over_gprs():
    kernel = Kernel()
    topo = parse_topology(
        "\n".join(
            [
                "world range=150 loss=0 latency=2",
                gateway_line("gw1", 0, 0),
                mobile_line("m1", [(0, 0), (500, 0)], speed=10.0),
            ]
        )
    )
    world = World(kernel, topo, seed=3)
    engine = MotapEngine(kernel, world, TestbedConfig())
    target = parse_urn(urn("m1"))
    transfer = engine.start(NodeImage("img-echo", "echo", b"\x02" * 512), [target], "unicast")
    kernel.run_until(30_000)
    assert transfer.status == "complete"
    assert world.installed_image(target).behavior_id == "echo"


def test_seed_fixed_50_node_mesh_shape():
    topo = load_topology(seed_path("motap50.topo"))
    assert len(topo.nodes) == 50
    assert graph_diameter(topo) == 6
