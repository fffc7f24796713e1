"""Multihop over-the-air reprogramming.

The dissemination protocol (this testbed's own design, documented in
docs/PROTOCOLS.md): the image is split into fixed-size chunks; per target
cluster a BFS spanning tree is built over the surviving management mesh; each
slot, every tree node holding data broadcasts the lowest-indexed chunk still
missing at one of its children. Per-hop acks (modeled reliable, data frames
lossy) keep the parent's view of child bitmaps, so retransmission is
lowest-missing-first. A child that misses the same chunk more than the retry
budget is declared failed along with its subtree. Vehicle targets are flashed
chunk-by-chunk over their GPRS uplink.

A node installs — version bump, reboot into the new behavior — only when its
bitmap is complete and the image checksum verifies; there is no partially
written image state.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..config import TestbedConfig
from ..kernel import Kernel
from ..model import Urn
from ..sim.behaviors import BEHAVIORS
from ..sim.world import World


class MotapError(Exception):
    pass


class ImageTooLarge(MotapError):
    pass


@dataclass(frozen=True)
class NodeImage:
    image_id: str
    behavior_id: str
    data: bytes

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass
class _TreeNode:
    urn: Urn
    parent: Optional[Urn]
    children: list[Urn] = field(default_factory=list)
    received: set[int] = field(default_factory=set)
    is_target: bool = False
    installed: bool = False
    failed: bool = False


StatusHook = Callable[[dict], None]


class MotapTransfer:
    def __init__(
        self,
        transfer_id: str,
        image: NodeImage,
        mode: str,
        targets: list[Urn],
        chunk_count: int,
    ):
        self.transfer_id = transfer_id
        self.image = image
        self.mode = mode
        self.targets = list(targets)
        self.chunk_count = chunk_count
        self.completed: list[Urn] = []
        self.failed: list[Urn] = []
        self.rounds = 0
        self.frames_sent = 0
        self.done = False
        self.versions: dict[Urn, int] = {}

    @property
    def status(self) -> str:
        if not self.done:
            return "running"
        return "complete" if not self.failed else "partial-failure"

    def progress(self) -> dict[str, float]:
        return dict(self._progress)

    _progress: dict[str, float] = {}

    def to_doc(self) -> dict:
        return {
            "id": self.transfer_id,
            "mode": self.mode,
            "status": self.status,
            "chunks": self.chunk_count,
            "rounds": self.rounds,
            "frames": self.frames_sent,
            "targets": [u.render() for u in self.targets],
            "completed": [u.render() for u in self.completed],
            "failed": [u.render() for u in self.failed],
            "progress": self.progress(),
            "versions": {u.render(): v for u, v in self.versions.items()},
        }


class MotapEngine:
    def __init__(self, kernel: Kernel, world: World, config: TestbedConfig):
        self.kernel = kernel
        self.world = world
        self.config = config
        self._ids = itertools.count(1)
        if config.motap_slot_ms < world.params.hop_latency_ms:
            raise MotapError("slot must cover one hop latency")

    def validate_image(self, image: NodeImage) -> None:
        if image.size <= 0:
            raise MotapError("empty image")
        if image.size > self.config.max_image_bytes:
            raise ImageTooLarge(f"{image.size} bytes > {self.config.max_image_bytes}")
        if image.behavior_id not in BEHAVIORS:
            raise MotapError(f"unknown behavior {image.behavior_id!r}")

    def start(
        self,
        image: NodeImage,
        targets: list[Urn],
        mode: str,
        on_status: Optional[StatusHook] = None,
        on_done: Optional[Callable[[MotapTransfer], None]] = None,
    ) -> MotapTransfer:
        self.validate_image(image)
        chunk_count = math.ceil(image.size / self.config.motap_chunk_bytes)
        transfer = MotapTransfer(
            f"motap-{next(self._ids):04d}", image, mode, targets, chunk_count
        )
        transfer._progress = {u.render(): 0.0 for u in targets}
        run = _TransferRun(self, transfer, on_status, on_done)
        run.begin()
        return transfer


class _TransferRun:
    def __init__(
        self,
        engine: MotapEngine,
        transfer: MotapTransfer,
        on_status: Optional[StatusHook],
        on_done: Optional[Callable[[MotapTransfer], None]],
    ):
        self.engine = engine
        self.world = engine.world
        self.config = engine.config
        self.transfer = transfer
        self.on_status = on_status
        self.on_done = on_done
        self.trees: dict[Urn, dict[Urn, _TreeNode]] = {}
        self.mobile_targets: list[Urn] = []
        self.mobile_state: dict[Urn, set[int]] = {}
        self.attempts: dict[tuple[Urn, Urn, int], int] = {}
        self.chunks = list(_chunks(transfer.image.data, self.config.motap_chunk_bytes))
        self._timer = None

    # ---------------------------------------------------------------- setup

    def begin(self) -> None:
        targets_by_cluster: dict[Urn, list[Urn]] = {}
        for urn in self.transfer.targets:
            spec = self.world.node_rt(urn).spec
            if spec.mobile:
                self.mobile_targets.append(urn)
                self.mobile_state[urn] = set()
            else:
                if spec.cluster is None:
                    self._fail_target(urn)
                    continue
                targets_by_cluster.setdefault(spec.cluster, []).append(urn)
        for gw, cluster_targets in targets_by_cluster.items():
            tree = self._build_tree(gw, cluster_targets)
            if tree:
                self.trees[gw] = tree
            else:
                for urn in cluster_targets:
                    self._fail_target(urn)
        self._timer = self.engine.kernel.every(self.config.motap_slot_ms, self._slot)

    def _build_tree(self, gw: Urn, targets: list[Urn]) -> dict[Urn, _TreeNode]:
        parents = self.world.mesh_tree(gw)
        target_set = set(targets)
        needed: set[Urn] = {gw}
        reachable_targets = []
        for urn in targets:
            if urn not in parents:
                self._fail_target(urn)  # partitioned from its cluster head
                continue
            reachable_targets.append(urn)
            cur = urn
            while cur != gw:
                needed.add(cur)
                cur = parents[cur]
        if not reachable_targets:
            return {}
        if self.transfer.mode == "broadcast":
            # flood the whole surviving cluster; every member relays
            needed |= set(parents.keys()) | {gw}
        tree: dict[Urn, _TreeNode] = {}
        for urn in sorted(needed, key=lambda u: u.render()):
            parent = parents.get(urn) if urn != gw else None
            tree[urn] = _TreeNode(urn, parent, is_target=urn in target_set)
        for urn, node in tree.items():
            if node.parent is not None and node.parent in tree:
                tree[node.parent].children.append(urn)
        for node in tree.values():
            node.children.sort(key=lambda u: u.render())
            if node.parent is None:  # the gateway root already has the image
                node.received = set(range(self.transfer.chunk_count))
        return tree

    # ---------------------------------------------------------------- slots

    def _slot(self) -> None:
        if self.transfer.done:
            return
        self.transfer.rounds += 1
        progressed = False
        for gw, tree in self.trees.items():
            for node in tree.values():
                if node.failed:
                    continue
                chunk = self._chunk_to_send(tree, node)
                if chunk is None:
                    continue
                children = [
                    c
                    for c in node.children
                    if not tree[c].failed and chunk not in tree[c].received
                ]
                if not children:
                    continue
                progressed = True
                self._account_attempts(tree, node.urn, children, chunk)
                sent = self.world.motap_broadcast(
                    node.urn,
                    children,
                    (self.transfer.transfer_id, chunk),
                    lambda child, payload, gw=gw: self._on_chunk(gw, child, payload[1]),
                )
                self.transfer.frames_sent += 1 if sent or children else 0
        for urn in self.mobile_targets:
            if urn in self.mobile_state:
                chunk = self._next_missing(self.mobile_state[urn])
                if chunk is None:
                    continue
                progressed = True
                key = (urn, urn, chunk)
                self.attempts[key] = self.attempts.get(key, 0) + 1
                if self.attempts[key] > self.config.motap_retry_budget:
                    self._fail_target(urn)
                    self.mobile_state.pop(urn, None)
                    continue
                self.transfer.frames_sent += 1
                self.world.gprs_chunk(
                    urn,
                    (self.transfer.transfer_id, chunk),
                    lambda child, payload: self._on_mobile_chunk(child, payload[1]),
                )
        if not progressed:
            self._maybe_finish()

    def _chunk_to_send(self, tree: dict[Urn, _TreeNode], node: _TreeNode) -> Optional[int]:
        wanted = [
            chunk
            for child in node.children
            if not tree[child].failed
            for chunk in (self._next_missing(tree[child].received, node.received),)
            if chunk is not None
        ]
        return min(wanted) if wanted else None

    def _next_missing(self, received: set[int], available: Optional[set[int]] = None) -> Optional[int]:
        for chunk in range(self.transfer.chunk_count):
            if chunk in received:
                continue
            if available is None or chunk in available:
                return chunk
        return None

    def _account_attempts(
        self, tree: dict[Urn, _TreeNode], parent: Urn, children: list[Urn], chunk: int
    ) -> None:
        for child in children:
            key = (parent, child, chunk)
            self.attempts[key] = self.attempts.get(key, 0) + 1
            if self.attempts[key] > self.config.motap_retry_budget:
                self._fail_subtree(tree, child)

    def _fail_subtree(self, tree: dict[Urn, _TreeNode], urn: Urn) -> None:
        node = tree.get(urn)
        if node is None or node.failed:
            return
        node.failed = True
        if node.is_target and not node.installed:
            self._fail_target(urn)
        for child in node.children:
            self._fail_subtree(tree, child)

    # -------------------------------------------------------------- receive

    def _on_chunk(self, gw: Urn, child: Urn, chunk: int) -> None:
        tree = self.trees.get(gw)
        if tree is None or self.transfer.done:
            return
        node = tree.get(child)
        if node is None or node.failed:
            return
        node.received.add(chunk)
        if node.is_target and not node.installed:
            self._update_progress(child, len(node.received))
            if len(node.received) == self.transfer.chunk_count:
                node.installed = True
                self._install(child)
        self._maybe_finish()

    def _on_mobile_chunk(self, urn: Urn, chunk: int) -> None:
        state = self.mobile_state.get(urn)
        if state is None or self.transfer.done:
            return
        state.add(chunk)
        self._update_progress(urn, len(state))
        if len(state) == self.transfer.chunk_count:
            self.mobile_state.pop(urn, None)
            self._install(urn)
        self._maybe_finish()

    def _install(self, urn: Urn) -> None:
        # checksum over the reassembled chunks must match before the swap
        assembled = b"".join(self.chunks)
        if hashlib.sha256(assembled).hexdigest() != self.transfer.image.checksum:
            self._fail_target(urn)
            return
        version = self.world.install_image(
            urn, self.transfer.image.image_id, self.transfer.image.behavior_id
        )
        self.transfer.completed.append(urn)
        self.transfer.versions[urn] = version
        self._status(
            {"kind": "flash-progress", "transfer": self.transfer.transfer_id,
             "urn": urn.render(), "progress": 100.0, "version": version}
        )

    def _update_progress(self, urn: Urn, received: int) -> None:
        pct = round(100.0 * received / self.transfer.chunk_count, 1)
        previous = self.transfer._progress.get(urn.render(), 0.0)
        self.transfer._progress[urn.render()] = pct
        if pct >= 100.0 or pct - previous >= 10.0:
            self._status(
                {"kind": "flash-progress", "transfer": self.transfer.transfer_id,
                 "urn": urn.render(), "progress": pct}
            )

    def _fail_target(self, urn: Urn) -> None:
        if urn not in self.transfer.failed:
            self.transfer.failed.append(urn)
            self._status(
                {"kind": "flash-failed", "transfer": self.transfer.transfer_id,
                 "urn": urn.render()}
            )

    # ---------------------------------------------------------------- finish

    def _maybe_finish(self) -> None:
        if self.transfer.done:
            return
        outstanding = len(self.transfer.targets) - len(self.transfer.completed) - len(
            self.transfer.failed
        )
        if outstanding > 0:
            return
        self.transfer.done = True
        if self._timer is not None:
            self._timer.cancel()
        self._status(
            {
                "kind": "flash-done",
                "transfer": self.transfer.transfer_id,
                "status": self.transfer.status,
                "completed": [u.render() for u in self.transfer.completed],
                "failed": [u.render() for u in self.transfer.failed],
                "rounds": self.transfer.rounds,
            }
        )
        if self.on_done is not None:
            self.on_done(self.transfer)

    def _status(self, record: dict) -> None:
        if self.on_status is not None:
            self.on_status(record)


def _chunks(data: bytes, size: int):
    for start in range(0, len(data), size):
        yield data[start : start + size]
