"""Scenario scripts: timed commands plus inline assertions.

Line grammar (full reference in docs/FORMATS.md):

    topo <bundled-seed-or-path>
    seed <int>
    config key=value ...
    at <time> <command ...>
    end <time>

Times are ``<n><unit>`` runs (ms, s, m, h, d), concatenable ("1h30m"); a bare
integer is milliseconds. Commands: fault, loss, profile, set-battery,
reserve, open, send, reset, flash, ps-register, and ``assert <query> <op>
<value>``. Assertion failures raise ScenarioAssertionFailure (CLI exit 3).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .app import Testbed
from .bus.events import TAG_OUTCOME, TAG_URN
from .config import TestbedConfig
from .directory import Query
from .model import NodeRole, NodeState, parse_urn
from .portal import registration_legs
from .runtime import NodeImage
from .seeds import seed_path
from .service import AsiFilter


class ScenarioError(ValueError):
    pass


class ScenarioAssertionFailure(AssertionError):
    pass


_TIME_RE = re.compile(r"(\d+)(ms|s|m|h|d)")
_UNIT_MS = {"ms": 1, "s": 1_000, "m": 60_000, "h": 3_600_000, "d": 86_400_000}


def parse_time(text: str) -> int:
    if text.isdigit():
        return int(text)
    pos = 0
    total = 0
    for match in _TIME_RE.finditer(text):
        if match.start() != pos:
            raise ScenarioError(f"bad time literal {text!r}")
        total += int(match.group(1)) * _UNIT_MS[match.group(2)]
        pos = match.end()
    if pos != len(text) or pos == 0:
        raise ScenarioError(f"bad time literal {text!r}")
    return total


@dataclass
class Action:
    at: int
    lineno: int
    tokens: list[str]


@dataclass
class Scenario:
    topo: str = ""
    seed: int = 0
    config_overrides: dict = field(default_factory=dict)
    actions: list[Action] = field(default_factory=list)
    end_ms: int = 0


def parse_scenario(text: str) -> Scenario:
    scenario = Scenario()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        try:
            if head == "topo":
                scenario.topo = tokens[1]
            elif head == "seed":
                scenario.seed = int(tokens[1])
            elif head == "config":
                for tok in tokens[1:]:
                    key, value = tok.split("=", 1)
                    scenario.config_overrides[key] = int(value)
            elif head == "at":
                scenario.actions.append(Action(parse_time(tokens[1]), lineno, tokens[2:]))
            elif head == "end":
                scenario.end_ms = parse_time(tokens[1])
            else:
                raise ScenarioError(f"unknown directive {head!r}")
        except (IndexError, ValueError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
    if not scenario.topo:
        raise ScenarioError("scenario needs a topo directive")
    if not scenario.end_ms:
        scenario.end_ms = max((a.at for a in scenario.actions), default=0)
    return scenario


def resolve_topo(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    return seed_path(name)


def _kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ScenarioError(f"expected key=value, got {tok!r}")
        key, value = tok.split("=", 1)
        out[key] = value
    return out


class ScenarioRunner:
    def __init__(self, scenario: Scenario, emit: Optional[Callable[[str], None]] = None):
        self.scenario = scenario
        self.emit = emit or (lambda line: print(line))
        config = TestbedConfig().apply_overrides(scenario.config_overrides)
        self.bed = Testbed(resolve_topo(scenario.topo), config=config, seed=scenario.seed)
        self.keys: dict[str, str] = {}
        self.sessions: dict[str, object] = {}
        self.assertions = 0

    def run(self) -> Testbed:
        bed = self.bed
        bed.start()
        for action in sorted(self.scenario.actions, key=lambda a: (a.at, a.lineno)):
            bed.run_until(action.at)
            self._execute(action)
        bed.run_until(max(self.scenario.end_ms, bed.kernel.now()))
        self.emit(f"scenario done at {bed.kernel.now()} ms, {self.assertions} assertions passed")
        return bed

    # ------------------------------------------------------------- commands

    def _execute(self, action: Action) -> None:
        tokens = action.tokens
        if not tokens:
            return
        head, rest = tokens[0], tokens[1:]
        try:
            if head == "assert":
                self._assert(rest)
            elif head == "fault":
                kv = _kv(rest)
                self.bed.world.inject_fault(
                    parse_urn(kv["urn"]), kv["kind"], p=float(kv.get("p", 1.0))
                )
            elif head == "loss":
                self.bed.world.set_loss(float(_kv(rest)["p"]))
            elif head == "set-battery":
                kv = _kv(rest)
                self.bed.world.set_battery(parse_urn(kv["urn"]), float(kv["pct"]))
            elif head == "profile":
                urn = parse_urn(rest[0].split("=", 1)[1])
                phenomenon = rest[1].split("=", 1)[1]
                points = []
                for tok in rest[2:]:
                    t_text, value = tok.split(":")
                    points.append((parse_time(t_text), float(value)))
                self.bed.world.set_profile(urn, phenomenon, points)
            elif head == "reserve":
                kv = _kv(rest)
                urns = [parse_urn(u) for u in kv["urns"].split(",")]
                reservation, key = self.bed.reservations.reserve(
                    kv.get("user", "alice"),
                    kv.get("token", "wonderland"),
                    urns,
                    parse_time(kv["from"]),
                    parse_time(kv["to"]),
                )
                self.keys[kv["as"]] = key
            elif head == "open":
                name = rest[0]
                self.sessions[name] = self.bed.sessions.open_session(self.keys[name])
            elif head == "send":
                name, kv = rest[0], _kv(rest[1:])
                self.bed.sessions.send(
                    self.sessions[name], parse_urn(kv["urn"]), kv["text"].encode()
                )
            elif head == "reset":
                name, kv = rest[0], _kv(rest[1:])
                self.bed.sessions.reset(self.sessions[name], parse_urn(kv["urn"]))
            elif head == "flash":
                name, kv = rest[0], _kv(rest[1:])
                session = self.sessions[name]
                targets = [parse_urn(u) for u in kv["targets"].split(",")]
                image = NodeImage(
                    kv.get("image-id", "scenario-image"),
                    kv.get("behavior", "echo"),
                    bytes(int(kv.get("size", "1024"))),
                )
                self.bed.sessions.flash(session, targets, image, kv.get("mode", "multicast"))
            else:
                raise ScenarioError(f"unknown command {head!r}")
        except ScenarioAssertionFailure:
            raise
        except Exception as exc:
            raise ScenarioError(f"line {action.lineno}: {head}: {exc}") from exc

    # ------------------------------------------------------------ assertions

    def _assert(self, tokens: list[str]) -> None:
        if len(tokens) < 3:
            raise ScenarioError("assert needs <query...> <op> <value>")
        op, expected_text = tokens[-2], tokens[-1]
        actual = self.eval_query(tokens[:-2])
        expected: object = expected_text
        if isinstance(actual, bool):
            expected = expected_text == "true"
        elif isinstance(actual, (int, float)):
            expected = float(expected_text)
            actual = float(actual)
        ok = {
            "==": lambda a, b: a == b,
            "!=": lambda a, b: a != b,
            "<": lambda a, b: a < b,
            "<=": lambda a, b: a <= b,
            ">": lambda a, b: a > b,
            ">=": lambda a, b: a >= b,
        }.get(op)
        if ok is None:
            raise ScenarioError(f"unknown operator {op!r}")
        if not ok(actual, expected):
            raise ScenarioAssertionFailure(
                f"at {self.bed.kernel.now()} ms: {' '.join(tokens[:-2])} -> {actual!r}, "
                f"wanted {op} {expected_text}"
            )
        self.assertions += 1
        self.emit(f"assert ok: {' '.join(tokens)}")

    def eval_query(self, tokens: list[str]):
        head, params = tokens[0], _kv(tokens[1:])
        bed = self.bed
        if head == "rd.count":
            return len(bed.rd.lookup(Query.from_params(params)))
        if head == "rd.state":
            return bed.rd.get(parse_urn(params["urn"])).state.value
        if head == "rd.duplicates":
            docs = bed.rd.all_docs()
            return len(docs) - len({d.urn for d in docs})
        if head == "runtime.available.count":
            return len(bed.availability.available)
        if head == "runtime.available.contains":
            return parse_urn(params["urn"]) in bed.availability.available
        if head == "bus.count":
            count = 0
            for _seq, topic, _offset, ev in bed.broker.audit_log():
                if "topic" in params and str(topic) != params["topic"]:
                    continue
                if "type" in params and ev.event_type != params["type"]:
                    continue
                if "urn" in params and str(ev.get(TAG_URN)) != params["urn"]:
                    continue
                count += 1
            return count
        if head == "bus.reg_order_ok":
            only = parse_urn(params["urn"]) if "urn" in params else None
            return self.registration_order_ok(only)
        if head in ("asi.count", "asi.min", "asi.max", "asi.mean"):
            flt = AsiFilter.from_params(
                {k: v for k, v in params.items() if k in ("phenomenon", "urn")}
            )
            t0 = parse_time(params["from"]) if "from" in params else None
            t1 = parse_time(params["to"]) if "to" in params else None
            series = bed.service.query(flt, t0, t1)
            if head == "asi.count":
                return len(series)
            values = [o.value for o in series]
            if not values:
                raise ScenarioError("empty series for aggregate query")
            if head == "asi.min":
                return min(values)
            if head == "asi.max":
                return max(values)
            return sum(values) / len(values)
        if head == "sim.alive":
            return bed.world.is_alive(parse_urn(params["urn"]))
        if head == "session.trace.count":
            session = self.sessions[params["session"]]
            kind = params.get("kind")
            return sum(1 for r in session.trace if kind is None or r["kind"] == kind)
        raise ScenarioError(f"unknown query {head!r}")

    def registration_order_ok(self, only=None) -> bool:
        """Check the registration event order for one or all resources."""
        bed = self.bed
        docs = bed.rd.all_docs()
        if only is not None:
            docs = [d for d in docs if d.urn == only]
        relevant = {
            "NODE_REG_REQUEST", "GW_REG_REQUEST", "PS_REG_REQUEST",
            "NODE_REG_REPLY", "GW_REG_REPLY", "PS_REG_REPLY",
            "ADD_SENSOR_REQ", "ADD_SENSOR_REP", "ADD_SERVICE_REQ", "ADD_SERVICE_REP",
            "ADD_GW_REQ", "ADD_GW_REP", "ADD_PS_REQ", "ADD_PS_REP",
        }
        by_urn: dict[str, list] = {}
        for _seq, _topic, _offset, ev in bed.broker.audit_log():
            if ev.event_type not in relevant:
                continue
            urn = str(ev.get(TAG_URN) or "")
            if urn:
                by_urn.setdefault(urn, []).append(ev)
        for doc in docs:
            if doc.role is NodeRole.PARTICIPATORY:
                request, reply = "PS_REG_REQUEST", "PS_REG_REPLY"
            elif doc.hw_meta.get("kind") == "gateway":
                request, reply = "GW_REG_REQUEST", "GW_REG_REPLY"
            else:
                request, reply = "NODE_REG_REQUEST", "NODE_REG_REPLY"
            expected = [request]
            for leg in registration_legs(doc):
                prefix = {"sensor": "ADD_SENSOR", "service": "ADD_SERVICE",
                          "gw": "ADD_GW", "ps": "ADD_PS"}[leg]
                expected += [f"{prefix}_REQ", f"{prefix}_REP"]
            expected.append(reply)
            events = by_urn.get(doc.urn.render(), [])
            trimmed: list[str] = []
            for ev in events:
                trimmed.append(ev.event_type)
                if ev.event_type == reply and bool(ev.get(TAG_OUTCOME)):
                    break
            if trimmed != expected:
                self.emit(f"order mismatch for {doc.urn}: {trimmed} != {expected}")
                return False
        return True


def run_file(path: Path, emit: Optional[Callable[[str], None]] = None) -> Testbed:
    scenario = parse_scenario(path.read_text(encoding="utf-8"))
    return ScenarioRunner(scenario, emit=emit).run()
