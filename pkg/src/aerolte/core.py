"""Per-UAV collapsed EPC agents and the message network between them.

Each agent is an isolated state machine: a session table, a replica of
the UE location register (HSS) merged last-writer-wins on (version,
agent id), and flow tables compiled from its active sessions.  Agents
interact only through `CoreMessage`s carried by `CoreNetwork`, which can
run in time order, hand its schedule to an outer event loop, or be driven
message by message for model checking.
"""
from __future__ import annotations

import copy
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

MESSAGE_KINDS = (
    "ue_detected_broadcast",
    "handoff_request",
    "handoff_ack",
    "state_transfer",
    "tracking_area_update",
    "page_request",
    "data_packet",
)
DROP_REASONS = ("unknown_ue", "no_route", "link_down")
COUNTER_KEYS = ("attach", "duplicate_attach", "tau", "handoff_started", "handoff_aborted", "handoff_completed",
                "packets_sent", "packets_delivered", "pages", "messages_lost") + \
    tuple(f"packets_dropped_{r}" for r in DROP_REASONS)
ACTION_ORDER = ("decapsulate", "charge", "encapsulate", "forward")

HANDOFF_TIMEOUT_MS = 5000
HOP_LATENCY_MS = 5
PACKET_TTL = 16
HSS_REFRESHES = 2


@dataclass(frozen=True)
class SessionContext:
    """Precomputed per-UE attributes kept in memory (opaque tags, no crypto)."""

    security_key_tag: str
    qos_profile_tag: str = "qci9"


@dataclass
class UeSession:
    ue_id: int
    state: str  # idle | active
    anchor_agent: int
    bearer_id: int
    context: SessionContext


@dataclass(frozen=True)
class FlowRule:
    ue_id: int
    direction: str  # uplink | downlink
    actions: tuple[str, ...]


FlowTable = tuple[FlowRule, ...]


def compile_flow_table(sessions: Mapping[int, UeSession], agent_id: int) -> FlowTable:
    """One uplink and one downlink rule per active session anchored here, by ue id."""
    rules = []
    for ue in sorted(sessions):
        s = sessions[ue]
        if s.state != "active" or s.anchor_agent != agent_id:
            continue
        rules.append(FlowRule(ue, "uplink", ACTION_ORDER[:3] + ("forward:core",)))
        rules.append(FlowRule(ue, "downlink", ACTION_ORDER[:3] + ("forward:ran",)))
    return tuple(rules)


@dataclass
class Packet:
    packet_id: int
    dst_ue: int
    size_bytes: int
    src_ue: int | None = None
    ttl: int = PACKET_TTL


@dataclass
class CoreMessage:
    msg_id: int
    kind: str
    src: int
    dst: int
    ue: int
    payload: dict
    sent_ms: int
    deliver_ms: int


@dataclass
class Timer:
    timer_id: int
    due_ms: int
    agent: int
    kind: str  # handoff_request_timeout | handoff_ack_timeout | hss_refresh
    ue: int
    token: tuple = ()


@dataclass
class EpcAgent:
    agent_id: int
    sessions: dict[int, UeSession] = field(default_factory=dict)
    hss: dict[int, tuple[int, int]] = field(default_factory=dict)  # ue -> (anchor, version)
    transferring: dict[int, int] = field(default_factory=dict)  # ue -> handoff destination
    awaiting: dict[int, int] = field(default_factory=dict)  # ue -> handoff source
    buffers: dict[int, list[Packet]] = field(default_factory=dict)
    next_bearer: int = 1
    charged_bytes: int = 0

    def flow_table(self) -> FlowTable:
        return compile_flow_table(self.sessions, self.agent_id)

    def locate(self, ue: int) -> int | None:
        entry = self.hss.get(ue)
        return None if entry is None else entry[0]

    def version(self, ue: int) -> int:
        return self.hss.get(ue, (0, 0))[1]

    def new_bearer(self) -> int:
        b = self.next_bearer
        self.next_bearer += 1
        return b

    def state_key(self) -> tuple:
        return (
            self.agent_id,
            tuple(sorted((u, s.state, s.anchor_agent, s.bearer_id, s.context) for u, s in self.sessions.items())),
            tuple(sorted(self.hss.items())),
            tuple(sorted(self.transferring.items())),
            tuple(sorted(self.awaiting.items())),
            tuple(sorted((u, tuple((p.dst_ue, p.src_ue, p.size_bytes, p.ttl) for p in b))
                         for u, b in self.buffers.items() if b)),
            self.next_bearer,
        )


def _newer(a: tuple[int, int], b: tuple[int, int] | None) -> bool:
    """Last-writer-wins order on (anchor, version): higher version, then higher agent id."""
    if b is None:
        return True
    return (a[1], a[0]) > (b[1], b[0])


class CoreNetwork:
    """EPC agents plus in-flight messages, timers, counters and the trace."""

    def __init__(self, agent_ids: Iterable[int], hops: Callable[[int, int], int | None] | None = None,
                 hop_latency_ms: int = HOP_LATENCY_MS, handoff_timeout_ms: int = HANDOFF_TIMEOUT_MS,
                 hss_refreshes: int = HSS_REFRESHES, record_trace: bool = True):
        self.agents = {a: EpcAgent(a) for a in sorted(agent_ids)}
        self.hops = hops or (lambda a, b: 0 if a == b else 1)
        self.hop_latency_ms = hop_latency_ms
        self.handoff_timeout_ms = handoff_timeout_ms
        self.hss_refreshes = hss_refreshes
        self.record_trace = record_trace
        self.now_ms = 0
        self.pending: dict[int, CoreMessage] = {}
        self.timers: dict[int, Timer] = {}
        self.stats: Counter = Counter()
        self.trace: list[dict] = []
        self.on_schedule: Callable[[int, str, int], None] | None = None
        self.handoff_outcome: dict[int, str] = {}
        self._ids = Counter()

    # -- plumbing -------------------------------------------------------------

    def _next(self, what: str) -> int:
        self._ids[what] += 1
        return self._ids[what]

    def _log(self, **rec) -> None:
        if self.record_trace:
            rec.setdefault("t_ms", self.now_ms)
            self.trace.append(rec)

    def _send(self, kind: str, src: int, dst: int, ue: int, payload: dict) -> CoreMessage | None:
        mid = self._next("msg")
        hops = self.hops(src, dst) if dst in self.agents else None
        if hops is None:
            self._log(msg=mid, kind=kind, src=src, dst=dst, ue=ue, status="undeliverable")
            return None
        msg = CoreMessage(mid, kind, src, dst, ue, payload, self.now_ms, self.now_ms + hops * self.hop_latency_ms)
        self.pending[mid] = msg
        self._log(msg=mid, kind=kind, src=src, dst=dst, ue=ue, status="sent", hops=hops,
                  **({"packet": payload["packet"].packet_id} if kind == "data_packet" else {}))
        if self.on_schedule:
            self.on_schedule(msg.deliver_ms, "core_message_delivery", mid)
        return msg

    def _set_timer(self, agent: int, kind: str, ue: int, delay_ms: int, token: tuple = ()) -> None:
        t = Timer(self._next("timer"), self.now_ms + delay_ms, agent, kind, ue, token)
        self.timers[t.timer_id] = t
        if self.on_schedule:
            self.on_schedule(t.due_ms, "core_timer", t.timer_id)

    def _cancel_timers(self, agent: int, kind: str, ue: int) -> None:
        for tid in [t.timer_id for t in self.timers.values() if (t.agent, t.kind, t.ue) == (agent, kind, ue)]:
            del self.timers[tid]

    def _broadcast(self, origin: int, kind: str, ue: int, anchor: int, version: int) -> None:
        for other in self.agents:
            if other != origin:
                self._send(kind, origin, other, ue, {"anchor": anchor, "version": version})

    def _announce(self, agent: EpcAgent, ue: int, kind: str = "ue_detected_broadcast") -> None:
        anchor, version = agent.hss[ue]
        self._broadcast(agent.agent_id, kind, ue, anchor, version)
        if self.hss_refreshes > 0:
            self._set_timer(agent.agent_id, "hss_refresh", ue, self.handoff_timeout_ms,
                            (kind, version, self.hss_refreshes))

    def _merge(self, agent: EpcAgent, ue: int, anchor: int, version: int) -> bool:
        if not _newer((anchor, version), agent.hss.get(ue)):
            return False
        agent.hss[ue] = (anchor, version)
        if anchor != agent.agent_id:
            agent.sessions.pop(ue, None)
            if ue in agent.transferring:
                del agent.transferring[ue]
                self._cancel_timers(agent.agent_id, "handoff_ack_timeout", ue)
            self._flush(agent, ue)
        return True

    def _flush(self, agent: EpcAgent, ue: int) -> None:
        for pkt in agent.buffers.pop(ue, []):
            self._handle_packet(agent, pkt, forwarded=False)

    # -- operations -------------------------------------------------------------

    def attach(self, agent_id: int, ue: int) -> UeSession:
        a = self.agents[agent_id]
        s = a.sessions.get(ue)
        if s is not None and s.state == "active" and s.anchor_agent == agent_id:
            self.stats["duplicate_attach"] += 1
            return s
        context = s.context if s else SessionContext(f"k{ue:06d}")
        a.sessions[ue] = UeSession(ue, "active", agent_id, a.new_bearer(), context)
        a.hss[ue] = (agent_id, a.version(ue) + 1)
        self.stats["attach"] += 1
        self._log(kind="attach", src=agent_id, dst=agent_id, ue=ue, status="local", version=a.hss[ue][1])
        self._announce(a, ue)
        return a.sessions[ue]

    def tracking_area_update(self, agent_id: int, ue: int) -> None:
        a = self.agents[agent_id]
        s = a.sessions.get(ue)
        if s is not None and s.state == "active":
            raise ValueError(f"UE {ue} is active at agent {agent_id}; TAU is for idle UEs")
        context = s.context if s else SessionContext(f"k{ue:06d}")
        bearer = s.bearer_id if s else a.new_bearer()
        a.sessions[ue] = UeSession(ue, "idle", agent_id, bearer, context)
        a.hss[ue] = (agent_id, a.version(ue) + 1)
        self.stats["tau"] += 1
        self._log(kind="tau", src=agent_id, dst=agent_id, ue=ue, status="local", version=a.hss[ue][1])
        self._announce(a, ue, "tracking_area_update")

    def set_idle(self, agent_id: int, ue: int) -> None:
        s = self.agents[agent_id].sessions.get(ue)
        if s is None:
            raise KeyError(f"no session for UE {ue} at agent {agent_id}")
        s.state = "idle"

    def locate_ue(self, agent_id: int, ue: int) -> int | None:
        """Anchor according to this agent's replica; None when the UE is unknown."""
        return self.agents[agent_id].locate(ue)

    def handoff(self, src: int, dst: int, ue: int) -> int | None:
        """Start moving an active UE from ``src`` to ``dst``; returns a handoff id or None if aborted."""
        a = self.agents[src]
        s = a.sessions.get(ue)
        if s is None or s.state != "active" or a.locate(ue) != src:
            raise ValueError(f"UE {ue} is not anchored active at agent {src}")
        hid = self._next("handoff")
        self.stats["handoff_started"] += 1
        if dst not in self.agents or self.hops(dst, src) is None or ue in a.transferring:
            self.stats["handoff_aborted"] += 1
            self.handoff_outcome[hid] = "aborted"
            self._log(kind="handoff", src=src, dst=dst, ue=ue, status="aborted", handoff=hid)
            return None
        b = self.agents[dst]
        b.awaiting[ue] = src
        self._set_timer(dst, "handoff_request_timeout", ue, self.handoff_timeout_ms, (hid,))
        self._send("handoff_request", dst, src, ue, {"handoff": hid})
        return hid

    def migrate_all(self, src: int, dst: int) -> int:
        """Bulk state transfer of every session at ``src`` to ``dst`` (UAV replacement)."""
        a = self.agents[src]
        moved = 0
        for ue in sorted(a.sessions):
            if ue in a.transferring:
                continue
            hid = self._next("handoff")
            self.stats["handoff_started"] += 1
            self._start_transfer(a, dst, ue, hid, bulk=True)
            moved += 1
        return moved

    def _start_transfer(self, a: EpcAgent, dst: int, ue: int, hid: int, bulk: bool = False) -> None:
        s = a.sessions[ue]
        a.transferring[ue] = dst
        self._set_timer(a.agent_id, "handoff_ack_timeout", ue, self.handoff_timeout_ms, (hid,))
        self._send("state_transfer", a.agent_id, dst, ue,
                   {"handoff": hid, "bulk": bulk, "session": asdict(s), "version": a.version(ue)})

    def send_packet(self, agent_id: int, dst_ue: int, size_bytes: int = 1500, src_ue: int | None = None) -> int:
        """Inject a data packet at an agent (from a local UE if ``src_ue`` is given)."""
        a = self.agents[agent_id]
        pkt = Packet(self._next("packet"), dst_ue, size_bytes, src_ue)
        self.stats["packets_sent"] += 1
        self._log(kind="packet", packet=pkt.packet_id, src=agent_id, dst=agent_id, ue=dst_ue, status="sent")
        if src_ue is not None and any(r.ue_id == src_ue and r.direction == "uplink" for r in a.flow_table()):
            a.charged_bytes += size_bytes
        self._handle_packet(a, pkt, forwarded=False)
        return pkt.packet_id

    def _finish_packet(self, agent: EpcAgent, pkt: Packet, reason: str | None) -> None:
        if reason is None:
            self.stats["packets_delivered"] += 1
            status = "delivered"
        else:
            self.stats[f"packets_dropped_{reason}"] += 1
            status = "dropped"
        self._log(kind="packet", packet=pkt.packet_id, src=agent.agent_id, dst=agent.agent_id, ue=pkt.dst_ue,
                  status=status, **({"reason": reason} if reason else {}))

    def _handle_packet(self, agent: EpcAgent, pkt: Packet, forwarded: bool) -> None:
        ue = pkt.dst_ue
        if ue in agent.transferring:
            agent.buffers.setdefault(ue, []).append(pkt)
            return
        s = agent.sessions.get(ue)
        if s is not None and agent.locate(ue) == agent.agent_id:
            if s.state == "idle":
                # tracking area is this one UAV: page locally, then the UE activates
                self.stats["pages"] += 1
                self._log(kind="page_request", src=agent.agent_id, dst=agent.agent_id, ue=ue, status="local")
                s.state = "active"
            agent.charged_bytes += pkt.size_bytes  # downlink rule: decapsulate, charge, encapsulate, forward
            self._finish_packet(agent, pkt, None)
            return
        anchor = agent.locate(ue)
        if anchor is None or anchor == agent.agent_id:
            self._finish_packet(agent, pkt, "unknown_ue")
            return
        if forwarded:
            pkt.ttl -= 1
            if pkt.ttl <= 0:
                self._finish_packet(agent, pkt, "no_route")
                return
        if self.hops(agent.agent_id, anchor) is None:
            self._finish_packet(agent, pkt, "no_route")
            return
        self._send("data_packet", agent.agent_id, anchor, ue, {"packet": pkt})

    # -- execution -----------------------------------------------------------------

    def deliver(self, msg_id: int) -> None:
        msg = self.pending.pop(msg_id)
        self.now_ms = max(self.now_ms, msg.deliver_ms)
        if msg.dst not in self.agents or self.hops(msg.src, msg.dst) is None:
            self._lost(msg)
            return
        self._log(msg=msg.msg_id, kind=msg.kind, src=msg.src, dst=msg.dst, ue=msg.ue, status="delivered")
        getattr(self, f"_on_{msg.kind}")(self.agents[msg.dst], msg)

    def lose(self, msg_id: int) -> None:
        """Drop an in-flight message (fault injection)."""
        self._lost(self.pending.pop(msg_id))

    def _lost(self, msg: CoreMessage) -> None:
        self._log(msg=msg.msg_id, kind=msg.kind, src=msg.src, dst=msg.dst, ue=msg.ue, status="lost")
        self.stats["messages_lost"] += 1
        if msg.kind == "data_packet":
            src = self.agents.get(msg.src) or EpcAgent(msg.src)
            self._finish_packet(src, msg.payload["packet"], "link_down")

    def fire(self, timer_id: int) -> None:
        t = self.timers.pop(timer_id)
        self.now_ms = max(self.now_ms, t.due_ms)
        if t.agent not in self.agents:
            return
        a = self.agents[t.agent]
        if t.kind == "handoff_ack_timeout" and t.ue in a.transferring:
            # no ack: roll back, unless the register already moved on
            del a.transferring[t.ue]
            self._log(kind="handoff", src=t.agent, dst=t.agent, ue=t.ue, status="rolled_back", handoff=t.token[0])
            self.handoff_outcome.setdefault(t.token[0], "aborted")
            self._flush(a, t.ue)
        elif t.kind == "handoff_request_timeout" and t.ue in a.awaiting:
            del a.awaiting[t.ue]
            self._log(kind="handoff", src=t.agent, dst=t.agent, ue=t.ue, status="request_timeout", handoff=t.token[0])
            self.handoff_outcome.setdefault(t.token[0], "aborted")
        elif t.kind == "hss_refresh":
            kind, version, left = t.token
            if a.hss.get(t.ue) == (a.agent_id, version):
                self._broadcast(a.agent_id, kind, t.ue, a.agent_id, version)
                if left > 1:
                    self._set_timer(a.agent_id, "hss_refresh", t.ue, self.handoff_timeout_ms, (kind, version, left - 1))

    def next_action(self) -> tuple[int, str, int] | None:
        """Earliest pending (time, 'msg'|'timer', id), messages before timers at equal times."""
        cands = [(m.deliver_ms, 0, m.msg_id) for m in self.pending.values()]
        cands += [(t.due_ms, 1, t.timer_id) for t in self.timers.values()]
        if not cands:
            return None
        when, typ, ident = min(cands)
        return when, ("msg", "timer")[typ], ident

    def step(self) -> bool:
        nxt = self.next_action()
        if nxt is None:
            return False
        _, typ, ident = nxt
        self.deliver(ident) if typ == "msg" else self.fire(ident)
        return True

    def run_until_quiescent(self, max_steps: int = 1_000_000) -> None:
        for _ in range(max_steps):
            if not self.step():
                return
        raise RuntimeError("core network did not quiesce")

    def run_until(self, t_ms: int) -> None:
        while True:
            nxt = self.next_action()
            if nxt is None or nxt[0] > t_ms:
                break
            self.step()
        self.now_ms = max(self.now_ms, t_ms)

    @property
    def quiescent(self) -> bool:
        return not self.pending and not self.timers

    def remove_agent(self, agent_id: int) -> None:
        """Agent goes away with its UAV; buffered packets are dropped."""
        a = self.agents.pop(agent_id)
        for ue in sorted(a.buffers):
            for pkt in a.buffers[ue]:
                self._finish_packet(a, pkt, "link_down")
        for tid in [t.timer_id for t in self.timers.values() if t.agent == agent_id]:
            del self.timers[tid]
        self._log(kind="agent_down", src=agent_id, dst=agent_id, ue=-1, status="local")

    def add_agent(self, agent_id: int, resync: bool = True) -> None:
        """(Re)join an agent with an empty register; peers re-announce the UEs they anchor to it."""
        if agent_id in self.agents:
            return
        self.agents[agent_id] = EpcAgent(agent_id)
        self.agents = dict(sorted(self.agents.items()))
        self._log(kind="agent_up", src=agent_id, dst=agent_id, ue=-1, status="local")
        if resync:
            for other in self.agents.values():
                for ue, (anchor, version) in sorted(other.hss.items()):
                    if anchor == other.agent_id:
                        self._send("ue_detected_broadcast", other.agent_id, agent_id, ue,
                                   {"anchor": anchor, "version": version})

    # -- message handlers --------------------------------------------------------------

    def _on_ue_detected_broadcast(self, agent: EpcAgent, msg: CoreMessage) -> None:
        self._merge(agent, msg.ue, msg.payload["anchor"], msg.payload["version"])

    _on_tracking_area_update = _on_ue_detected_broadcast

    def _on_handoff_request(self, agent: EpcAgent, msg: CoreMessage) -> None:
        s = agent.sessions.get(msg.ue)
        if s is None or s.state != "active" or msg.ue in agent.transferring or agent.locate(msg.ue) != agent.agent_id:
            return  # requester times out
        self._start_transfer(agent, msg.src, msg.ue, msg.payload["handoff"])

    def _on_state_transfer(self, agent: EpcAgent, msg: CoreMessage) -> None:
        p = msg.payload
        ue = msg.ue
        if not p["bulk"] and agent.awaiting.get(ue) != msg.src:
            return  # request already abandoned; the source rolls back on its own timer
        agent.awaiting.pop(ue, None)
        self._cancel_timers(agent.agent_id, "handoff_request_timeout", ue)
        version = max(agent.version(ue), p["version"]) + 1
        sess = p["session"]
        agent.sessions[ue] = UeSession(ue, sess["state"], agent.agent_id, agent.new_bearer(),
                                       SessionContext(**sess["context"]))
        agent.hss[ue] = (agent.agent_id, version)
        self.stats["handoff_completed"] += 1
        self.handoff_outcome[p["handoff"]] = "completed"
        self._log(kind="handoff", src=msg.src, dst=agent.agent_id, ue=ue, status="installed", handoff=p["handoff"],
                  version=version)
        self._announce(agent, ue)
        self._send("handoff_ack", agent.agent_id, msg.src, ue,
                   {"handoff": p["handoff"], "anchor": agent.agent_id, "version": version})

    def _on_handoff_ack(self, agent: EpcAgent, msg: CoreMessage) -> None:
        self._merge(agent, msg.ue, msg.payload["anchor"], msg.payload["version"])
        if agent.transferring.get(msg.ue) == msg.src:
            del agent.transferring[msg.ue]
            self._cancel_timers(agent.agent_id, "handoff_ack_timeout", msg.ue)
            self._flush(agent, msg.ue)

    def _on_page_request(self, agent: EpcAgent, msg: CoreMessage) -> None:  # pragma: no cover - paging is local
        pass

    def _on_data_packet(self, agent: EpcAgent, msg: CoreMessage) -> None:
        self._handle_packet(agent, msg.payload["packet"], forwarded=True)

    # -- state inspection --------------------------------------------------------------

    def state_key(self) -> tuple:
        msgs = sorted((m.kind, m.src, m.dst, m.ue, _freeze(m.payload)) for m in self.pending.values())
        timers = sorted((t.agent, t.kind, t.ue, t.token) for t in self.timers.values())
        counts = tuple(sorted((k, v) for k, v in self.stats.items() if k.startswith("packets")))
        return tuple(a.state_key() for a in self.agents.values()) + (tuple(msgs), tuple(timers), counts)

    def counters(self) -> dict[str, int]:
        """Every counter, zero or not, so reports share one key set."""
        keys = set(COUNTER_KEYS) | set(self.stats)
        out = {k: int(self.stats.get(k, 0)) for k in sorted(keys)}
        out["handoff_aborted_total"] = sum(1 for v in self.handoff_outcome.values() if v == "aborted") + \
            self.stats["handoff_aborted"]
        return out

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _freeze(obj):
    if isinstance(obj, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in obj.items()))
    if isinstance(obj, (list, tuple)):
        return tuple(_freeze(v) for v in obj)
    if isinstance(obj, Packet):
        return ("pkt", obj.dst_ue, obj.src_ue, obj.size_bytes, obj.ttl)
    return obj


# -- checks ------------------------------------------------------------------------------

def quiescence_violations(net: CoreNetwork, ues: Iterable[int] | None = None, lossless: bool = False) -> list[str]:
    """Invariants that must hold once no messages or timers remain."""
    out = []
    if not net.quiescent:
        out.append("network not quiescent")
    known = set(ues or ()) | {u for a in net.agents.values() for u in a.hss}
    for ue in sorted(known):
        entries = {a.agent_id: a.hss.get(ue) for a in net.agents.values()}
        if len(set(entries.values())) != 1:
            out.append(f"ue {ue}: replicas disagree {entries}")
            continue
        entry = next(iter(entries.values()))
        if entry is None:
            continue
        anchor = entry[0]
        holders = sorted(a.agent_id for a in net.agents.values() if ue in a.sessions)
        if holders != ([anchor] if anchor in net.agents else []):
            out.append(f"ue {ue}: sessions at {holders}, anchor {anchor}")
        ruled = sorted(a.agent_id for a in net.agents.values() if any(r.ue_id == ue for r in a.flow_table()))
        sess = net.agents[anchor].sessions.get(ue) if anchor in net.agents else None
        if sess is not None and sess.state == "active" and ruled != [anchor]:
            out.append(f"ue {ue}: active but rules at {ruled}")
    for a in net.agents.values():
        if any(a.buffers.values()) or a.transferring or a.awaiting:
            out.append(f"agent {a.agent_id}: handoff state left over")
    sent = net.stats["packets_sent"]
    done = net.stats["packets_delivered"] + sum(net.stats[f"packets_dropped_{r}"] for r in DROP_REASONS)
    if sent != done:
        out.append(f"packets: sent {sent} != delivered+dropped {done}")
    if lossless:
        bad = {r: net.stats[f"packets_dropped_{r}"] for r in ("no_route", "link_down") if net.stats[f"packets_dropped_{r}"]}
        if bad:
            out.append(f"packets dropped without any fault: {bad}")
    return out


def check_trace(records: Sequence[dict]) -> list[str]:
    """Validate a message trace: lifecycle, causality, packet accounting, version order."""
    errors = []
    sent: dict[int, dict] = {}
    closed: set[int] = set()
    packets: dict[int, str] = {}
    last_t = -1
    versions: dict[tuple[int, int], int] = {}
    transfers: set[tuple[int, int, int]] = set()
    for i, r in enumerate(records):
        t = r.get("t_ms", 0)
        if t < last_t:
            errors.append(f"record {i}: time goes backwards")
        last_t = t
        kind, status = r.get("kind"), r.get("status")
        if "msg" in r:
            mid = r["msg"]
            if kind not in MESSAGE_KINDS:
                errors.append(f"record {i}: unknown message kind {kind}")
            if status == "sent":
                if mid in sent:
                    errors.append(f"record {i}: message {mid} sent twice")
                sent[mid] = r
            elif status in ("delivered", "lost"):
                if mid not in sent:
                    errors.append(f"record {i}: message {mid} {status} before being sent")
                elif mid in closed:
                    errors.append(f"record {i}: message {mid} closed twice")
                else:
                    closed.add(mid)
                    if t < sent[mid]["t_ms"]:
                        errors.append(f"record {i}: message {mid} delivered before it was sent")
                if status == "delivered" and kind == "state_transfer":
                    transfers.add((r["src"], r["dst"], r["ue"]))
                if status == "delivered" and kind == "handoff_ack" and (r["dst"], r["src"], r["ue"]) not in transfers:
                    errors.append(f"record {i}: handoff_ack without a delivered state_transfer")
            elif status != "undeliverable":
                errors.append(f"record {i}: bad message status {status}")
        elif kind == "packet":
            pid = r["packet"]
            if status == "sent":
                if pid in packets:
                    errors.append(f"record {i}: packet {pid} sent twice")
                packets[pid] = "open"
            elif status in ("delivered", "dropped"):
                if packets.get(pid) != "open":
                    errors.append(f"record {i}: packet {pid} finished without being open")
                if status == "dropped" and r.get("reason") not in DROP_REASONS:
                    errors.append(f"record {i}: unknown drop reason {r.get('reason')}")
                packets[pid] = status
        if "version" in r and kind in ("attach", "tau") or (kind == "handoff" and status == "installed"):
            key = (r["dst"], r["ue"])
            if r["version"] <= versions.get(key, 0):
                errors.append(f"record {i}: version did not increase for ue {r['ue']} at agent {r['dst']}")
            versions[key] = r["version"]
    open_msgs = set(sent) - closed
    if open_msgs:
        errors.append(f"messages never closed: {sorted(open_msgs)[:5]}")
    open_pkts = [p for p, s in packets.items() if s == "open"]
    if open_pkts:
        errors.append(f"packets never finished: {open_pkts[:5]}")
    return errors


# -- exhaustive interleaving exploration ----------------------------------------------------

@dataclass
class ExplorationResult:
    states: int
    quiescent_states: int
    violations: list[tuple[str, tuple]]


def _apply_op(net: CoreNetwork, op: tuple) -> None:
    kind, *args = op
    try:
        if kind == "attach":
            net.attach(*args)
        elif kind == "handoff":
            net.handoff(*args)
        elif kind == "tau":
            net.tracking_area_update(*args)
        elif kind == "idle":
            net.set_idle(*args)
        elif kind == "data":
            net.send_packet(*args)
        else:
            raise ValueError(f"unknown op {kind}")
    except (ValueError, KeyError):
        # the initiating agent's local view rules the op out; that is a legal outcome
        net.stats["ops_skipped"] += 1


def explore_interleavings(agent_ids: Sequence[int], script: Sequence[tuple], ues: Sequence[int],
                          max_losses: int = 1, max_states: int = 2_000_000) -> ExplorationResult:
    """Depth-first search over every ordering of script steps, deliveries, losses and timeouts.

    Script operations run in order but may be interleaved with any pending
    message delivery; any message may be lost while the loss budget lasts;
    timers may fire at any moment (arbitrary delays).  Every quiescent state
    reached after the whole script is checked with `quiescence_violations`.
    """
    root = CoreNetwork(agent_ids, hss_refreshes=max_losses, record_trace=False)
    seen: set = set()
    violations: list[tuple[str, tuple]] = []
    quiet = 0
    stack = [(root, 0, 0, ())]
    while stack:
        net, pc, losses, path = stack.pop()
        key = (net.state_key(), pc, losses)
        if key in seen:
            continue
        seen.add(key)
        if len(seen) > max_states:
            raise RuntimeError("state space larger than max_states")
        moves = []
        if pc < len(script):
            moves.append(("op", pc))
        moves += [("deliver", m) for m in sorted(net.pending)]
        if losses < max_losses:
            moves += [("lose", m) for m in sorted(net.pending)]
        moves += [("fire", t) for t in sorted(net.timers)]
        if not moves:
            quiet += 1
            for v in quiescence_violations(net, ues, lossless=losses == 0):
                violations.append((v, path))
            continue
        for move, ident in moves:
            child = copy.deepcopy(net)
            label = move
            if move == "op":
                _apply_op(child, script[ident])
                label = script[ident]
                nxt = (child, pc + 1, losses)
            elif move == "deliver":
                child.deliver(ident)
                nxt = (child, pc, losses)
            elif move == "lose":
                child.lose(ident)
                nxt = (child, pc, losses + 1)
            else:
                child.fire(ident)
                nxt = (child, pc, losses)
            stack.append(nxt + (path + ((label, ident),),))
    return ExplorationResult(len(seen), quiet, violations)
