"""Multi-party PSI: request intake, pair scheduling, topology execution and
sealed result distribution through the aggregation server.

Every TPSI round runs the same handshake: each participating client sends a
REQUEST (current result length + whether it holds a previous result) to the
aggregation server, the server schedules, and answers each client with a
STATUS naming its partner and role.
"""

from __future__ import annotations

import enum
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import crypto
from .federation import Federation
from .tpsi import TpsiConfig, TpsiProtocol, TpsiSessionResult, run_tpsi
from .transport import AGGREGATOR, LABEL_OWNER, CommStats, Kind, PartyId, ProtocolError
from .wire import pack_ids, unpack_ids


class Topology(str, enum.Enum):
    TREE = "tree"
    PATH = "path"
    STAR = "star"


class Policy(str, enum.Enum):
    REQUEST_ORDER = "request-order"
    VOLUME_AWARE = "volume-aware"


@dataclass(frozen=True)
class ClientRequest:
    client: PartyId
    res_len: int
    has_prev_result: bool = False

    def __post_init__(self):
        if self.res_len < 0:
            raise ValueError("res_len must be non-negative")


@dataclass(frozen=True)
class RoundPlan:
    pairs: tuple  # (sender, receiver) tuples
    passthrough: PartyId | None = None

    def participants(self) -> list[PartyId]:
        out = [p for pair in self.pairs for p in pair]
        if self.passthrough is not None:
            out.append(self.passthrough)
        return out


@dataclass(frozen=True)
class AlignmentResult:
    ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(sorted(int(i) for i in self.ids)))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MpsiOutcome:
    result: AlignmentResult
    stats: CommStats
    rounds: int
    tpsi_runs: int
    delivered: dict
    sessions: list = field(default_factory=list)
    plans: list = field(default_factory=list)


class SchedulingError(ValueError):
    pass


def _receiver_first(a: ClientRequest, b: ClientRequest, protocol: TpsiProtocol) -> tuple[PartyId, PartyId]:
    """(sender, receiver) for a pair under the volume rule; ties -> lower id receives."""
    if a.res_len == b.res_len:
        lo, hi = sorted((a.client, b.client))
        return hi, lo
    small, large = (a, b) if a.res_len < b.res_len else (b, a)
    if protocol is TpsiProtocol.RSA_BLIND:
        return large.client, small.client
    return small.client, large.client


def schedule_round(requests: Sequence[ClientRequest], policy: Policy,
                   protocol: TpsiProtocol) -> RoundPlan:
    """Pair the active clients for one TPSI round.

    Volume-aware: sort ascending by ``res_len`` and pair position ``k`` with
    ``k + ceil(n/2)``; for odd ``n`` the middle client sits the round out.
    Request order: consecutive arrivals pair up, the earlier one sends.
    """
    if not requests:
        raise SchedulingError("no client requests to schedule")
    policy, protocol = Policy(policy), TpsiProtocol(protocol)
    n = len(requests)
    if len({r.client for r in requests}) != n:
        raise SchedulingError("duplicate client in requests")

    if policy is Policy.REQUEST_ORDER:
        pairs = tuple((requests[i].client, requests[i + 1].client) for i in range(0, n - 1, 2))
        return RoundPlan(pairs, requests[-1].client if n % 2 else None)

    ordered = sorted(requests, key=lambda r: (r.res_len, r.client))
    half = math.ceil(n / 2)
    pairs = tuple(_receiver_first(ordered[k], ordered[k + half], protocol) for k in range(n // 2))
    return RoundPlan(pairs, ordered[half - 1].client if n % 2 else None)


# -- request / status handshake ---------------------------------------------

_REQUEST = struct.Struct("<QB")
_STATUS = struct.Struct("<BI")
ROLE_SENDER, ROLE_RECEIVER, ROLE_PASSTHROUGH = 1, 2, 3


def _handshake(fed: Federation, requests: Sequence[ClientRequest], plan_fn) -> RoundPlan:
    """Clients request in the given order; the server replies with statuses."""
    session = fed.bus.open_session()
    for req in requests:
        fed.clients[req.client].send(AGGREGATOR, session, Kind.REQUEST,
                                     _REQUEST.pack(req.res_len, int(req.has_prev_result)))
    received = []
    for _ in requests:
        env = fed.aggregator.expect(session, Kind.REQUEST)
        res_len, has_prev = _REQUEST.unpack(env.payload)
        received.append(ClientRequest(env.src, res_len, bool(has_prev)))
    plan = plan_fn(received)
    seen: set[PartyId] = set()
    for sender, receiver in plan.pairs:
        for party in (sender, receiver):
            if party in seen:
                raise SchedulingError(f"{party} scheduled twice in one round")
            seen.add(party)
        fed.aggregator.send(sender, session, Kind.STATUS, _STATUS.pack(ROLE_SENDER, receiver.index))
        fed.aggregator.send(receiver, session, Kind.STATUS, _STATUS.pack(ROLE_RECEIVER, sender.index))
    if plan.passthrough is not None:
        fed.aggregator.send(plan.passthrough, session, Kind.STATUS,
                            _STATUS.pack(ROLE_PASSTHROUGH, plan.passthrough.index))
    for party in plan.participants():
        fed.clients[party].expect(session, Kind.STATUS, AGGREGATOR)
    fed.bus.close_session(session)
    return plan


# -- topologies ---------------------------------------------------------------

class _Run:
    def __init__(self, fed: Federation, sets: dict[PartyId, list[int]], policy: Policy,
                 protocol: TpsiProtocol, cfg: TpsiConfig):
        self.fed, self.policy, self.protocol, self.cfg = fed, policy, protocol, cfg
        self.current = {p: list(ids) for p, ids in sets.items()}
        self.has_prev = {p: False for p in sets}
        self.sessions: list[TpsiSessionResult] = []
        self.plans: list[RoundPlan] = []
        self.rounds = 0

    def request(self, party: PartyId) -> ClientRequest:
        return ClientRequest(party, len(self.current[party]), self.has_prev[party])

    def tpsi(self, sender: PartyId, receiver: PartyId) -> TpsiSessionResult:
        res = run_tpsi(self.protocol, self.fed.clients[sender], self.current[sender],
                       self.fed.clients[receiver], self.current[receiver], self.fed.bus, self.cfg)
        return res

    def execute(self, plan: RoundPlan) -> None:
        self.fed.bus.begin_round()
        self.rounds += 1
        self.plans.append(plan)
        if len(plan.pairs) == 1:
            results = [self.tpsi(*plan.pairs[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(plan.pairs)) as pool:
                results = list(pool.map(lambda pair: self.tpsi(*pair), plan.pairs))
        for res in results:
            self.current[res.receiver] = res.intersection
            self.has_prev[res.receiver] = True
            self.sessions.append(res)

    def tree(self) -> PartyId:
        active = sorted(self.current)
        while len(active) > 1:
            plan = _handshake(self.fed, [self.request(p) for p in active],
                              lambda reqs: schedule_round(reqs, self.policy, self.protocol))
            self.execute(plan)
            nxt = [r for _, r in plan.pairs]
            if plan.passthrough is not None:
                nxt.append(plan.passthrough)
            active = sorted(nxt)
        return active[0]

    def _pair_plan(self, a: PartyId, b: PartyId, fixed_receiver: PartyId | None = None):
        def plan_fn(reqs: Sequence[ClientRequest]) -> RoundPlan:
            if fixed_receiver is not None:
                other = b if fixed_receiver == a else a
                return RoundPlan(((other, fixed_receiver),))
            return schedule_round(reqs, self.policy, self.protocol)
        return plan_fn

    def path(self) -> PartyId:
        chain = sorted(self.current)
        holder = chain[0]
        for nxt in chain[1:]:
            plan = _handshake(self.fed, [self.request(holder), self.request(nxt)],
                              self._pair_plan(holder, nxt))
            self.execute(plan)
            holder = plan.pairs[0][1]
        return holder

    def star_center(self) -> PartyId:
        parties = sorted(self.current)
        if self.policy is Policy.REQUEST_ORDER:
            return parties[0]
        size = {p: len(self.current[p]) for p in parties}
        # The center receives every session: RSA favors the smallest set as
        # receiver, OPRF the largest.
        if self.protocol is TpsiProtocol.RSA_BLIND:
            return min(parties, key=lambda p: (size[p], p))
        return min(parties, key=lambda p: (-size[p], p))

    def star(self) -> PartyId:
        center = self.star_center()
        for leaf in sorted(p for p in self.current if p != center):
            plan = _handshake(self.fed, [self.request(center), self.request(leaf)],
                              self._pair_plan(center, leaf, fixed_receiver=center))
            self.execute(plan)
        return center


def distribute_result(fed: Federation, holder: PartyId, ids: Sequence[int]) -> dict[PartyId, AlignmentResult]:
    """Holder seals the sorted result; the aggregation server fans it out to
    every client and the label owner, which needs it to line up labels."""
    fed.distribute_keys()
    result = AlignmentResult(tuple(ids))
    session = fed.bus.open_session()
    sealed = crypto.envelope_seal(pack_ids(result.ids), fed.public_key())
    fed.clients[holder].send(AGGREGATOR, session, Kind.SEALED_RESULT, sealed.to_bytes())
    blob = fed.aggregator.expect(session, Kind.SEALED_RESULT, holder).payload
    recipients = fed.client_ids + [LABEL_OWNER]
    for party in recipients:
        fed.aggregator.send(party, session, Kind.SEALED_RESULT, blob)
    delivered = {}
    for party in recipients:
        env = fed.endpoint(party).expect(session, Kind.SEALED_RESULT, AGGREGATOR)
        plain = crypto.envelope_open(crypto.SealedEnvelope.from_bytes(env.payload), fed.keys[party])
        delivered[party] = AlignmentResult(tuple(unpack_ids(plain)[0]))
    fed.bus.close_session(session)
    return delivered


def run_mpsi(topology: Topology, policy: Policy, protocol: TpsiProtocol,
             client_sets: Mapping[PartyId, Sequence[int]] | Sequence[Sequence[int]],
             fed: Federation | None = None, cfg: TpsiConfig | None = None) -> MpsiOutcome:
    """Align all clients' id sets; every client ends with the same sorted list.

    ``client_sets`` may be a list (client ``k`` gets entry ``k-1``) or a
    mapping from client ids.
    """
    if not isinstance(client_sets, Mapping):
        client_sets = {PartyId.client(k): ids for k, ids in enumerate(client_sets, start=1)}
    if len(client_sets) < 2:
        raise ValueError("multi-party PSI needs at least two clients")
    fed = fed or Federation.create(len(client_sets))
    missing = set(client_sets) - set(fed.clients)
    if missing:
        raise ValueError(f"clients not registered: {sorted(map(str, missing))}")
    topology, policy, protocol = Topology(topology), Policy(policy), TpsiProtocol(protocol)

    fed.distribute_keys()
    before = fed.bus.snapshot_stats()
    run = _Run(fed, {p: list(ids) for p, ids in client_sets.items()}, policy, protocol,
               cfg or TpsiConfig())
    holder = {Topology.TREE: run.tree, Topology.PATH: run.path, Topology.STAR: run.star}[topology]()
    delivered = distribute_result(fed, holder, run.current[holder])
    results = set(delivered.values())
    if len(results) != 1:
        raise ProtocolError(0, "clients decrypted different alignment results")
    stats = fed.bus.snapshot_stats() - before
    return MpsiOutcome(results.pop(), stats, run.rounds, len(run.sessions), delivered,
                       run.sessions, run.plans)


def expected_rounds(topology: Topology, m: int) -> int:
    if Topology(topology) is Topology.TREE:
        return math.ceil(math.log2(m)) if m > 1 else 0
    return m - 1
