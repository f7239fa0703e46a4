"""The participant roster: clients, label owner, aggregation server, key server.

Every phase of a run shares one :class:`Federation` so all traffic lands on
the same bus ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import crypto
from .transport import AGGREGATOR, KEY_SERVER, LABEL_OWNER, Bus, Endpoint, Kind, PartyId
from .wire import pack_sections, unpack_sections


@dataclass
class Federation:
    bus: Bus
    clients: dict[PartyId, Endpoint]
    aggregator: Endpoint
    key_server: Endpoint
    label_owner: Endpoint
    # envelope keys as each holder decoded them off the wire
    keys: dict[PartyId, crypto.EnvelopeKeyPair] = field(default_factory=dict)

    @classmethod
    def create(cls, m: int, bus: Bus | None = None) -> "Federation":
        if m < 1:
            raise ValueError("need at least one client")
        bus = bus or Bus()
        clients = {PartyId.client(k): bus.register(PartyId.client(k)) for k in range(1, m + 1)}
        return cls(bus, clients, bus.register(AGGREGATOR), bus.register(KEY_SERVER),
                   bus.register(LABEL_OWNER))

    @property
    def client_ids(self) -> list[PartyId]:
        return sorted(self.clients)

    def endpoint(self, party: PartyId) -> Endpoint:
        if party == LABEL_OWNER:
            return self.label_owner
        if party == AGGREGATOR:
            return self.aggregator
        return self.clients[party]

    def distribute_keys(self) -> None:
        """Key server mints the envelope key pair and hands it to every
        client and the label owner. The aggregation server never gets it."""
        if self.keys:
            return
        pair = crypto.generate_envelope_keypair()
        session = self.bus.open_session()
        holders = self.client_ids + [LABEL_OWNER]
        for party in holders:
            self.key_server.send(party, session, Kind.KEY_PRIVATE, pack_sections(pair.private, pair.public))
        for party in holders:
            env = self.endpoint(party).expect(session, Kind.KEY_PRIVATE, KEY_SERVER)
            private, public = unpack_sections(env.payload)
            self.keys[party] = crypto.EnvelopeKeyPair(private, public)
        self.bus.close_session(session)

    def public_key(self) -> bytes:
        self.distribute_keys()
        return next(iter(self.keys.values())).public
