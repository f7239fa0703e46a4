"""Two-party PSI sessions: RSA blind signatures and a DH-OPRF variant.

Both protocols give the intersection to the receiver only. Message schemas:

RSA   sender   -> receiver  PK_ANNOUNCE              n, e as length-prefixed big ints
      receiver -> sender    BLINDED_SET              |R| residues mod n
      sender   -> receiver  SIGNED_SET+SENDER_DIGESTS |R| residues, then |S| 32-byte digests
      receiver -> sender    DONE                     empty

OPRF  receiver -> sender    BLINDED_SET              |R| group elements
      sender   -> receiver  EVALUATED_SET            |R| group elements
      sender   -> receiver  SENDER_MAPPED_SET        K*|S| 32-byte PRF outputs
      receiver -> sender    DONE                     empty

In the OPRF flavor the sender holds ``K`` keys and the receiver privately
assigns each of its elements to one of them, so the sender has to publish
every element under all ``K`` keys. That makes the sender's transfer the
dominant term, which is what the volume-aware scheduler relies on.
"""

from __future__ import annotations

import enum
import secrets
import threading
from dataclasses import dataclass
from typing import Sequence

from . import crypto
from .transport import Bus, CommStats, Endpoint, Kind, ProtocolError, TransportError
from .wire import (ELEMENT_BYTES, PREFIX, int_to_fixed, pack_bigint, pack_elements,
                   unpack_bigint, unpack_elements)

OPRF_FUNCTIONS = 3


class TpsiProtocol(str, enum.Enum):
    RSA_BLIND = "rsa"
    OPRF = "oprf"


@dataclass(frozen=True)
class TpsiSessionResult:
    session: int
    protocol: TpsiProtocol
    sender: object
    receiver: object
    intersection: list
    stats: CommStats


@dataclass(frozen=True)
class TpsiConfig:
    rsa_bits: int = crypto.DEFAULT_RSA_BITS
    oprf_functions: int = OPRF_FUNCTIONS
    timeout: float | None = None


def tpsi_cost(protocol: TpsiProtocol, sender_size: int, receiver_size: int,
              oprf_functions: int = OPRF_FUNCTIONS) -> int:
    """Predicted element transfers for one session.

    RSA: the receiver's set crosses twice (blinded, signed) and the sender's
    digests once. OPRF: the receiver's set crosses twice (blinded,
    evaluated) and the sender's set once per PRF key.
    """
    if sender_size < 0 or receiver_size < 0:
        raise ValueError("set sizes must be non-negative")
    protocol = TpsiProtocol(protocol)
    if protocol is TpsiProtocol.RSA_BLIND:
        return 2 * receiver_size + sender_size
    return 2 * receiver_size + oprf_functions * sender_size


def rsa_announce_bytes(bits: int) -> int:
    return 2 * PREFIX + (bits + 7) // 8 + 3  # e = 65537 is 3 bytes


def tpsi_framing_bytes(protocol: TpsiProtocol, rsa_bits: int = crypto.DEFAULT_RSA_BITS) -> int:
    """Constant payload bytes not attributable to set elements."""
    if TpsiProtocol(protocol) is TpsiProtocol.RSA_BLIND:
        # BLINDED_SET prefix, two prefixes in the signed message, empty DONE
        return rsa_announce_bytes(rsa_bits) + 3 * PREFIX
    return 3 * PREFIX


def tpsi_payload_bytes(protocol: TpsiProtocol, sender_size: int, receiver_size: int,
                       rsa_bits: int = crypto.DEFAULT_RSA_BITS,
                       oprf_functions: int = OPRF_FUNCTIONS) -> int:
    """Exact payload bytes one session puts on the bus."""
    protocol = TpsiProtocol(protocol)
    if protocol is TpsiProtocol.RSA_BLIND:
        width = (rsa_bits + 7) // 8
        body = 2 * receiver_size * width + sender_size * ELEMENT_BYTES
    else:
        body = ELEMENT_BYTES * tpsi_cost(protocol, sender_size, receiver_size, oprf_functions)
    return body + tpsi_framing_bytes(protocol, rsa_bits)


# -- RSA roles --------------------------------------------------------------

def _rsa_sender(ep: Endpoint, peer, session: int, ids: Sequence[int], cfg: TpsiConfig) -> None:
    key = crypto.generate_rsa_keypair(cfg.rsa_bits)
    pk = key.public
    ep.send(peer, session, Kind.PK_ANNOUNCE, pack_bigint(pk.n) + pack_bigint(pk.e))

    env = ep.expect(session, Kind.BLINDED_SET, peer, cfg.timeout)
    blinded, _ = unpack_elements(env.payload, pk.width)
    signed = []
    for raw in blinded:
        value = int.from_bytes(raw, "big")
        if value >= pk.n:
            raise ProtocolError(session, "blinded value out of range")
        signed.append(int_to_fixed(crypto.sign_blinded(value, key), pk.width))
    digests = sorted(crypto.signature_digest(crypto.sign_direct(crypto.hash_to_modulus(y, pk), key), pk)
                     for y in ids)
    ep.send(peer, session, Kind.SIGNED_SET,
            pack_elements(signed, pk.width) + pack_elements(digests))
    ep.expect(session, Kind.DONE, peer, cfg.timeout)


def _rsa_receiver(ep: Endpoint, peer, session: int, ids: Sequence[int], cfg: TpsiConfig) -> list[int]:
    env = ep.expect(session, Kind.PK_ANNOUNCE, peer, cfg.timeout)
    n, at = unpack_bigint(env.payload)
    e, _ = unpack_bigint(env.payload, at)
    pk = crypto.RsaPublicKey(n, e)

    mine = list(ids)
    factors = [crypto.random_blinding_factor(pk) for _ in mine]
    blinded = [int_to_fixed(crypto.blind(crypto.hash_to_modulus(x, pk), r, pk), pk.width)
               for x, r in zip(mine, factors)]
    ep.send(peer, session, Kind.BLINDED_SET, pack_elements(blinded, pk.width))

    env = ep.expect(session, Kind.SIGNED_SET, peer, cfg.timeout)
    signed, at = unpack_elements(env.payload, pk.width)
    digests, _ = unpack_elements(env.payload, ELEMENT_BYTES, at)
    if len(signed) != len(mine):
        raise ProtocolError(session, f"expected {len(mine)} signatures, got {len(signed)}")
    theirs = set(digests)
    found = [x for x, raw, r in zip(mine, signed, factors)
             if crypto.signature_digest(crypto.unblind(int.from_bytes(raw, "big"), r, pk), pk) in theirs]
    ep.send(peer, session, Kind.DONE, b"")
    return sorted(found)


# -- OPRF roles -------------------------------------------------------------

def _oprf_sender(ep: Endpoint, peer, session: int, ids: Sequence[int], cfg: TpsiConfig) -> None:
    keys = [crypto.random_scalar() for _ in range(cfg.oprf_functions)]
    env = ep.expect(session, Kind.BLINDED_SET, peer, cfg.timeout)
    blinded, _ = unpack_elements(env.payload)
    evaluated = []
    for i, raw in enumerate(blinded):
        try:
            elem = crypto.GroupElement.from_bytes(raw)
        except crypto.CryptoError as exc:
            raise ProtocolError(session, f"blinded element {i}: {exc}") from None
        evaluated.append(crypto.oprf_evaluate(elem, keys[i % len(keys)]).to_bytes())
    ep.send(peer, session, Kind.EVALUATED_SET, pack_elements(evaluated))

    mapped = sorted(v for y in ids for v in crypto.dh_oprf_multi(keys, y))
    ep.send(peer, session, Kind.SENDER_MAPPED_SET, pack_elements(mapped))
    ep.expect(session, Kind.DONE, peer, cfg.timeout)


def _oprf_receiver(ep: Endpoint, peer, session: int, ids: Sequence[int], cfg: TpsiConfig) -> list[int]:
    # Random order decides which sender key each element is evaluated under.
    mine = list(ids)
    secrets.SystemRandom().shuffle(mine)
    factors = [crypto.random_scalar() for _ in mine]
    blinded = [crypto.oprf_blind(x, b).to_bytes() for x, b in zip(mine, factors)]
    ep.send(peer, session, Kind.BLINDED_SET, pack_elements(blinded))

    env = ep.expect(session, Kind.EVALUATED_SET, peer, cfg.timeout)
    evaluated, _ = unpack_elements(env.payload)
    if len(evaluated) != len(mine):
        raise ProtocolError(session, f"expected {len(mine)} evaluations, got {len(evaluated)}")
    env = ep.expect(session, Kind.SENDER_MAPPED_SET, peer, cfg.timeout)
    mapped, _ = unpack_elements(env.payload)
    theirs = set(mapped)
    found = []
    for x, raw, b in zip(mine, evaluated, factors):
        try:
            value = crypto.oprf_unblind(crypto.GroupElement.from_bytes(raw), b)
        except crypto.CryptoError as exc:
            raise ProtocolError(session, f"evaluated element: {exc}") from None
        if crypto.finalize(value) in theirs:
            found.append(x)
    ep.send(peer, session, Kind.DONE, b"")
    return sorted(found)


_ROLES = {
    TpsiProtocol.RSA_BLIND: (_rsa_sender, _rsa_receiver),
    TpsiProtocol.OPRF: (_oprf_sender, _oprf_receiver),
}


def run_tpsi(protocol: TpsiProtocol, sender: Endpoint, sender_ids: Sequence[int],
             receiver: Endpoint, receiver_ids: Sequence[int], bus: Bus,
             cfg: TpsiConfig | None = None) -> TpsiSessionResult:
    """Run one session; the sender role runs on its own thread.

    On any failure the session is closed, nothing is returned, and the error
    is re-raised as :class:`ProtocolError` carrying the session id.
    """
    cfg = cfg or TpsiConfig()
    protocol = TpsiProtocol(protocol)
    send_role, recv_role = _ROLES[protocol]
    session = bus.open_session()
    failure: list[BaseException] = []

    def sender_main():
        try:
            send_role(sender, receiver.party, session, list(sender_ids), cfg)
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            failure.append(exc)
            bus.close_session(session)

    t = threading.Thread(target=sender_main, name=f"tpsi-{session}-sender", daemon=True)
    t.start()
    try:
        intersection = recv_role(receiver, sender.party, session, list(receiver_ids), cfg)
    except (ProtocolError, TransportError, crypto.CryptoError, ValueError) as exc:
        bus.close_session(session)
        t.join()
        cause = failure[0] if failure else exc
        raise ProtocolError(session, f"aborted: {cause}") from cause
    t.join()
    bus.close_session(session)
    if failure:
        raise ProtocolError(session, f"aborted: {failure[0]}") from failure[0]
    return TpsiSessionResult(session, protocol, sender.party, receiver.party,
                             intersection, bus.session_stats(session))
