"""Agent runtime: DID exchange, credential issuance, proofs and trusted connections.

An ``Agent`` speaks the wire protocol. Its controller never touches agent
internals: it sends JSON admin commands (``admin_command``) and reacts to
``WebhookEvent`` records the agent publishes for every inbound message.

Connection states only move forward::

    invited -> requested -> responded -> active -> trusted

The inviter walks invited -> responded -> active, the invitee
requested -> active. ``trusted`` is set in exactly one place, after a
presentation verifies with every check passing.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from . import crypto
from .credentials import (
    Credential,
    CredentialSchema,
    LinkSecret,
    ProofPresentation,
    ProofRequest,
    RevocationRegistry,
    VerificationResult,
    commit_link_secret,
    element_from_b64,
    element_to_b64,
    issue_credential,
    present_proof,
    verify_presentation,
)
from .crypto import EncryptedEnvelope, KeyPair, b64url_decode, b64url_encode, canonical_json
from .did import Did, DidDocument, PeerDidStore, PublicLedger, create_did, create_peer_did, resolve
from .randomness import RandomSource, SystemRandom
from .transport import Endpoint, Transport, TransportError

logger = logging.getLogger(__name__)

STATES = ("invited", "requested", "responded", "active", "trusted")
TOPICS = ("connection", "credential", "proof", "basicmessage", "model", "problem_report")
ADMIN_COMMANDS = (
    "list_connections",
    "create_invitation",
    "accept_invitation",
    "issue_credential",
    "request_proof",
    "send_model",
    "get_trusted",
)
DEFAULT_PROOF_TIMEOUT = 5.0


class AgentError(Exception):
    pass


class ConnectionFailed(AgentError):
    pass


class InvalidInvitation(AgentError):
    pass


class UntrustedConnection(AgentError):
    pass


class UnknownCommand(AgentError):
    pass


class UnknownConnection(AgentError, KeyError):
    pass


class SimClock:
    """Simulated wall clock; only moves when told to."""

    def __init__(self, start: Union[str, datetime] = "2021-03-01T00:00:00+00:00") -> None:
        if isinstance(start, str):
            start = datetime.fromisoformat(start)
        self._now = start if start.tzinfo else start.replace(tzinfo=timezone.utc)
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def timestamp(self) -> float:
        return self.now().timestamp()

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += timedelta(seconds=seconds)


@dataclass(frozen=True)
class AgentConfig:
    name: str
    http_port: int
    admin_port: int
    webhook_port: int
    host: str = "127.0.0.1"

    def __post_init__(self) -> None:
        ports = (self.http_port, self.admin_port, self.webhook_port)
        if len(set(ports)) != 3:
            raise ValueError(f"{self.name}: http, admin and webhook ports must differ")
        for port in ports:
            if not isinstance(port, int) or not 1 <= port <= 65535:
                raise ValueError(f"{self.name}: port out of range: {port!r}")

    @property
    def endpoint(self) -> Endpoint:
        return Endpoint(self.host, self.http_port)

    @property
    def ports(self) -> Tuple[int, int, int]:
        return (self.http_port, self.admin_port, self.webhook_port)


@dataclass(frozen=True)
class TrustPolicy:
    required_schema_id: str
    required_issuer_dids: FrozenSet[str]
    requested_attributes: Tuple[str, ...] = ()
    attribute_predicates: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "required_issuer_dids", frozenset(str(d) for d in self.required_issuer_dids))
        object.__setattr__(self, "requested_attributes", tuple(self.requested_attributes))
        if not self.required_issuer_dids:
            raise ValueError("a trust policy must name at least one issuer")


@dataclass(frozen=True)
class WebhookEvent:
    topic: str
    payload: Dict[str, Any]

    def __post_init__(self) -> None:
        if self.topic not in TOPICS:
            raise ValueError(f"unknown webhook topic {self.topic!r}")

    @property
    def transition(self) -> Optional[Tuple[Optional[str], str]]:
        t = self.payload.get("transition")
        return (t[0], t[1]) if t else None

    def to_json(self) -> dict:
        return {"topic": self.topic, "payload": self.payload}


@dataclass
class ConnectionRecord:
    connection_id: str
    my_did: str
    state: str
    their_did: Optional[str] = None
    their_endpoint: Optional[str] = None
    their_label: str = ""
    role: str = "inviter"
    presented_credential: Optional[Tuple[str, str]] = None  # (issuer did, revocation id)
    trust_revoked: bool = False

    def to_json(self) -> dict:
        return {
            "connection_id": self.connection_id,
            "my_did": self.my_did,
            "their_did": self.their_did,
            "state": self.state,
            "their_endpoint": self.their_endpoint,
            "their_label": self.their_label,
            "role": self.role,
            "trust_revoked": self.trust_revoked,
        }


@dataclass(frozen=True)
class Invitation:
    inviter_did: str
    endpoint: str
    token: str
    recipient_key: str
    label: str = ""

    def to_json(self) -> dict:
        return {
            "inviter_did": self.inviter_did,
            "endpoint": self.endpoint,
            "token": self.token,
            "recipient_key": self.recipient_key,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Invitation":
        try:
            inv = cls(doc["inviter_did"], doc["endpoint"], doc["token"], doc["recipient_key"], doc.get("label", ""))
            key = b64url_decode(inv.recipient_key)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInvitation(f"malformed invitation: {exc}") from None
        if Did.from_key(key) != Did.parse(inv.inviter_did):
            raise InvalidInvitation("invitation DID is not bound to its recipient key")
        return inv


@dataclass
class PendingProof:
    connection_id: str
    request: ProofRequest
    result: Optional[VerificationResult] = None
    timed_out: bool = False


@dataclass
class WalletEntry:
    credential: Credential
    link_secret: LinkSecret


class Agent:
    """One protocol-speaking participant bound to one transport endpoint."""

    def __init__(
        self,
        config: AgentConfig,
        transport: Transport,
        ledger: PublicLedger,
        rng: Optional[RandomSource] = None,
        clock: Optional[SimClock] = None,
        proof_timeout: float = DEFAULT_PROOF_TIMEOUT,
    ) -> None:
        self.config = config
        self.name = config.name
        self.transport = transport
        self.ledger = ledger
        self.rng = rng or SystemRandom()
        self.clock = clock or SimClock(datetime.now(timezone.utc))
        self.proof_timeout = proof_timeout

        self.peer_store = PeerDidStore(owner=config.name)
        self.connections: Dict[str, ConnectionRecord] = {}
        self._conn_keys: Dict[str, KeyPair] = {}
        self._by_peer_key: Dict[str, str] = {}
        self._invitations: Dict[str, str] = {}  # open token -> connection id
        self._invitation_conns: List[str] = []  # every connection that began as an invitation
        self._used_tokens: set = set()
        self._seen_nonces: set = set()

        self.link_secret = LinkSecret.generate(self.rng)
        self.wallet: List[WalletEntry] = []
        self._pending_offers: Dict[str, Tuple[str, str, Dict[str, str], Optional[str]]] = {}
        self._pending_blinding: Dict[str, LinkSecret] = {}

        self.public_keys: Optional[KeyPair] = None
        self.public_did: Optional[Did] = None
        self.registry: Optional[RevocationRegistry] = None

        self.proofs: Dict[str, PendingProof] = {}
        self.model_inbox: List[Dict[str, Any]] = []
        self.model_trainer: Optional[Callable[[bytes, Dict[str, Any]], bytes]] = None
        self.dataset: Any = None

        self.events: List[WebhookEvent] = []
        self._subscribers: List[Callable[[WebhookEvent], None]] = []
        self.transition_count = 0

        self._lock = threading.RLock()
        self.listener = transport.bind(config.endpoint, self._on_frame)

    def __repr__(self) -> str:
        return f"Agent({self.name!r}, {self.config.endpoint})"

    # ------------------------------------------------------------------ events

    def subscribe(self, callback: Callable[[WebhookEvent], None]) -> None:
        self._subscribers.append(callback)

    def _publish(self, events: Iterable[WebhookEvent]) -> None:
        for event in events:
            self.events.append(event)
            for callback in list(self._subscribers):
                try:
                    callback(event)
                except Exception:
                    logger.exception("%s: webhook subscriber failed", self.name)

    def _transition(self, record: ConnectionRecord, new_state: str) -> Tuple[Optional[str], str]:
        old = record.state if record.connection_id in self.connections else None
        if old is not None and STATES.index(new_state) <= STATES.index(old):
            raise AgentError(f"illegal transition {old} -> {new_state}")
        record.state = new_state
        self.transition_count += 1
        return (old, new_state)

    def _fresh_id(self) -> str:
        return self.rng.randbytes(16).hex()

    # -------------------------------------------------------------- identities

    def register_public_did(self) -> Did:
        """Publish a public DID (issuers) and an empty revocation registry."""
        with self._lock:
            if self.public_did is not None:
                return self.public_did
            keys = crypto.generate_keypair(self.rng.randbytes(32))
            did, doc = create_did(keys, self.config.endpoint.uri, method="sov")
            self.ledger.write(doc)
            self.public_keys, self.public_did = keys, did
            self.registry = RevocationRegistry(f"{did}:4:revocation")
            self.ledger.publish_registry(did, self.registry)
            return did

    def publish_schema(self, name: str, version: str, attribute_names: Sequence[str]) -> CredentialSchema:
        if self.public_did is None:
            raise AgentError(f"{self.name} has no public DID")
        schema = CredentialSchema.create(self.public_did, name, version, attribute_names)
        self.ledger.register_schema(schema)
        return schema

    def my_dids(self) -> List[str]:
        return [r.my_did for r in self.connections.values()]

    def connection_to(self, other: "Agent") -> ConnectionRecord:
        mine = set(other.my_dids())
        for record in self.connections.values():
            if record.their_did in mine:
                return record
        raise UnknownConnection(f"{self.name} has no connection to {other.name}")

    # -------------------------------------------------------------- connection

    def create_invitation(self) -> Invitation:
        with self._lock:
            keys = crypto.generate_keypair(self.rng.randbytes(32))
            did, _doc = create_peer_did(keys, self.config.endpoint.uri)
            record = ConnectionRecord(self._fresh_id(), str(did), "invited", role="inviter")
            transition = self._transition(record, "invited")
            self.connections[record.connection_id] = record
            self._conn_keys[record.connection_id] = keys
            token = self._fresh_id()
            self._invitations[token] = record.connection_id
            self._invitation_conns.append(record.connection_id)
            event = WebhookEvent("connection", {**record.to_json(), "transition": transition})
        self._publish([event])
        return Invitation(str(did), self.config.endpoint.uri, token, b64url_encode(keys.signing_public), self.name)

    def accept_invitation(self, invitation: Union[Invitation, dict]) -> ConnectionRecord:
        if isinstance(invitation, dict):
            invitation = Invitation.from_json(invitation)
        with self._lock:
            keys = crypto.generate_keypair(self.rng.randbytes(32))
            did, doc = create_peer_did(keys, self.config.endpoint.uri)
            record = ConnectionRecord(
                self._fresh_id(), str(did), "requested",
                their_did=invitation.inviter_did, their_endpoint=invitation.endpoint,
                their_label=invitation.label, role="invitee",
            )
            transition = self._transition(record, "requested")
            self.connections[record.connection_id] = record
            self._conn_keys[record.connection_id] = keys
            self._by_peer_key[invitation.recipient_key] = record.connection_id
            message = {"type": "connections/request", "token": invitation.token, "did_doc": doc.to_json(),
                       "label": self.name}
            dest = Endpoint.parse(invitation.endpoint)
            env = self._seal(keys, b64url_decode(invitation.recipient_key), message)
        self._publish([WebhookEvent("connection", {**record.to_json(), "transition": transition})])
        try:
            self.listener.send(dest, env.encode())
        except TransportError as exc:
            self._publish([WebhookEvent("connection", {"connection_id": record.connection_id,
                                                       "error": "connection failed", "detail": str(exc)})])
            raise ConnectionFailed(str(exc)) from exc
        return record

    # ----------------------------------------------------------------- sending

    def _seal(self, keys: KeyPair, their_signing_public: bytes, message: dict) -> EncryptedEnvelope:
        recipient = crypto.agreement_public_from_signing(their_signing_public)
        return crypto.seal(keys, recipient, canonical_json(message), nonce=self.rng.randbytes(crypto.NONCE_SIZE))

    def _peer(self, connection_id: str) -> Tuple[ConnectionRecord, KeyPair, DidDocument]:
        record = self.connections.get(connection_id)
        if record is None:
            raise UnknownConnection(connection_id)
        if record.state not in ("active", "trusted"):
            raise AgentError(f"connection {connection_id} is {record.state}, not active")
        doc = resolve(self.peer_store, record.their_did)
        return record, self._conn_keys[connection_id], doc

    def _envelope_for(self, connection_id: str, message: dict) -> Tuple[Endpoint, EncryptedEnvelope]:
        _record, keys, doc = self._peer(connection_id)
        return Endpoint.parse(doc.agent_endpoint), self._seal(keys, doc.signing_key, message)

    def _send(self, outbound: Sequence[Tuple[Endpoint, EncryptedEnvelope]]) -> None:
        for dest, env in outbound:
            self.listener.send(dest, env.encode())

    def send_message(self, connection_id: str, content: str) -> None:
        with self._lock:
            out = self._envelope_for(connection_id, {"type": "basicmessage", "content": content})
        self._send([out])

    # ------------------------------------------------------------- credentials

    def offer_credential(self, connection_id: str, schema_id: str, attributes: Dict[str, str],
                         expiry: Optional[str] = None) -> str:
        with self._lock:
            if self.public_did is None:
                raise AgentError(f"{self.name} cannot issue without a public DID")
            schema = self.ledger.schema(schema_id)
            if set(attributes) != set(schema.attribute_names):
                raise AgentError(f"attributes do not match schema {schema_id}")
            offer_id = self._fresh_id()
            self._pending_offers[offer_id] = (connection_id, schema_id, dict(attributes), expiry)
            # attribute values are not previewed in the offer
            out = self._envelope_for(connection_id, {"type": "issue-credential/offer", "offer_id": offer_id,
                                                     "schema_id": schema_id, "issuer_did": str(self.public_did)})
        self._send([out])
        return offer_id

    def store_credential(self, credential: Credential, link_secret: LinkSecret) -> None:
        if commit_link_secret(link_secret) != credential.link_commitment:
            raise AgentError("credential is not bound to this link secret")
        with self._lock:
            self.wallet.append(WalletEntry(credential, link_secret))

    def revoke_credential(self, revocation_id: str) -> None:
        if self.registry is None:
            raise AgentError(f"{self.name} is not an issuer")
        self.registry.revoke(revocation_id)

    def _select_credential(self, request: ProofRequest) -> Optional[WalletEntry]:
        exact = [e for e in self.wallet if e.credential.schema_id == request.requested_schema_id
                 and e.credential.issuer_did in request.required_issuer_dids]
        loose = [e for e in self.wallet if e.credential.schema_id == request.requested_schema_id]
        candidates = exact or loose
        return candidates[-1] if candidates else None

    def build_presentation(self, request: ProofRequest) -> Optional[ProofPresentation]:
        """Presentation answering ``request``, or None when the wallet has nothing to show."""
        entry = self._select_credential(request)
        if entry is None:
            return None
        return present_proof(entry.credential, entry.link_secret, request, self.rng)

    # ------------------------------------------------------------------ proofs

    def request_proof(self, connection_id: str, policy: TrustPolicy) -> str:
        with self._lock:
            request = ProofRequest.fresh(policy.required_schema_id, policy.requested_attributes,
                                         policy.required_issuer_dids, self.rng, policy.attribute_predicates)
            key = b64url_encode(request.verifier_nonce)
            out = self._envelope_for(connection_id, {"type": "present-proof/request",
                                                     "request": request.to_json()})
            self.proofs[key] = PendingProof(connection_id, request)
        self._send([out])
        return key

    def proof_result(self, key: str) -> Optional[VerificationResult]:
        with self._lock:
            pending = self.proofs.get(key)
            return pending.result if pending else None

    def expire_proof_request(self, key: str) -> bool:
        """Fail a still-unanswered proof request closed; True if it timed out."""
        with self._lock:
            pending = self.proofs.get(key)
            if pending is None or pending.result is not None or pending.timed_out:
                return False
            pending.timed_out = True
            self.clock.advance(self.proof_timeout)
            event = WebhookEvent("proof", {"connection_id": pending.connection_id, "state": "timeout",
                                           "timeout_seconds": self.proof_timeout})
        self._publish([event])
        return True

    def is_trusted(self, connection_id: str) -> bool:
        """Trusted and the presented credential has not been revoked since."""
        with self._lock:
            record = self.connections.get(connection_id)
            if record is None or record.state != "trusted" or record.trust_revoked:
                return False
            if record.presented_credential is not None:
                issuer, revocation_id = record.presented_credential
                registry = self.ledger.registry_for(issuer)
                if registry is None or registry.is_revoked(revocation_id):
                    record.trust_revoked = True
                    return False
            return True

    def trusted_connections(self) -> List[str]:
        return [cid for cid in self.connections if self.is_trusted(cid)]

    # ------------------------------------------------------------------- model

    def send_model(self, connection_id: str, model: bytes, round_index: int = 0,
                   config: Optional[Dict[str, Any]] = None) -> None:
        with self._lock:
            if not self.is_trusted(connection_id):
                raise UntrustedConnection(f"{self.name}: connection {connection_id} is not trusted")
            out = self._envelope_for(connection_id, {"type": "fl/model", "round": round_index,
                                                     "config": config or {}, "model": b64url_encode(model)})
        self._send([out])

    # ----------------------------------------------------------------- inbound

    def _on_frame(self, payload: bytes) -> None:
        try:
            env = EncryptedEnvelope.decode(payload)
        except crypto.CryptoError as exc:
            self._publish([WebhookEvent("problem_report", {"error": "MalformedEnvelope", "detail": str(exc)})])
            return
        with self._lock:
            events, outbound = self.handle_message(env)
        self._publish(events)
        try:
            self._send(outbound)
        except TransportError as exc:
            self._publish([WebhookEvent("problem_report", {"error": "Unreachable", "detail": str(exc)})])

    def _open(self, env: EncryptedEnvelope) -> Tuple[Optional[str], bytes, bytes]:
        """(connection id or None, sender signing key, plaintext)."""
        connection_id = self._by_peer_key.get(env.sender_hint)
        sender_key = b64url_decode(env.sender_hint)
        if connection_id is not None:
            return connection_id, sender_key, crypto.open(self._conn_keys[connection_id], sender_key, env)
        # first contact: only an open invitation can decrypt it
        failure: Exception = crypto.DecryptFailure("no open invitation accepts this envelope")
        for cid in self._invitation_conns:
            try:
                return None, sender_key, crypto.open(self._conn_keys[cid], sender_key, env)
            except crypto.DecryptFailure as exc:
                failure = exc
        raise failure

    def handle_message(
        self, env: EncryptedEnvelope
    ) -> Tuple[List[WebhookEvent], List[Tuple[Endpoint, EncryptedEnvelope]]]:
        """Process one inbound envelope; exactly one webhook event comes out."""
        with self._lock:
            replay_key = (env.sender_hint, env.nonce)
            if replay_key in self._seen_nonces:
                return [WebhookEvent("problem_report", {"error": "Replay", "detail": "duplicate nonce"})], []
            try:
                connection_id, sender_key, plaintext = self._open(env)
            except (crypto.CryptoError, ValueError) as exc:
                return [WebhookEvent("problem_report", {"error": type(exc).__name__, "detail": str(exc)})], []
            self._seen_nonces.add(replay_key)
            try:
                message = json.loads(plaintext.decode("utf-8"))
                if not isinstance(message, dict) or not isinstance(message.get("type"), str):
                    raise ValueError("message has no type")
            except (UnicodeDecodeError, ValueError) as exc:
                return [WebhookEvent("problem_report", {"connection_id": connection_id, "error": "BadPayload",
                                                        "detail": str(exc)})], []
            kind = message["type"]
            handler = self._HANDLERS.get(kind)
            if handler is None:
                return [WebhookEvent("problem_report", {"connection_id": connection_id, "error": "UnknownType",
                                                        "detail": kind})], []
            if connection_id is None and kind != "connections/request":
                return [WebhookEvent("problem_report", {"error": "UnknownSender", "detail": kind})], []
            try:
                return handler(self, connection_id, sender_key, message)
            except Exception as exc:  # a bad message never takes the agent down
                logger.debug("%s: %s failed", self.name, kind, exc_info=True)
                return [WebhookEvent("problem_report", {"connection_id": connection_id, "error": type(exc).__name__,
                                                        "detail": str(exc), "message_type": kind})], []

    def _on_connection_request(self, _cid, sender_key, message):
        token = message["token"]
        if token in self._used_tokens or token not in self._invitations:
            report = {"error": "InvalidInvitation", "detail": "unknown or used token"}
            return [WebhookEvent("problem_report", report)], []
        doc = DidDocument.from_json(message["did_doc"])
        if doc.signing_key != sender_key:
            raise AgentError("request DID document does not match the sender key")
        doc.validate(require_agent_service=True)
        connection_id = self._invitations.pop(token)
        self._used_tokens.add(token)
        record = self.connections[connection_id]
        self.peer_store.add(doc)
        record.their_did = str(doc.id)
        record.their_endpoint = doc.agent_endpoint
        record.their_label = str(message.get("label", ""))
        self._by_peer_key[crypto.key_hint(sender_key)] = connection_id
        keys = self._conn_keys[connection_id]
        _did, my_doc = create_peer_did(keys, self.config.endpoint.uri)
        reply = self._seal(keys, doc.signing_key, {"type": "connections/response", "did_doc": my_doc.to_json(),
                                                    "label": self.name})
        transition = self._transition(record, "responded")
        event = WebhookEvent("connection", {**record.to_json(), "transition": transition})
        return [event], [(Endpoint.parse(doc.agent_endpoint), reply)]

    def _on_connection_response(self, cid, sender_key, message):
        record = self.connections[cid]
        if record.state != "requested":
            raise AgentError(f"unexpected response in state {record.state}")
        doc = DidDocument.from_json(message["did_doc"])
        if str(doc.id) != record.their_did or doc.signing_key != sender_key:
            raise AgentError("response DID document does not match the invitation")
        self.peer_store.add(doc)
        record.their_endpoint = doc.agent_endpoint
        record.their_label = str(message.get("label", record.their_label))
        transition = self._transition(record, "active")
        reply = self._envelope_for(cid, {"type": "connections/complete"})
        return [WebhookEvent("connection", {**record.to_json(), "transition": transition})], [reply]

    def _on_connection_complete(self, cid, _sender_key, _message):
        record = self.connections[cid]
        if record.state != "responded":
            raise AgentError(f"unexpected completion in state {record.state}")
        transition = self._transition(record, "active")
        return [WebhookEvent("connection", {**record.to_json(), "transition": transition})], []

    def _on_credential_offer(self, cid, _sender_key, message):
        self._peer(cid)
        blinded = self.link_secret.reblind(self.rng)
        offer_id = message["offer_id"]
        self._pending_blinding[offer_id] = blinded
        reply = self._envelope_for(cid, {"type": "issue-credential/request", "offer_id": offer_id,
                                         "link_commitment": element_to_b64(commit_link_secret(blinded))})
        event = WebhookEvent("credential", {"connection_id": cid, "state": "offer_received",
                                            "schema_id": message.get("schema_id"), "offer_id": offer_id})
        return [event], [reply]

    def _on_credential_request(self, cid, _sender_key, message):
        offer_id = message["offer_id"]
        offer = self._pending_offers.get(offer_id)
        if offer is None or offer[0] != cid:
            raise AgentError("credential request for an unknown offer")
        del self._pending_offers[offer_id]
        _conn, schema_id, attributes, expiry = offer
        credential = issue_credential(self.public_keys, self.public_did, self.ledger.schema(schema_id), attributes,
                                      element_from_b64(message["link_commitment"]), expiry, self.registry, self.rng)
        reply = self._envelope_for(cid, {"type": "issue-credential/issue", "offer_id": offer_id,
                                         "credential": credential.to_json()})
        event = WebhookEvent("credential", {"connection_id": cid, "state": "issued", "offer_id": offer_id,
                                            "schema_id": schema_id, "revocation_id": credential.revocation_id})
        return [event], [reply]

    def _on_credential_issue(self, cid, _sender_key, message):
        blinded = self._pending_blinding.pop(message["offer_id"])
        credential = Credential.from_json(message["credential"])
        issuer_doc = resolve(self.ledger, credential.issuer_did)
        if not crypto.verify(issuer_doc.signing_key, credential.signed_payload(), credential.issuer_signature):
            raise AgentError("issued credential does not verify under the issuer's public DID")
        self.store_credential(credential, blinded)
        event = WebhookEvent("credential", {"connection_id": cid, "state": "stored",
                                            "schema_id": credential.schema_id, "issuer_did": credential.issuer_did})
        return [event], []

    def _on_proof_request(self, cid, _sender_key, message):
        self._peer(cid)
        request = ProofRequest.from_json(message["request"])
        presentation = self.build_presentation(request)
        if presentation is None:
            # nothing to show: stay silent and let the verifier time out
            return [WebhookEvent("proof", {"connection_id": cid, "state": "request_received",
                                           "error": "no matching credential"})], []
        reply = self._envelope_for(cid, {"type": "present-proof/presentation",
                                         "nonce": b64url_encode(request.verifier_nonce),
                                         "presentation": presentation.to_json()})
        return [WebhookEvent("proof", {"connection_id": cid, "state": "presentation_sent",
                                       "schema_id": request.requested_schema_id})], [reply]

    def _on_presentation(self, cid, _sender_key, message):
        key = message["nonce"]
        pending = self.proofs.get(key)
        if pending is None or pending.connection_id != cid or pending.result is not None or pending.timed_out:
            raise AgentError("presentation does not answer an open proof request")
        presentation = ProofPresentation.from_json(message["presentation"])
        issuer = presentation.credential_view.issuer_did
        result = verify_presentation(self.ledger, self.ledger.registry_for(issuer), pending.request,
                                     presentation, self.clock.now())
        pending.result = result
        payload: Dict[str, Any] = {"connection_id": cid, "state": "verified", "verification": result.to_json()}
        record = self.connections[cid]
        if result.overall and record.state == "active":
            record.presented_credential = (issuer, presentation.revocation_id)
            payload["transition"] = self._transition(record, "trusted")
        return [WebhookEvent("proof", payload)], []

    def _on_basicmessage(self, cid, _sender_key, message):
        return [WebhookEvent("basicmessage", {"connection_id": cid, "content": message.get("content", "")})], []

    def _on_model(self, cid, _sender_key, message):
        if not self.is_trusted(cid):
            raise UntrustedConnection("model received over an untrusted connection")
        if self.model_trainer is None:
            raise AgentError(f"{self.name} has no training data")
        trained = self.model_trainer(b64url_decode(message["model"]), dict(message.get("config", {})))
        reply = self._envelope_for(cid, {"type": "fl/model-result", "round": message.get("round", 0),
                                         "model": b64url_encode(trained)})
        return [WebhookEvent("model", {"connection_id": cid, "state": "trained",
                                       "round": message.get("round", 0)})], [reply]

    def _on_model_result(self, cid, _sender_key, message):
        if not self.is_trusted(cid):
            raise UntrustedConnection("model result received over an untrusted connection")
        entry = {"connection_id": cid, "round": int(message.get("round", 0)), "model": b64url_decode(message["model"])}
        self.model_inbox.append(entry)
        return [WebhookEvent("model", {"connection_id": cid, "state": "received", "round": entry["round"],
                                       "model": message["model"]})], []

    _HANDLERS = {
        "connections/request": _on_connection_request,
        "connections/response": _on_connection_response,
        "connections/complete": _on_connection_complete,
        "issue-credential/offer": _on_credential_offer,
        "issue-credential/request": _on_credential_request,
        "issue-credential/issue": _on_credential_issue,
        "present-proof/request": _on_proof_request,
        "present-proof/presentation": _on_presentation,
        "basicmessage": _on_basicmessage,
        "fl/model": _on_model,
        "fl/model-result": _on_model_result,
    }

    # ------------------------------------------------------------------- admin

    def admin_command(self, command: Union[str, bytes, dict]) -> str:
        """Execute one JSON admin request and return the JSON response."""
        try:
            request = json.loads(command) if isinstance(command, (str, bytes)) else dict(command)
            verb = request.get("command")
            if verb not in ADMIN_COMMANDS:
                raise UnknownCommand(f"unknown command {verb!r}")
            result = getattr(self, f"_admin_{verb}")(request)
            response = {"ok": True, "result": result}
        except Exception as exc:
            response = {"ok": False, "error": {"type": type(exc).__name__, "message": str(exc)}}
        return json.dumps(response, sort_keys=True)

    def _admin_list_connections(self, _req):
        with self._lock:
            return [r.to_json() for r in self.connections.values()]

    def _admin_create_invitation(self, _req):
        return self.create_invitation().to_json()

    def _admin_accept_invitation(self, req):
        return self.accept_invitation(req["invitation"]).to_json()

    def _admin_issue_credential(self, req):
        offer_id = self.offer_credential(req["connection_id"], req["schema_id"], dict(req["attributes"]),
                                         req.get("expiry"))
        return {"offer_id": offer_id}

    def _admin_request_proof(self, req):
        policy = TrustPolicy(req["schema_id"], frozenset(req["required_issuer_dids"]),
                             tuple(req.get("requested_attributes", ())), dict(req.get("predicates", {})))
        return {"request_id": self.request_proof(req["connection_id"], policy)}

    def _admin_send_model(self, req):
        self.send_model(req["connection_id"], b64url_decode(req["model"]), int(req.get("round", 0)),
                        req.get("config"))
        return {"sent": True}

    def _admin_get_trusted(self, _req):
        return self.trusted_connections()

    def close(self) -> None:
        self.listener.close()


def handle_message(agent: Agent, env: EncryptedEnvelope):
    return agent.handle_message(env)


def create_invitation(agent: Agent) -> Invitation:
    return agent.create_invitation()


def admin_command(agent: Agent, command: Union[str, bytes, dict]) -> str:
    return agent.admin_command(command)


class Controller:
    """Business-logic side of an agent: admin requests out, webhook events in."""

    def __init__(self, agent: Agent) -> None:
        self._agent = agent
        self.name = agent.name
        self.events: List[WebhookEvent] = []
        agent.subscribe(self.events.append)

    def call(self, command: str, **params) -> Any:
        response = json.loads(self._agent.admin_command({"command": command, **params}))
        if not response["ok"]:
            raise AgentError(f"{self.name} {command}: {response['error']['type']}: {response['error']['message']}")
        return response["result"]

    def events_for(self, topic: str) -> List[WebhookEvent]:
        return [e for e in self.events if e.topic == topic]


def connect(inviter: Agent, invitee: Agent, timeout: float = 10.0) -> Tuple[str, str]:
    """Run a DID exchange; returns (inviter connection id, invitee connection id)."""
    invitation = Controller(inviter).call("create_invitation")
    record = invitee.accept_invitation(invitation)
    if not invitee.transport.wait_idle(timeout):
        raise ConnectionFailed("DID exchange did not settle")
    theirs = invitee.connections[record.connection_id]
    if theirs.state != "active":
        raise ConnectionFailed(f"{invitee.name} stuck in {theirs.state}")
    mine = inviter.connection_to(invitee)
    if mine.state != "active":
        raise ConnectionFailed(f"{inviter.name} stuck in {mine.state}")
    return mine.connection_id, theirs.connection_id


def _verify_direction(verifier: Agent, connection_id: str, policy: TrustPolicy,
                      timeout: float) -> Tuple[bool, Optional[VerificationResult]]:
    try:
        key = verifier.request_proof(connection_id, policy)
    except TransportError:
        return False, None
    verifier.transport.wait_idle(timeout)
    result = verifier.proof_result(key)
    if result is None:
        verifier.expire_proof_request(key)
        return False, None
    return verifier.is_trusted(connection_id), result


def establish_trust(
    initiator: Agent,
    responder: Agent,
    initiator_policy: TrustPolicy,
    responder_policy: TrustPolicy,
    timeout: float = DEFAULT_PROOF_TIMEOUT,
) -> Tuple[bool, bool]:
    """Mutual proof exchange over an existing connection.

    The responder (the coordinator in the hospital scenario) verifies the
    initiator first, then the initiator verifies the responder. Both
    directions always run and are decided independently.
    """
    init_record = initiator.connection_to(responder)
    resp_record = responder.connection_to(initiator)
    for record in (init_record, resp_record):
        if record.state not in ("active", "trusted"):
            raise AgentError(f"connection {record.connection_id} is {record.state}, not active")
    responder_trusts, _ = _verify_direction(responder, resp_record.connection_id, responder_policy, timeout)
    initiator_trusts, _ = _verify_direction(initiator, init_record.connection_id, initiator_policy, timeout)
    return initiator_trusts, responder_trusts


# ------------------------------------------------------------- socket surfaces

_LEN = struct.Struct(">I")


def _read_frame(sock: socket.socket) -> Optional[bytes]:
    header = sock.recv(_LEN.size, socket.MSG_WAITALL)
    if len(header) != _LEN.size:
        return None
    (size,) = _LEN.unpack(header)
    data = b""
    while len(data) < size:
        chunk = sock.recv(size - len(data))
        if not chunk:
            return None
        data += chunk
    return data


def _write_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(_LEN.pack(len(data)) + data)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class AdminServer:
    """Serves ``admin_command`` as length-prefixed JSON on the admin port."""

    def __init__(self, agent: Agent, port: Optional[int] = None) -> None:
        port = agent.config.admin_port if port is None else port

        class _Handle(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                while True:
                    request = _read_frame(self.request)
                    if request is None:
                        return
                    _write_frame(self.request, agent.admin_command(request).encode("utf-8"))

        self.server = _Server((agent.config.host, port), _Handle)
        self.address = self.server.server_address
        self._thread = threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True,
                                        name=f"admin-{agent.name}")
        self._thread.start()

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


def admin_request(host: str, port: int, command: dict, timeout: float = 5.0) -> dict:
    with socket.create_connection((host, port), timeout=timeout) as sock:
        _write_frame(sock, json.dumps(command).encode("utf-8"))
        reply = _read_frame(sock)
    if reply is None:
        raise AgentError("admin server closed the connection")
    return json.loads(reply)


class WebhookReceiver:
    """Controller-side listener for webhook frames posted by an agent."""

    def __init__(self, host: str, port: int) -> None:
        self.events: List[WebhookEvent] = []
        self._cond = threading.Condition()
        receiver = self

        class _Handle(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                while True:
                    data = _read_frame(self.request)
                    if data is None:
                        return
                    doc = json.loads(data)
                    with receiver._cond:
                        receiver.events.append(WebhookEvent(doc["topic"], doc["payload"]))
                        receiver._cond.notify_all()

        self.server = _Server((host, port), _Handle)
        self.address = self.server.server_address
        self._thread = threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True,
                                        name=f"webhook-{port}")
        self._thread.start()

    def wait_for(self, count: int, timeout: float = 5.0) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: len(self.events) >= count, timeout)

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


class WebhookPoster:
    """Agent-side subscriber that forwards every event to a webhook port."""

    def __init__(self, host: str, port: int, timeout: float = 5.0) -> None:
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._lock = threading.Lock()

    def __call__(self, event: WebhookEvent) -> None:
        with self._lock:
            _write_frame(self._sock, json.dumps(event.to_json(), sort_keys=True).encode("utf-8"))

    def close(self) -> None:
        self._sock.close()
