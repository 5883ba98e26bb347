"""Decentralized identifiers, DID documents and the stores that resolve them.

Identifiers are self-certifying: the method-specific part is the base58
encoding of the first 16 bytes of SHA-256 over the Ed25519 authentication
key, so any holder of a document can check the binding without trusting the
store it came from.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import base58

from .crypto import KeyPair

ED25519_KEY_TYPE = "Ed25519VerificationKey2018"
AGENT_SERVICE = "AgentService"
CONTEXT = "https://w3id.org/did/v1"


class DidError(Exception):
    pass


class NotFound(DidError, LookupError):
    pass


class DuplicateDid(DidError):
    pass


class InvalidDocument(DidError, ValueError):
    pass


def did_identifier(signing_public: bytes) -> str:
    return base58.b58encode(hashlib.sha256(signing_public).digest()[:16]).decode("ascii")


@dataclass(frozen=True, order=True)
class Did:
    method: str
    identifier: str

    def __str__(self) -> str:
        return f"did:{self.method}:{self.identifier}"

    @classmethod
    def parse(cls, text: Union[str, "Did"]) -> "Did":
        if isinstance(text, Did):
            return text
        parts = text.split(":", 2)
        if len(parts) != 3 or parts[0] != "did" or not parts[1] or not parts[2]:
            raise ValueError(f"not a DID: {text!r}")
        return cls(parts[1], parts[2])

    @classmethod
    def from_key(cls, signing_public: bytes, method: str = "peer") -> "Did":
        if not method.isascii() or not method.isalnum():
            raise ValueError("DID method must be a short ASCII token")
        return cls(method, did_identifier(signing_public))


@dataclass(frozen=True)
class PublicKeyEntry:
    id: str
    type: str
    key: bytes


@dataclass(frozen=True)
class ServiceEntry:
    id: str
    type: str
    endpoint: str


@dataclass(frozen=True)
class DidDocument:
    id: Did
    public_keys: Tuple[PublicKeyEntry, ...]
    authentication: Tuple[str, ...]
    service_endpoints: Tuple[ServiceEntry, ...] = ()

    def key(self, key_id: str) -> PublicKeyEntry:
        for entry in self.public_keys:
            if entry.id == key_id:
                return entry
        raise KeyError(key_id)

    @property
    def signing_key(self) -> bytes:
        """Ed25519 key named by the first authentication entry."""
        if not self.authentication:
            raise InvalidDocument(f"{self.id} has no authentication key")
        return self.key(self.authentication[0]).key

    @property
    def agent_endpoint(self) -> str:
        for svc in self.service_endpoints:
            if svc.type == AGENT_SERVICE:
                return svc.endpoint
        raise InvalidDocument(f"{self.id} has no {AGENT_SERVICE} endpoint")

    def validate(self, require_agent_service: bool = False) -> None:
        key_ids = [k.id for k in self.public_keys]
        if len(set(key_ids)) != len(key_ids):
            raise InvalidDocument("duplicate public key ids")
        if not self.authentication:
            raise InvalidDocument("authentication list is empty")
        for ref in self.authentication:
            if ref not in key_ids:
                raise InvalidDocument(f"authentication references unknown key {ref}")
        auth = self.key(self.authentication[0])
        if auth.type != ED25519_KEY_TYPE or len(auth.key) != 32:
            raise InvalidDocument(f"unsupported authentication key type {auth.type}")
        if did_identifier(auth.key) != self.id.identifier:
            raise InvalidDocument(f"{self.id} is not bound to its authentication key")
        if require_agent_service and not any(s.type == AGENT_SERVICE for s in self.service_endpoints):
            raise InvalidDocument(f"{self.id} has no {AGENT_SERVICE} endpoint")

    def to_json(self) -> dict:
        did = str(self.id)
        return {
            "@context": CONTEXT,
            "id": did,
            "publicKey": [
                {
                    "id": k.id,
                    "type": k.type,
                    "controller": did,
                    "publicKeyBase58": base58.b58encode(k.key).decode("ascii"),
                }
                for k in self.public_keys
            ],
            "authentication": list(self.authentication),
            "service": [
                {"id": s.id, "type": s.type, "serviceEndpoint": s.endpoint}
                for s in self.service_endpoints
            ],
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, doc: dict) -> "DidDocument":
        try:
            did = Did.parse(doc["id"])
            keys = tuple(
                PublicKeyEntry(k["id"], k["type"], base58.b58decode(k["publicKeyBase58"]))
                for k in doc.get("publicKey", [])
            )
            auth = tuple(a if isinstance(a, str) else a["id"] for a in doc.get("authentication", []))
            services = tuple(
                ServiceEntry(s["id"], s["type"], s["serviceEndpoint"]) for s in doc.get("service", [])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidDocument(f"malformed DID document: {exc}") from None
        return cls(did, keys, auth, services)


def create_did(keys: KeyPair, endpoint: Optional[str], method: str = "peer") -> Tuple[Did, DidDocument]:
    did = Did.from_key(keys.signing_public, method)
    key_id = f"{did}#keys-1"
    services: Tuple[ServiceEntry, ...] = ()
    if endpoint:
        services = (ServiceEntry(f"{did}#agent", AGENT_SERVICE, endpoint),)
    doc = DidDocument(
        id=did,
        public_keys=(PublicKeyEntry(key_id, ED25519_KEY_TYPE, keys.signing_public),),
        authentication=(key_id,),
        service_endpoints=services,
    )
    doc.validate()
    return did, doc


def create_peer_did(keys: KeyPair, endpoint: str) -> Tuple[Did, DidDocument]:
    if not endpoint:
        raise ValueError("peer DIDs need a service endpoint")
    return create_did(keys, endpoint, method="peer")


@dataclass(frozen=True)
class LedgerWrite:
    seq: int
    did: str
    document_hash: str


class PublicLedger:
    """Append-only in-memory stand-in for a public DID ledger.

    Besides DID documents it keeps credential schemas and revocation
    registries, which are published the same way and also never replaced.
    """

    def __init__(self) -> None:
        self._entries: Dict[str, DidDocument] = {}
        self._log: List[LedgerWrite] = []
        self._schemas: Dict[str, object] = {}
        self._registries: Dict[str, object] = {}
        self._lock = threading.Lock()

    @property
    def audit_log(self) -> Tuple[LedgerWrite, ...]:
        return tuple(self._log)

    def __contains__(self, did) -> bool:
        return str(did) in self._entries

    def get(self, did: str) -> Optional[DidDocument]:
        return self._entries.get(did)

    def write(self, doc: DidDocument) -> None:
        doc.validate()
        key = str(doc.id)
        with self._lock:
            if key in self._entries:
                raise DuplicateDid(key)
            self._entries[key] = doc
            digest = hashlib.sha256(doc.canonical_bytes()).hexdigest()
            self._log.append(LedgerWrite(len(self._log), key, digest))

    def register_schema(self, schema) -> None:
        with self._lock:
            if schema.schema_id in self._schemas:
                raise DidError(f"schema {schema.schema_id} already published")
            self._schemas[schema.schema_id] = schema

    def schema(self, schema_id: str):
        try:
            return self._schemas[schema_id]
        except KeyError:
            raise NotFound(f"schema {schema_id}") from None

    def publish_registry(self, issuer_did, registry) -> None:
        key = str(issuer_did)
        with self._lock:
            if key in self._registries:
                raise DidError(f"{key} already has a revocation registry")
            self._registries[key] = registry

    def registry_for(self, issuer_did):
        """Revocation registry published by ``issuer_did``, or None."""
        return self._registries.get(str(issuer_did))


@dataclass
class PeerDidStore:
    """Pairwise DID documents one agent learned through DID exchange."""

    owner: str = ""
    _entries: Dict[str, DidDocument] = field(default_factory=dict)

    def __contains__(self, did) -> bool:
        return str(did) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, did: str) -> Optional[DidDocument]:
        return self._entries.get(did)

    def add(self, doc: DidDocument) -> None:
        doc.validate(require_agent_service=True)
        key = str(doc.id)
        existing = self._entries.get(key)
        if existing is not None and existing != doc:
            raise DuplicateDid(f"{key} already stored with a different document")
        self._entries[key] = doc


def register_public_did(ledger: PublicLedger, doc: DidDocument) -> None:
    ledger.write(doc)


def resolve(source: Union[PublicLedger, PeerDidStore], did: Union[Did, str]) -> DidDocument:
    key = str(did)
    doc = source.get(key)
    if doc is None:
        raise NotFound(key)
    doc.validate()
    return doc
