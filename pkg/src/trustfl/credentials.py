"""Verifiable credentials with a blinded link secret.

Issuers sign a canonical encoding of salted attribute digests together with
a Pedersen commitment to the holder's link secret. Holders disclose a subset
of attributes (the rest stay as digests) and prove knowledge of the
committed secret with a Fiat-Shamir Schnorr proof bound to the verifier's
nonce. Revocation is a grow-only set of revocation ids.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, FrozenSet, Iterable, Mapping, Optional, Sequence, Tuple, Union

from . import crypto
from .crypto import KeyPair, Signature, b64url_decode, b64url_encode, canonical_json
from .did import Did, NotFound, PublicLedger, resolve
from .randomness import RandomSource, SystemRandom

# 2048-bit prime modulus with a 256-bit prime-order subgroup generated by G.
P = int(
    "bf8c163d07ce232f06dbe55dd291683129b6884fba24dc71911be709a9b4b8abaefc87918fc516bb86f00e89efb6872f"
    "7338bdcee9b5203efa0f2a8529d60a5f0fb6e51c1e6b30b559432be97f485536502a28041970ff563ad9c05ebac04571"
    "72d12be953fdbe9f4081cb63fc9b6101ca313980bc995da71faaf4eb642cd0289e187b594e89f77cde7c38f74b5a4c2a"
    "cf80fef17feb8144050bcdbb8dce9a24fe3a25a03e4df4b28f1bd3bf638cb1c556b19c4cdb802f835db8938cd37c896c"
    "b0c5ecfa093dc0edda993260b8369c56a6007ee42aa8d2b355b4a03fa84877408f07014fd6dc9a5c0310670420c6486f"
    "d7551decd886bc50dab212cfa08dba31",
    16,
)
Q = int("968a1029767ad8e991e5072f117e2f046cee2e9ec9be279328b62fee677611a3", 16)
G = int(
    "6a1e242bebc6debad5db14b47667d740edf0437ae7787a2cb8b6505e702375632e3fc0a6458aa0be5be5c9937ab52225"
    "5e5379c43b1b57bdf0746dbd8604157a635ee2b5456f391df56008f679aeed4c1cfc76217c21f7c70f7d5aa7360c1719"
    "6109de26c44cd73379b34f52627f56bf021f7e873d2dd814f81422c7b235680b5c8e7225014ba6082f7b621b54eec5b0"
    "4093a6dce220264b272bcff63f86b8cf09ee2276d7692d6b57b8cf1b6b22ab497e07dcf1cd8fa1a57b752c8a911e2f41"
    "73f3730ecd0b5db4fec2df28fc5706cfa7325d46d577dd5aa02c073110d724030ba4d38f75a12722fef2552e8a587388"
    "d471b738c4e92af7c9f98824a7c6eadb",
    16,
)
ELEMENT_SIZE = (P.bit_length() + 7) // 8
SCALAR_SIZE = (Q.bit_length() + 7) // 8


def _derive_generator(label: bytes) -> int:
    # nothing-up-my-sleeve second generator: nobody knows log_G(H)
    counter = 0
    while True:
        seed = hashlib.shake_256(label + counter.to_bytes(4, "big")).digest(ELEMENT_SIZE + 16)
        h = pow(int.from_bytes(seed, "big") % P, (P - 1) // Q, P)
        if h not in (0, 1):
            return h
        counter += 1


H = _derive_generator(b"trustfl/pedersen/H")

CREDENTIAL_DOMAIN = b"trustfl/credential/v1\n"
PROOF_DOMAIN = b"trustfl/link-proof/v1\n"


class CredentialError(Exception):
    pass


class SchemaMismatch(CredentialError, ValueError):
    pass


class UnknownAttribute(CredentialError, KeyError):
    pass


class CommitmentMismatch(CredentialError):
    pass


def is_group_element(x: int) -> bool:
    return 1 < x < P and pow(x, Q, P) == 1


def element_to_b64(x: int) -> str:
    return b64url_encode(x.to_bytes(ELEMENT_SIZE, "big"))


def element_from_b64(text: str) -> int:
    raw = b64url_decode(text)
    if len(raw) != ELEMENT_SIZE:
        raise ValueError("group element has wrong length")
    return int.from_bytes(raw, "big")


def scalar_to_b64(x: int) -> str:
    return b64url_encode(x.to_bytes(SCALAR_SIZE, "big"))


def scalar_from_b64(text: str) -> int:
    raw = b64url_decode(text)
    if len(raw) != SCALAR_SIZE:
        raise ValueError("scalar has wrong length")
    return int.from_bytes(raw, "big")


def parse_timestamp(value: Union[str, datetime]) -> datetime:
    if isinstance(value, datetime):
        ts = value
    else:
        ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def format_timestamp(value: Union[str, datetime]) -> str:
    return parse_timestamp(value).astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class CredentialSchema:
    schema_id: str
    name: str
    version: str
    attribute_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.attribute_names)
        object.__setattr__(self, "attribute_names", names)
        if not names:
            raise ValueError("schema needs at least one attribute")
        if len(set(names)) != len(names):
            raise ValueError("schema attribute names must be unique")

    @classmethod
    def create(cls, issuer_did: Union[Did, str], name: str, version: str, attribute_names: Iterable[str]):
        # Indy-style id: <issuer did>:2:<name>:<version>
        return cls(f"{issuer_did}:2:{name}:{version}", name, version, tuple(attribute_names))


@dataclass(frozen=True)
class LinkSecret:
    secret: int
    blinding: int

    def __post_init__(self) -> None:
        if not (0 <= self.secret < Q and 0 <= self.blinding < Q):
            raise ValueError("link secret scalars out of range")

    def __repr__(self) -> str:
        return "LinkSecret(<hidden>)"

    @classmethod
    def generate(cls, rng: Optional[RandomSource] = None) -> "LinkSecret":
        rng = rng or SystemRandom()
        return cls(1 + rng.randbelow(Q - 1), rng.randbelow(Q))

    def reblind(self, rng: Optional[RandomSource] = None) -> "LinkSecret":
        """Same secret under a fresh per-credential blinding nonce."""
        rng = rng or SystemRandom()
        return LinkSecret(self.secret, rng.randbelow(Q))


def commit_link_secret(secret: LinkSecret) -> int:
    return pow(G, secret.secret, P) * pow(H, secret.blinding, P) % P


def attribute_digest(name: str, value: str, salt: bytes) -> str:
    data = salt + b"\x00" + name.encode("utf-8") + b"\x00" + value.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def _signed_payload(
    schema_id: str,
    issuer_did: str,
    digests: Mapping[str, str],
    link_commitment: int,
    revocation_id: str,
    expiry: Optional[str],
) -> bytes:
    return CREDENTIAL_DOMAIN + canonical_json(
        {
            "attributes": dict(digests),
            "expiry": expiry,
            "issuer_did": issuer_did,
            "link_commitment": element_to_b64(link_commitment),
            "revocation_id": revocation_id,
            "schema_id": schema_id,
        }
    )


@dataclass(frozen=True)
class Credential:
    schema_id: str
    issuer_did: str
    attributes: Dict[str, str]
    salts: Dict[str, bytes]
    link_commitment: int
    revocation_id: str
    expiry: Optional[str]
    issuer_signature: Signature

    def digests(self) -> Dict[str, str]:
        return {n: attribute_digest(n, v, self.salts[n]) for n, v in self.attributes.items()}

    def signed_payload(self) -> bytes:
        return _signed_payload(
            self.schema_id, self.issuer_did, self.digests(), self.link_commitment, self.revocation_id, self.expiry
        )

    def to_json(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "issuer_did": self.issuer_did,
            "attributes": dict(self.attributes),
            "salts": {n: b64url_encode(s) for n, s in self.salts.items()},
            "link_commitment": element_to_b64(self.link_commitment),
            "revocation_id": self.revocation_id,
            "expiry": self.expiry,
            "issuer_signature": b64url_encode(self.issuer_signature.bytes),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Credential":
        return cls(
            schema_id=doc["schema_id"],
            issuer_did=doc["issuer_did"],
            attributes=dict(doc["attributes"]),
            salts={n: b64url_decode(s) for n, s in doc["salts"].items()},
            link_commitment=element_from_b64(doc["link_commitment"]),
            revocation_id=doc["revocation_id"],
            expiry=doc.get("expiry"),
            issuer_signature=Signature(b64url_decode(doc["issuer_signature"])),
        )


@dataclass(frozen=True)
class ProofRequest:
    requested_schema_id: str
    requested_attributes: Tuple[str, ...]
    verifier_nonce: bytes
    required_issuer_dids: FrozenSet[str]
    attribute_predicates: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "requested_attributes", tuple(self.requested_attributes))
        object.__setattr__(self, "required_issuer_dids", frozenset(str(d) for d in self.required_issuer_dids))
        if len(self.verifier_nonce) != 32:
            raise ValueError("verifier nonce must be 32 bytes")

    @classmethod
    def fresh(
        cls,
        schema_id: str,
        requested_attributes: Sequence[str],
        required_issuer_dids: Iterable[Union[Did, str]],
        rng: Optional[RandomSource] = None,
        predicates: Optional[Mapping[str, str]] = None,
    ) -> "ProofRequest":
        rng = rng or SystemRandom()
        return cls(schema_id, tuple(requested_attributes), rng.randbytes(32),
                   frozenset(str(d) for d in required_issuer_dids), dict(predicates or {}))

    def to_json(self) -> dict:
        return {
            "requested_schema_id": self.requested_schema_id,
            "requested_attributes": list(self.requested_attributes),
            "verifier_nonce": b64url_encode(self.verifier_nonce),
            "required_issuer_dids": sorted(self.required_issuer_dids),
            "attribute_predicates": dict(self.attribute_predicates),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ProofRequest":
        return cls(
            doc["requested_schema_id"],
            tuple(doc["requested_attributes"]),
            b64url_decode(doc["verifier_nonce"]),
            frozenset(doc["required_issuer_dids"]),
            dict(doc.get("attribute_predicates", {})),
        )


@dataclass(frozen=True)
class CredentialView:
    """Credential with only the requested attributes in the clear."""

    schema_id: str
    issuer_did: str
    revealed: Dict[str, str]
    revealed_salts: Dict[str, bytes]
    hidden_digests: Dict[str, str]
    link_commitment: int
    revocation_id: str
    expiry: Optional[str]
    issuer_signature: Signature

    def digests(self) -> Dict[str, str]:
        out = dict(self.hidden_digests)
        for name, value in self.revealed.items():
            out[name] = attribute_digest(name, value, self.revealed_salts[name])
        return out

    def signed_payload(self) -> bytes:
        return _signed_payload(
            self.schema_id, self.issuer_did, self.digests(), self.link_commitment, self.revocation_id, self.expiry
        )

    def to_json(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "issuer_did": self.issuer_did,
            "revealed": dict(self.revealed),
            "revealed_salts": {n: b64url_encode(s) for n, s in self.revealed_salts.items()},
            "hidden_digests": dict(self.hidden_digests),
            "link_commitment": element_to_b64(self.link_commitment),
            "revocation_id": self.revocation_id,
            "expiry": self.expiry,
            "issuer_signature": b64url_encode(self.issuer_signature.bytes),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CredentialView":
        return cls(
            schema_id=doc["schema_id"],
            issuer_did=doc["issuer_did"],
            revealed=dict(doc["revealed"]),
            revealed_salts={n: b64url_decode(s) for n, s in doc["revealed_salts"].items()},
            hidden_digests=dict(doc["hidden_digests"]),
            link_commitment=element_from_b64(doc["link_commitment"]),
            revocation_id=doc["revocation_id"],
            expiry=doc.get("expiry"),
            issuer_signature=Signature(b64url_decode(doc["issuer_signature"])),
        )


@dataclass(frozen=True)
class LinkProof:
    challenge: int
    response_secret: int
    response_blinding: int

    def to_json(self) -> dict:
        return {
            "challenge": scalar_to_b64(self.challenge),
            "response_secret": scalar_to_b64(self.response_secret),
            "response_blinding": scalar_to_b64(self.response_blinding),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LinkProof":
        return cls(
            scalar_from_b64(doc["challenge"]),
            scalar_from_b64(doc["response_secret"]),
            scalar_from_b64(doc["response_blinding"]),
        )


@dataclass(frozen=True)
class ProofPresentation:
    credential_view: CredentialView
    link_proof: LinkProof
    revocation_id: str

    def to_json(self) -> dict:
        return {
            "credential_view": self.credential_view.to_json(),
            "link_proof": self.link_proof.to_json(),
            "revocation_id": self.revocation_id,
        }

    def encode(self) -> bytes:
        return canonical_json(self.to_json())

    @classmethod
    def from_json(cls, doc: dict) -> "ProofPresentation":
        return cls(
            CredentialView.from_json(doc["credential_view"]),
            LinkProof.from_json(doc["link_proof"]),
            doc["revocation_id"],
        )


class RevocationRegistry:
    """Grow-only set of revoked ids, owned and written by one issuer."""

    def __init__(self, registry_id: str) -> None:
        self.registry_id = registry_id
        self._revoked: set = set()
        self._issued: set = set()
        self._lock = threading.Lock()

    @property
    def revoked(self) -> FrozenSet[str]:
        return frozenset(self._revoked)

    @property
    def issued(self) -> FrozenSet[str]:
        return frozenset(self._issued)

    def register_issued(self, revocation_id: str) -> None:
        with self._lock:
            if revocation_id in self._issued:
                raise CredentialError(f"revocation id {revocation_id} reused")
            self._issued.add(revocation_id)

    def revoke(self, revocation_id: str) -> None:
        with self._lock:
            self._revoked.add(revocation_id)

    def is_revoked(self, revocation_id: str) -> bool:
        return revocation_id in self._revoked


@dataclass(frozen=True)
class VerificationResult:
    issuer_resolvable: bool
    link_secret_proven: bool
    issuer_authorized: bool
    not_revoked: bool
    attributes_valid: bool

    CHECKS = ("issuer_resolvable", "link_secret_proven", "issuer_authorized", "not_revoked", "attributes_valid")

    @property
    def overall(self) -> bool:
        return all(getattr(self, name) for name in self.CHECKS)

    def failed_checks(self) -> Tuple[str, ...]:
        return tuple(name for name in self.CHECKS if not getattr(self, name))

    def to_json(self) -> dict:
        out = {name: getattr(self, name) for name in self.CHECKS}
        out["overall"] = self.overall
        return out


def issue_credential(
    issuer_keys: KeyPair,
    issuer_did: Union[Did, str],
    schema: CredentialSchema,
    attributes: Mapping[str, str],
    link_commitment: int,
    expiry: Optional[Union[str, datetime]],
    registry: RevocationRegistry,
    rng: Optional[RandomSource] = None,
) -> Credential:
    rng = rng or SystemRandom()
    if set(attributes) != set(schema.attribute_names):
        missing = sorted(set(schema.attribute_names) - set(attributes))
        extra = sorted(set(attributes) - set(schema.attribute_names))
        raise SchemaMismatch(f"attributes do not match {schema.schema_id}: missing={missing} extra={extra}")
    if not all(isinstance(v, str) for v in attributes.values()):
        raise SchemaMismatch("attribute values must be strings")
    if not is_group_element(link_commitment):
        raise ValueError("link commitment is not a group element")
    attrs = {name: attributes[name] for name in schema.attribute_names}
    salts = {name: rng.randbytes(16) for name in schema.attribute_names}
    revocation_id = rng.randbytes(16).hex()
    registry.register_issued(revocation_id)
    expiry_text = format_timestamp(expiry) if expiry is not None else None
    digests = {n: attribute_digest(n, v, salts[n]) for n, v in attrs.items()}
    payload = _signed_payload(schema.schema_id, str(issuer_did), digests, link_commitment, revocation_id, expiry_text)
    return Credential(
        schema_id=schema.schema_id,
        issuer_did=str(issuer_did),
        attributes=attrs,
        salts=salts,
        link_commitment=link_commitment,
        revocation_id=revocation_id,
        expiry=expiry_text,
        issuer_signature=crypto.sign(issuer_keys.signing_secret, payload),
    )


def _link_challenge(commitment: int, announcement: int, nonce: bytes, view_signature: bytes) -> int:
    h = hashlib.sha512()
    for part in (PROOF_DOMAIN, P.to_bytes(ELEMENT_SIZE, "big"), commitment.to_bytes(ELEMENT_SIZE, "big"),
                 announcement.to_bytes(ELEMENT_SIZE, "big"), nonce, view_signature):
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return int.from_bytes(h.digest(), "big") % Q


def prove_link_secret(
    secret: LinkSecret, commitment: int, nonce: bytes, view_signature: bytes, rng: Optional[RandomSource] = None
) -> LinkProof:
    rng = rng or SystemRandom()
    k_secret, k_blinding = rng.randbelow(Q), rng.randbelow(Q)
    announcement = pow(G, k_secret, P) * pow(H, k_blinding, P) % P
    c = _link_challenge(commitment, announcement, nonce, view_signature)
    return LinkProof(c, (k_secret + c * secret.secret) % Q, (k_blinding + c * secret.blinding) % Q)


def verify_link_proof(proof: LinkProof, commitment: int, nonce: bytes, view_signature: bytes) -> bool:
    if not is_group_element(commitment):
        return False
    if not all(0 <= v < Q for v in (proof.challenge, proof.response_secret, proof.response_blinding)):
        return False
    # announcement = G^z1 * H^z2 * C^-c
    announcement = (
        pow(G, proof.response_secret, P)
        * pow(H, proof.response_blinding, P)
        * pow(commitment, Q - proof.challenge, P)
        % P
    )
    return _link_challenge(commitment, announcement, nonce, view_signature) == proof.challenge


def credential_view(cred: Credential, reveal: Sequence[str]) -> CredentialView:
    """Disclose ``reveal`` in the clear and keep digests for everything else."""
    unknown = [name for name in reveal if name not in cred.attributes]
    if unknown:
        raise UnknownAttribute(f"credential has no attribute(s) {unknown}")
    revealed = {n: cred.attributes[n] for n in reveal}
    return CredentialView(
        schema_id=cred.schema_id,
        issuer_did=cred.issuer_did,
        revealed=revealed,
        revealed_salts={n: cred.salts[n] for n in revealed},
        hidden_digests={n: d for n, d in cred.digests().items() if n not in revealed},
        link_commitment=cred.link_commitment,
        revocation_id=cred.revocation_id,
        expiry=cred.expiry,
        issuer_signature=cred.issuer_signature,
    )


def present_proof(
    cred: Credential, secret: LinkSecret, request: ProofRequest, rng: Optional[RandomSource] = None
) -> ProofPresentation:
    view = credential_view(cred, request.requested_attributes)
    if commit_link_secret(secret) != cred.link_commitment:
        raise CommitmentMismatch("link secret does not open the credential commitment")
    proof = prove_link_secret(secret, cred.link_commitment, request.verifier_nonce, cred.issuer_signature.bytes, rng)
    return ProofPresentation(view, proof, cred.revocation_id)


def _check(fn) -> bool:
    try:
        return bool(fn())
    except Exception:  # every malformed input is a failed check, never an exception
        return False


def verify_presentation(
    ledger: PublicLedger,
    registry: Optional[RevocationRegistry],
    request: ProofRequest,
    pres: ProofPresentation,
    now: Union[str, datetime],
) -> VerificationResult:
    """Run the five holder checks independently; failures are data, not errors."""
    view = pres.credential_view

    def issuer_resolvable():
        doc = resolve(ledger, view.issuer_did)
        return crypto.verify(doc.signing_key, view.signed_payload(), view.issuer_signature)

    def link_secret_proven():
        return verify_link_proof(pres.link_proof, view.link_commitment, request.verifier_nonce,
                                 view.issuer_signature.bytes)

    def issuer_authorized():
        return view.issuer_did in request.required_issuer_dids and view.schema_id == request.requested_schema_id

    def not_revoked():
        if registry is None or pres.revocation_id != view.revocation_id:
            return False
        return not registry.is_revoked(pres.revocation_id)

    def attributes_valid():
        if view.expiry is not None and not parse_timestamp(now) < parse_timestamp(view.expiry):
            return False
        if set(view.revealed) != set(request.requested_attributes):
            return False
        if set(view.revealed) & set(view.hidden_digests):
            return False
        try:
            schema = ledger.schema(view.schema_id)
        except NotFound:
            return False
        if set(view.revealed) | set(view.hidden_digests) != set(schema.attribute_names):
            return False
        return all(view.revealed.get(name) == want for name, want in request.attribute_predicates.items())

    return VerificationResult(
        issuer_resolvable=_check(issuer_resolvable),
        link_secret_proven=_check(link_secret_proven),
        issuer_authorized=_check(issuer_authorized),
        not_revoked=_check(not_revoked),
        attributes_valid=_check(attributes_valid),
    )


def revoke(registry: RevocationRegistry, revocation_id: str) -> None:
    registry.revoke(revocation_id)
