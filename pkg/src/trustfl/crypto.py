"""Keys, signatures and the sign-then-encrypt envelope carried between agents.

The envelope follows the classic DID messaging recipe: the plaintext is
encrypted to the recipient's key-agreement key (X25519 + XSalsa20-Poly1305),
and the sender then signs the encrypted bytes with Ed25519. Receivers check
the signature before they attempt to decrypt.

Key-agreement keys are the X25519 images of the Ed25519 signing keys, so a
peer's signing public key alone is enough to both authenticate and decrypt.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
from dataclasses import dataclass
from typing import Optional

import nacl.exceptions
import nacl.public
import nacl.signing

SEED_SIZE = 32
NONCE_SIZE = nacl.public.Box.NONCE_SIZE  # 24
SIGNATURE_SIZE = 64
MAX_PLAINTEXT = 16 * 1024 * 1024

ENVELOPE_FIELDS = ("ciphertext", "nonce", "sender_hint", "signature")


class CryptoError(Exception):
    """Base class for envelope failures."""


class BadSignature(CryptoError):
    """Envelope signature does not verify under the claimed sender key."""


class DecryptFailure(CryptoError):
    """Authenticated decryption rejected the ciphertext."""


class MalformedEnvelope(CryptoError):
    """Envelope bytes are not a canonical envelope encoding."""


@dataclass(frozen=True)
class KeyPair:
    signing_secret: bytes
    signing_public: bytes
    agreement_secret: bytes
    agreement_public: bytes

    def __repr__(self) -> str:
        # keep secrets out of logs and tracebacks
        return f"KeyPair(signing_public={self.signing_public.hex()[:16]}...)"


@dataclass(frozen=True)
class Signature:
    bytes: bytes

    def __post_init__(self) -> None:
        if len(self.bytes) != SIGNATURE_SIZE:
            raise ValueError(f"signature must be {SIGNATURE_SIZE} bytes")


@dataclass(frozen=True)
class EncryptedEnvelope:
    sender_hint: str
    nonce: bytes
    ciphertext: bytes
    signature: Signature

    def signed_bytes(self) -> bytes:
        return self.nonce + self.ciphertext

    def encode(self) -> bytes:
        """Canonical wire form: sorted-key compact JSON, base64url without padding."""
        doc = {
            "ciphertext": b64url_encode(self.ciphertext),
            "nonce": b64url_encode(self.nonce),
            "sender_hint": self.sender_hint,
            "signature": b64url_encode(self.signature.bytes),
        }
        return canonical_json(doc)

    @classmethod
    def decode(cls, data: bytes) -> "EncryptedEnvelope":
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedEnvelope(f"not JSON: {exc}") from None
        if not isinstance(doc, dict) or tuple(sorted(doc)) != ENVELOPE_FIELDS:
            raise MalformedEnvelope("unexpected envelope fields")
        if not all(isinstance(v, str) for v in doc.values()):
            raise MalformedEnvelope("envelope values must be strings")
        try:
            nonce = b64url_decode(doc["nonce"])
            ciphertext = b64url_decode(doc["ciphertext"])
            sig = b64url_decode(doc["signature"])
        except ValueError as exc:
            raise MalformedEnvelope(str(exc)) from None
        if len(nonce) != NONCE_SIZE:
            raise MalformedEnvelope("bad nonce length")
        if len(sig) != SIGNATURE_SIZE:
            raise MalformedEnvelope("bad signature length")
        env = cls(doc["sender_hint"], nonce, ciphertext, Signature(sig))
        # Only the canonical byte string is accepted, so no two encodings
        # map to the same envelope.
        if env.encode() != data:
            raise MalformedEnvelope("non-canonical encoding")
        return env


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    padded = text + "=" * (-len(text) % 4)
    try:
        raw = base64.b64decode(padded.encode("ascii"), altchars=b"-_", validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise ValueError(f"invalid base64url: {exc}") from None
    if b64url_encode(raw) != text:
        raise ValueError("non-canonical base64url")
    return raw


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """Derive signing and key-agreement keys from one 32-byte seed.

    Passing ``None`` draws a fresh seed from the OS.
    """
    if seed is None:
        seed = os.urandom(SEED_SIZE)
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_SIZE:
        raise ValueError(f"seed must be exactly {SEED_SIZE} bytes")
    seed = bytes(seed)
    signing = nacl.signing.SigningKey(seed)
    agreement = signing.to_curve25519_private_key()
    return KeyPair(
        signing_secret=seed,
        signing_public=bytes(signing.verify_key),
        agreement_secret=bytes(agreement),
        agreement_public=bytes(agreement.public_key),
    )


def agreement_public_from_signing(signing_public: bytes) -> bytes:
    """X25519 public key paired with an Ed25519 public key."""
    try:
        return bytes(nacl.signing.VerifyKey(bytes(signing_public)).to_curve25519_public_key())
    except (nacl.exceptions.CryptoError, ValueError, TypeError) as exc:
        raise ValueError(f"malformed signing key: {exc}") from None


def key_hint(signing_public: bytes) -> str:
    return b64url_encode(signing_public)


def sign(secret: bytes, message: bytes) -> Signature:
    if len(secret) != SEED_SIZE:
        raise ValueError("malformed signing secret")
    signed = nacl.signing.SigningKey(bytes(secret)).sign(message)
    return Signature(signed.signature)


def verify(public: bytes, message: bytes, sig: Signature) -> bool:
    try:
        raw = sig.bytes if isinstance(sig, Signature) else bytes(sig)
        nacl.signing.VerifyKey(bytes(public)).verify(message, raw)
    except (nacl.exceptions.BadSignatureError, ValueError, TypeError):
        return False
    return True


def seal(
    sender: KeyPair,
    recipient_public: bytes,
    plaintext: bytes,
    nonce: Optional[bytes] = None,
) -> EncryptedEnvelope:
    if len(plaintext) > MAX_PLAINTEXT:
        raise ValueError(f"plaintext exceeds {MAX_PLAINTEXT} bytes")
    if nonce is None:
        nonce = os.urandom(NONCE_SIZE)
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    try:
        box = nacl.public.Box(
            nacl.public.PrivateKey(sender.agreement_secret),
            nacl.public.PublicKey(bytes(recipient_public)),
        )
    except (nacl.exceptions.ValueError, nacl.exceptions.TypeError) as exc:
        raise ValueError(f"malformed recipient key: {exc}") from None
    ciphertext = box.encrypt(bytes(plaintext), nonce).ciphertext
    sig = sign(sender.signing_secret, nonce + ciphertext)
    return EncryptedEnvelope(key_hint(sender.signing_public), nonce, ciphertext, sig)


def open(recipient: KeyPair, sender_public: bytes, env: EncryptedEnvelope) -> bytes:  # noqa: A001
    if env.sender_hint != key_hint(bytes(sender_public)):
        raise BadSignature("envelope names a different sender key")
    # signature first, decryption only for authenticated senders
    if not verify(sender_public, env.signed_bytes(), env.signature):
        raise BadSignature("envelope signature does not verify")
    try:
        box = nacl.public.Box(
            nacl.public.PrivateKey(recipient.agreement_secret),
            nacl.public.PublicKey(agreement_public_from_signing(sender_public)),
        )
        return box.decrypt(env.ciphertext, env.nonce)
    except nacl.exceptions.CryptoError:
        raise DecryptFailure("ciphertext failed authentication") from None
