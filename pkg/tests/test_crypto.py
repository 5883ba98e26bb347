"""Keys, signatures and the sign-then-encrypt envelope."""

import json
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustfl import crypto
from trustfl.crypto import (
    BadSignature,
    DecryptFailure,
    EncryptedEnvelope,
    MalformedEnvelope,
    Signature,
    generate_keypair,
    seal,
    sign,
    verify,
)
from trustfl.randomness import DeterministicRandom


def seed(n: int) -> bytes:
    return n.to_bytes(32, "big")


@pytest.fixture
def alice():
    return generate_keypair(seed(1))


@pytest.fixture
def bob():
    return generate_keypair(seed(2))


@pytest.fixture
def carol():
    return generate_keypair(seed(3))


class TestKeys:
    def test_same_seed_same_keys(self):
        assert generate_keypair(bytes(32)) == generate_keypair(bytes(32))

    def test_distinct_seeds_differ_in_every_field(self):
        a, b = generate_keypair(seed(10)), generate_keypair(seed(11))
        assert a.signing_secret != b.signing_secret
        assert a.signing_public != b.signing_public
        assert a.agreement_secret != b.agreement_secret
        assert a.agreement_public != b.agreement_public

    @pytest.mark.parametrize("bad", [b"", bytes(31), bytes(33), "x" * 32])
    def test_bad_seed_length(self, bad):
        with pytest.raises(ValueError):
            generate_keypair(bad)

    def test_ten_thousand_seeded_keys_are_distinct(self):
        rng = DeterministicRandom(7, "keys")
        publics = {generate_keypair(rng.randbytes(32)).signing_public for _ in range(10_000)}
        assert len(publics) == 10_000

    def test_public_halves_follow_from_secrets(self, alice):
        again = generate_keypair(alice.signing_secret)
        assert again.signing_public == alice.signing_public
        assert again.agreement_public == alice.agreement_public
        assert crypto.agreement_public_from_signing(alice.signing_public) == alice.agreement_public

    def test_repr_hides_secrets(self, alice):
        text = repr(alice)
        assert alice.signing_secret.hex() not in text
        assert alice.agreement_secret.hex() not in text


class TestSignatures:
    def test_roundtrip(self, alice):
        sig = sign(alice.signing_secret, b"model update")
        assert len(sig.bytes) == 64
        assert verify(alice.signing_public, b"model update", sig)

    def test_wrong_key(self, alice, bob):
        sig = sign(alice.signing_secret, b"m")
        assert not verify(bob.signing_public, b"m", sig)

    def test_altered_message(self, alice):
        sig = sign(alice.signing_secret, b"m")
        assert not verify(alice.signing_public, b"m\x01", sig)

    def test_malformed_inputs_return_false(self, alice):
        sig = sign(alice.signing_secret, b"m")
        assert not verify(b"short", b"m", sig)
        assert not verify(alice.signing_public, b"m", b"\x00" * 10)
        assert not verify(None, b"m", sig)

    def test_signature_length_is_checked(self):
        with pytest.raises(ValueError):
            Signature(b"\x00" * 63)

    def test_deterministic(self, alice):
        assert sign(alice.signing_secret, b"x") == sign(alice.signing_secret, b"x")


class TestEnvelope:
    def test_roundtrip(self, alice, bob):
        env = seal(alice, bob.agreement_public, b"hello")
        assert crypto.open(bob, alice.signing_public, env) == b"hello"

    def test_empty_plaintext(self, alice, bob):
        env = seal(alice, bob.agreement_public, b"")
        assert crypto.open(bob, alice.signing_public, env) == b""

    def test_large_plaintext(self, alice, bob):
        data = os.urandom(crypto.MAX_PLAINTEXT)
        env = seal(alice, bob.agreement_public, data)
        assert crypto.open(bob, alice.signing_public, env) == data

    def test_oversize_plaintext_refused(self, alice, bob):
        with pytest.raises(ValueError):
            seal(alice, bob.agreement_public, bytes(crypto.MAX_PLAINTEXT + 1))

    def test_fresh_nonce_each_seal(self, alice, bob):
        a = seal(alice, bob.agreement_public, b"same")
        b = seal(alice, bob.agreement_public, b"same")
        assert a.nonce != b.nonce
        assert a.ciphertext != b.ciphertext

    def test_ciphertext_hides_plaintext_substrings(self, alice, bob):
        # oracle: no window of 4 plaintext bytes shows up anywhere in the ciphertext
        rng = DeterministicRandom(3, "substrings")
        for _ in range(100):
            m = rng.randbytes(64 + rng.randbelow(200))
            env = seal(alice, bob.agreement_public, m, nonce=rng.randbytes(24))
            windows = {m[i:i + 4] for i in range(len(m) - 3)}
            assert not any(w in env.ciphertext for w in windows)

    def test_third_party_signature_is_bad_signature(self, alice, bob, carol):
        env = seal(alice, bob.agreement_public, b"hello")
        forged = EncryptedEnvelope(env.sender_hint, env.nonce, env.ciphertext,
                                   sign(carol.signing_secret, env.signed_bytes()))
        with pytest.raises(BadSignature):
            crypto.open(bob, alice.signing_public, forged)

    def test_wrong_recipient_is_decrypt_failure(self, alice, bob, carol):
        env = seal(alice, bob.agreement_public, b"for bob only")
        with pytest.raises(DecryptFailure):
            crypto.open(carol, alice.signing_public, env)

    def test_wrong_sender_key_is_bad_signature(self, alice, bob, carol):
        env = seal(alice, bob.agreement_public, b"hello")
        with pytest.raises(BadSignature):
            crypto.open(bob, carol.signing_public, env)

    def test_signature_covers_nonce(self, alice, bob):
        env = seal(alice, bob.agreement_public, b"hello")
        spliced = EncryptedEnvelope(env.sender_hint, bytes(24), env.ciphertext, env.signature)
        with pytest.raises(BadSignature):
            crypto.open(bob, alice.signing_public, spliced)

    def test_error_types_are_distinct(self):
        assert not issubclass(BadSignature, DecryptFailure)
        assert not issubclass(DecryptFailure, BadSignature)

    def test_bad_nonce_length(self, alice, bob):
        with pytest.raises(ValueError):
            seal(alice, bob.agreement_public, b"x", nonce=bytes(12))


class TestEncoding:
    def test_canonical_json_shape(self, alice, bob):
        env = seal(alice, bob.agreement_public, b"hello")
        raw = env.encode()
        doc = json.loads(raw)
        assert list(doc) == sorted(doc) == ["ciphertext", "nonce", "sender_hint", "signature"]
        assert b" " not in raw and b"=" not in raw
        assert EncryptedEnvelope.decode(raw) == env

    @pytest.mark.parametrize("raw", [
        b"not json",
        b"[]",
        b'{"nonce":"AA"}',
        b'{"ciphertext":"","nonce":"","sender_hint":"","signature":"","extra":""}',
    ])
    def test_malformed(self, raw):
        with pytest.raises(MalformedEnvelope):
            EncryptedEnvelope.decode(raw)

    def test_non_canonical_spacing_rejected(self, alice, bob):
        raw = seal(alice, bob.agreement_public, b"x").encode()
        spaced = json.dumps(json.loads(raw), sort_keys=True).encode()
        with pytest.raises(MalformedEnvelope):
            EncryptedEnvelope.decode(spaced)

    def test_padded_base64_rejected(self):
        with pytest.raises(ValueError):
            crypto.b64url_decode("AA==")

    def test_non_canonical_trailing_bits_rejected(self):
        assert crypto.b64url_decode("AA") == b"\x00"
        with pytest.raises(ValueError):
            crypto.b64url_decode("AB")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=4096), st.integers(0, 2**32), st.integers(0, 2**32))
def test_open_inverts_seal(message, s1, s2):
    a, b = generate_keypair(seed(s1)), generate_keypair(seed(s2 + 2**33))
    env = seal(a, b.agreement_public, message)
    assert crypto.open(b, a.signing_public, EncryptedEnvelope.decode(env.encode())) == message


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=256), st.data())
def test_any_byte_flip_is_detected(message, data):
    a, b = generate_keypair(seed(5)), generate_keypair(seed(6))
    env = seal(a, b.agreement_public, message)
    raw = bytearray(env.nonce + env.ciphertext + env.signature.bytes)
    pos = data.draw(st.integers(0, len(raw) - 1))
    raw[pos] ^= data.draw(st.integers(1, 255))
    n, c = len(env.nonce), len(env.ciphertext)
    tampered = EncryptedEnvelope(env.sender_hint, bytes(raw[:n]), bytes(raw[n:n + c]), Signature(bytes(raw[n + c:])))
    with pytest.raises(crypto.CryptoError):
        crypto.open(b, a.signing_public, tampered)
