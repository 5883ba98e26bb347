"""Issuance, presentation, revocation and the five verification checks."""

import json
from dataclasses import replace
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustfl import crypto
from trustfl.credentials import (
    ELEMENT_SIZE,
    G,
    H,
    P,
    Q,
    CommitmentMismatch,
    Credential,
    CredentialSchema,
    LinkProof,
    LinkSecret,
    ProofPresentation,
    ProofRequest,
    SchemaMismatch,
    UnknownAttribute,
    VerificationResult,
    commit_link_secret,
    is_group_element,
    issue_credential,
    present_proof,
    revoke,
    verify_presentation,
)
from trustfl.crypto import Signature
from trustfl.randomness import DeterministicRandom

from conftest import NOW, World


def request_for(issuer, rng, attrs=("hospital_name", "status"), predicates=None):
    return ProofRequest.fresh(issuer.schema.schema_id, attrs, {issuer.did}, rng, predicates)


class TestGroup:
    def test_parameters(self):
        assert P.bit_length() == 2048 and Q.bit_length() == 256
        assert (P - 1) % Q == 0
        assert pow(G, Q, P) == 1 and G != 1
        assert pow(H, Q, P) == 1 and H not in (1, G)
        assert ELEMENT_SIZE == 256

    def test_membership(self):
        assert is_group_element(G)
        assert not is_group_element(0)
        assert not is_group_element(P - 1)  # order 2, outside the subgroup


class TestCommitment:
    def test_deterministic(self):
        s = LinkSecret(12345, 678)
        assert commit_link_secret(s) == commit_link_secret(LinkSecret(12345, 678))

    def test_reblinding_changes_commitment(self):
        rng = DeterministicRandom(1)
        s = LinkSecret.generate(rng)
        assert commit_link_secret(s) != commit_link_secret(s.reblind(rng))

    def test_thousand_secrets_thousand_commitments(self):
        rng = DeterministicRandom(2)
        seen = {commit_link_secret(LinkSecret.generate(rng)) for _ in range(1000)}
        assert len(seen) == 1000

    def test_secret_out_of_range(self):
        with pytest.raises(ValueError):
            LinkSecret(Q, 0)

    def test_repr_hides_secret(self):
        s = LinkSecret(987654321, 5)
        assert "987654321" not in repr(s)


class TestIssue:
    def test_signature_verifies_against_ledger_document(self, world):
        nhs = world.issuer()
        cred, _ = world.credential(nhs, {"hospital_name": "Hospital 1", "status": "verified",
                                         "issued_at": "2021-03-01T00:00:00Z"})
        doc = world.ledger.get(str(nhs.did))
        assert crypto.verify(doc.signing_key, cred.signed_payload(), cred.issuer_signature)
        assert set(cred.attributes) == set(nhs.schema.attribute_names)

    def test_missing_attribute(self, world):
        nhs = world.issuer()
        with pytest.raises(SchemaMismatch):
            world.credential(nhs, {"hospital_name": "Hospital 1", "status": "verified"})

    def test_extra_attribute(self, world):
        nhs = world.issuer()
        with pytest.raises(SchemaMismatch):
            world.credential(nhs, {"hospital_name": "H", "status": "v", "issued_at": "t", "beds": "3"})

    def test_distinct_revocation_ids(self, world):
        nhs = world.issuer()
        a, _ = world.credential(nhs)
        b, _ = world.credential(nhs)
        assert a.revocation_id != b.revocation_id
        assert {a.revocation_id, b.revocation_id} <= nhs.registry.issued
        assert not nhs.registry.revoked

    def test_bad_commitment(self, world):
        nhs = world.issuer()
        with pytest.raises(ValueError):
            issue_credential(nhs.keys, nhs.did, nhs.schema, {"hospital_name": "a", "status": "b", "issued_at": "c"},
                             P - 1, None, nhs.registry)

    def test_json_roundtrip(self, world):
        nhs = world.issuer()
        cred, _ = world.credential(nhs)
        assert Credential.from_json(json.loads(json.dumps(cred.to_json()))) == cred

    def test_schema_validation(self):
        with pytest.raises(ValueError):
            CredentialSchema("s", "n", "1", ())
        with pytest.raises(ValueError):
            CredentialSchema("s", "n", "1", ("a", "a"))


class TestPresent:
    def test_honest_holder_verifies(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng)
        pres = present_proof(cred, secret, req, world.rng)
        result = verify_presentation(world.ledger, nhs.registry, req, pres, NOW)
        assert result.overall, result

    def test_reveals_exactly_requested(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng, ("status",))
        view = present_proof(cred, secret, req, world.rng).credential_view
        assert view.revealed == {"status": "verified"}
        assert set(view.hidden_digests) == {"hospital_name", "issued_at"}
        assert "Hospital 1" not in json.dumps(view.to_json())

    def test_replay_under_new_nonce_fails_link_check(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        first = request_for(nhs, world.rng)
        pres = present_proof(cred, secret, first, world.rng)
        second = request_for(nhs, world.rng)
        result = verify_presentation(world.ledger, nhs.registry, second, pres, NOW)
        assert result.failed_checks() == ("link_secret_proven",)

    def test_wrong_link_secret(self, world):
        nhs = world.issuer()
        cred, _ = world.credential(nhs)
        with pytest.raises(CommitmentMismatch):
            present_proof(cred, LinkSecret.generate(world.rng), request_for(nhs, world.rng), world.rng)

    def test_unknown_attribute(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        with pytest.raises(UnknownAttribute):
            present_proof(cred, secret, request_for(nhs, world.rng, ("beds",)), world.rng)

    def test_link_secret_never_serialized(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        pres = present_proof(cred, secret, request_for(nhs, world.rng), world.rng)
        blob = json.dumps(cred.to_json()).encode() + pres.encode()
        for value in (secret.secret, secret.blinding):
            assert value.to_bytes(32, "big") not in blob
            assert str(value).encode() not in blob
            assert crypto.b64url_encode(value.to_bytes(32, "big")).encode() not in blob

    def test_presentation_json_roundtrip(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng)
        pres = present_proof(cred, secret, req, world.rng)
        back = ProofPresentation.from_json(json.loads(pres.encode()))
        assert back == pres
        req_back = ProofRequest.from_json(json.loads(json.dumps(req.to_json())))
        assert req_back == req


class TestVerify:
    def test_untrusted_self_signed_issuer(self, world):
        nhs = world.issuer()
        rogue = world.issuer("Verified Hospital", publish_schema=False)
        cred, secret = world.credential(rogue, schema=nhs.schema)
        req = request_for(nhs, world.rng)
        result = verify_presentation(world.ledger, rogue.registry, req, present_proof(cred, secret, req, world.rng),
                                     NOW)
        assert result.failed_checks() == ("issuer_authorized",)
        assert not result.overall

    def test_revoked(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        revoke(nhs.registry, cred.revocation_id)
        req = request_for(nhs, world.rng)
        result = verify_presentation(world.ledger, nhs.registry, req, present_proof(cred, secret, req, world.rng),
                                     NOW)
        assert result.failed_checks() == ("not_revoked",)

    def test_expired(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs, expiry=NOW)
        req = request_for(nhs, world.rng)
        pres = present_proof(cred, secret, req, world.rng)
        assert verify_presentation(world.ledger, nhs.registry, req, pres, NOW).failed_checks() == ("attributes_valid",)
        earlier = verify_presentation(world.ledger, nhs.registry, req, pres, NOW - timedelta(seconds=1))
        assert earlier.overall

    def test_unknown_issuer(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng)
        pres = present_proof(cred, secret, req, world.rng)
        from trustfl.did import PublicLedger

        empty = PublicLedger()
        empty.register_schema(nhs.schema)
        result = verify_presentation(empty, nhs.registry, req, pres, NOW)
        assert not result.issuer_resolvable and not result.overall

    def test_predicate_mismatch(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs, {"hospital_name": "H", "status": "suspended", "issued_at": "t"})
        req = request_for(nhs, world.rng, predicates={"status": "verified"})
        result = verify_presentation(world.ledger, nhs.registry, req, present_proof(cred, secret, req, world.rng),
                                     NOW)
        assert result.failed_checks() == ("attributes_valid",)

    def test_wrong_schema_requested(self, world):
        nhs = world.issuer()
        other = CredentialSchema.create(nhs.did, "Other", "1.0", ("a",))
        world.ledger.register_schema(other)
        cred, secret = world.credential(nhs)
        req = ProofRequest.fresh(other.schema_id, ("hospital_name",), {nhs.did}, world.rng)
        result = verify_presentation(world.ledger, nhs.registry, req, present_proof(cred, secret, req, world.rng),
                                     NOW)
        assert not result.issuer_authorized

    def test_missing_registry_fails_closed(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng)
        result = verify_presentation(world.ledger, None, req, present_proof(cred, secret, req, world.rng), NOW)
        assert result.failed_checks() == ("not_revoked",)

    def test_mismatched_revocation_id(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng)
        pres = present_proof(cred, secret, req, world.rng)
        result = verify_presentation(world.ledger, nhs.registry, req, replace(pres, revocation_id="00"), NOW)
        assert not result.not_revoked

    def test_garbage_never_raises(self, world):
        nhs = world.issuer()
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng)
        pres = present_proof(cred, secret, req, world.rng)
        junk = replace(pres, link_proof=LinkProof(-1, Q + 5, 0))
        result = verify_presentation(world.ledger, nhs.registry, req, junk, "not a timestamp")
        assert isinstance(result, VerificationResult) and not result.overall

    def test_overall_is_conjunction(self):
        for bits in range(32):
            flags = [bool(bits >> i & 1) for i in range(5)]
            assert VerificationResult(*flags).overall == all(flags)


class TestRevocation:
    def test_idempotent(self, world):
        nhs = world.issuer()
        cred, _ = world.credential(nhs)
        revoke(nhs.registry, cred.revocation_id)
        before = nhs.registry.revoked
        revoke(nhs.registry, cred.revocation_id)
        assert nhs.registry.revoked == before == {cred.revocation_id}

    def test_revoking_unknown_id_leaves_new_credentials_alone(self, world):
        nhs = world.issuer()
        revoke(nhs.registry, "ffff")
        cred, secret = world.credential(nhs)
        req = request_for(nhs, world.rng)
        assert verify_presentation(world.ledger, nhs.registry, req, present_proof(cred, secret, req, world.rng),
                                   NOW).overall


@pytest.mark.parametrize("field", ["revealed", "issuer_signature", "hidden_digests", "revocation_id"])
def test_tamper_breaks_verification(world, field):
    nhs = world.issuer()
    cred, secret = world.credential(nhs)
    req = request_for(nhs, world.rng)
    pres = present_proof(cred, secret, req, world.rng)
    view = pres.credential_view
    if field == "revealed":
        view = replace(view, revealed={**view.revealed, "hospital_name": "Hospital 9"})
    elif field == "issuer_signature":
        sig = bytearray(view.issuer_signature.bytes)
        sig[0] ^= 1
        view = replace(view, issuer_signature=Signature(bytes(sig)))
    elif field == "hidden_digests":
        view = replace(view, hidden_digests={k: "0" * 64 for k in view.hidden_digests})
    else:
        view = replace(view, revocation_id="00" * 16)
    result = verify_presentation(world.ledger, nhs.registry, req, replace(pres, credential_view=view), NOW)
    assert not result.overall


names = st.lists(st.text("abcdefghij_", min_size=1, max_size=8), min_size=1, max_size=5, unique=True)


@settings(max_examples=30, deadline=None)
@given(names, st.data())
def test_completeness(attr_names, data):
    world = World(seed=data.draw(st.integers(0, 10_000)))
    issuer = world.issuer("Random", tuple(attr_names))
    values = {n: data.draw(st.text(min_size=0, max_size=12)) for n in attr_names}
    cred, secret = world.credential(issuer, values)
    reveal = data.draw(st.lists(st.sampled_from(attr_names), unique=True))
    req = ProofRequest.fresh(issuer.schema.schema_id, reveal, {issuer.did}, world.rng)
    result = verify_presentation(world.ledger, issuer.registry, req, present_proof(cred, secret, req, world.rng), NOW)
    assert result.overall


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_single_byte_flip_in_revealed_value(data):
    world = World(seed=1)
    nhs = world.issuer()
    cred, secret = world.credential(nhs)
    req = request_for(nhs, world.rng)
    pres = present_proof(cred, secret, req, world.rng)
    name = data.draw(st.sampled_from(sorted(pres.credential_view.revealed)))
    raw = bytearray(pres.credential_view.revealed[name].encode())
    pos = data.draw(st.integers(0, len(raw) - 1))
    raw[pos] ^= data.draw(st.integers(1, 127))
    changed = raw.decode("utf-8", "replace")
    view = replace(pres.credential_view, revealed={**pres.credential_view.revealed, name: changed})
    result = verify_presentation(world.ledger, nhs.registry, req, replace(pres, credential_view=view), NOW)
    assert not result.overall
