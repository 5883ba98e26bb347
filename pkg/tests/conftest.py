from dataclasses import dataclass
from datetime import datetime, timezone

import pytest

from trustfl.credentials import CredentialSchema, LinkSecret, RevocationRegistry, commit_link_secret, issue_credential
from trustfl.crypto import KeyPair, generate_keypair
from trustfl.did import Did, PublicLedger, create_did
from trustfl.randomness import DeterministicRandom

NOW = datetime(2021, 3, 1, tzinfo=timezone.utc)


@dataclass
class Issuer:
    keys: KeyPair
    did: Did
    registry: RevocationRegistry
    schema: CredentialSchema


class World:
    """A ledger with issuers on it, enough to issue and verify credentials."""

    def __init__(self, seed: int = 0) -> None:
        self.rng = DeterministicRandom(seed, "world")
        self.ledger = PublicLedger()

    def issuer(self, schema_name: str = "Verified Hospital",
               attributes=("hospital_name", "status", "issued_at"), publish_schema: bool = True) -> Issuer:
        keys = generate_keypair(self.rng.randbytes(32))
        did, doc = create_did(keys, None, method="sov")
        self.ledger.write(doc)
        registry = RevocationRegistry(f"{did}:4:revocation")
        self.ledger.publish_registry(did, registry)
        schema = CredentialSchema.create(did, schema_name, "1.0", attributes)
        if publish_schema:
            self.ledger.register_schema(schema)
        return Issuer(keys, did, registry, schema)

    def credential(self, issuer: Issuer, attributes=None, expiry="2022-03-01T00:00:00Z", schema=None):
        schema = schema or issuer.schema
        if attributes is None:
            attributes = {"hospital_name": "Hospital 1", "status": "verified", "issued_at": "2021-03-01T00:00:00Z"}
        secret = LinkSecret.generate(self.rng)
        cred = issue_credential(issuer.keys, issuer.did, schema, attributes, commit_link_secret(secret), expiry,
                                issuer.registry, self.rng)
        return cred, secret


@pytest.fixture
def world():
    return World()


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in name or rep.when not in ("call", "setup"):
                continue
            number = int(name.split("test_criterion_")[1].split("_")[0])
            if lines.get(number) != "FAIL":
                lines[number] = "PASS" if outcome == "passed" else "FAIL"
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(f"criterion {number}: {lines[number]}")
