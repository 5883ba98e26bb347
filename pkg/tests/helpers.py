import socket


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


from trustfl.agent import Agent, AgentConfig, SimClock, TrustPolicy, connect  # noqa: E402
from trustfl.did import PublicLedger  # noqa: E402
from trustfl.randomness import DeterministicRandom  # noqa: E402
from trustfl.transport import make_transport  # noqa: E402

HOSPITAL_ATTRS = ("hospital_name", "status", "issued_at")
RESEARCHER_ATTRS = ("researcher_name", "status", "issued_at")


class AgentWorld:
    """Issuers plus any number of agents on one transport."""

    def __init__(self, kind: str = "loopback", seed: int = 0) -> None:
        self.rng = DeterministicRandom(seed, "agents")
        self.clock = SimClock()
        self.transport = make_transport(kind, clock=self.clock.timestamp)
        self.ledger = PublicLedger()
        self.agents = []
        self._next_port = 20000 if kind == "loopback" else None
        self.nhs = self.agent("NHS Trust")
        self.regulator = self.agent("Regulator")
        self.nhs.register_public_did()
        self.regulator.register_public_did()
        self.hospital_schema = self.nhs.publish_schema("Verified Hospital", "1.0", HOSPITAL_ATTRS)
        self.researcher_schema = self.regulator.publish_schema("Audited Researcher-Coordinator", "1.0",
                                                               RESEARCHER_ATTRS)

    def _ports(self):
        if self._next_port is None:
            return free_port(), free_port(), free_port()
        self._next_port += 3
        return self._next_port, self._next_port + 1, self._next_port + 2

    def agent(self, name: str, cls=Agent) -> Agent:
        a = cls(AgentConfig(name, *self._ports()), self.transport, self.ledger, self.rng.child(name), self.clock)
        self.agents.append(a)
        return a

    def credential(self, holder: Agent, issuer: Agent = None, expiry: str = "2022-03-01T00:00:00Z", **values):
        issuer = issuer or self.nhs
        schema = self.hospital_schema if issuer is self.nhs else self.researcher_schema
        name_attr = schema.attribute_names[0]
        attrs = {name_attr: holder.name, "status": "verified" if issuer is self.nhs else "audited",
                 "issued_at": "2021-03-01T00:00:00Z"}
        attrs.update(values)
        issuer_cid, _ = connect(issuer, holder)
        issuer.offer_credential(issuer_cid, schema.schema_id, attrs, expiry)
        self.transport.wait_idle(10)
        return holder.wallet[-1].credential

    def researcher_policy(self) -> TrustPolicy:
        return TrustPolicy(self.hospital_schema.schema_id, frozenset({str(self.nhs.public_did)}),
                           ("hospital_name", "status"), {"status": "verified"})

    def hospital_policy(self) -> TrustPolicy:
        return TrustPolicy(self.researcher_schema.schema_id, frozenset({str(self.regulator.public_did)}),
                           ("researcher_name", "status"), {"status": "audited"})

    def close(self) -> None:
        for a in self.agents:
            a.close()
        self.transport.close()
