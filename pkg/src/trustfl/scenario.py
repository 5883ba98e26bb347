"""Six-party healthcare topology: issuers, a researcher and three hospitals.

``run_demo`` issues credentials, establishes mutual trust between the
researcher and every hospital, runs the sequential federation and writes
``rounds.csv``, ``capture.ndjson`` and ``trust.log``. ``run_malicious`` adds
rogue participants and checks that none of them is trusted or fed a model.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from datetime import timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import crypto, fl
from .agent import (
    Agent,
    AgentConfig,
    AdminServer,
    Controller,
    SimClock,
    TrustPolicy,
    WebhookPoster,
    WebhookReceiver,
    connect,
    establish_trust,
)
from .credentials import (
    Credential,
    LinkProof,
    ProofPresentation,
    ProofRequest,
    Q,
    commit_link_secret,
    credential_view,
    format_timestamp,
    issue_credential,
    scalar_to_b64,
)
from .randomness import DeterministicRandom
from .transport import CaptureLog, Endpoint, make_transport, scan_capture

logger = logging.getLogger(__name__)

ROUNDS_FILE = "rounds.csv"
CAPTURE_FILE = "capture.ndjson"
TRUST_FILE = "trust.log"

NHS_TRUST = "NHS Trust"
REGULATOR = "Regulator"
RESEARCHER = "Researcher"
HOSPITALS = ("Hospital 1", "Hospital 2", "Hospital 3")

HOSPITAL_SCHEMA = "Verified Hospital"
RESEARCHER_SCHEMA = "Audited Researcher-Coordinator"

DEFAULT_AGENTS = (
    AgentConfig(NHS_TRUST, 8020, 8021, 8022),
    AgentConfig(REGULATOR, 8030, 8031, 8032),
    AgentConfig(RESEARCHER, 8040, 8041, 8042),
    AgentConfig("Hospital 1", 8050, 8051, 8052),
    AgentConfig("Hospital 2", 8060, 8061, 8062),
    AgentConfig("Hospital 3", 8070, 8071, 8072),
)
DEFAULT_SCHEMAS = {
    HOSPITAL_SCHEMA: ("hospital_name", "status", "issued_at"),
    RESEARCHER_SCHEMA: ("researcher_name", "status", "issued_at"),
}
DEFAULT_ISSUERS = {HOSPITAL_SCHEMA: NHS_TRUST, RESEARCHER_SCHEMA: REGULATOR}
CREDENTIAL_LIFETIME = 365 * 24 * 3600.0


class ScenarioError(Exception):
    """A stage of the scenario failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class ConfigError(ScenarioError):
    def __init__(self, message: str) -> None:
        super().__init__("config", message)


class MissingArtifact(ScenarioError):
    def __init__(self, message: str) -> None:
        super().__init__("report", message)


@dataclass(frozen=True)
class SyntheticParams:
    n: int = 1290
    d: int = 8
    separation: float = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    agents: Tuple[AgentConfig, ...] = DEFAULT_AGENTS
    schemas: Dict[str, Tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_SCHEMAS))
    issuers: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ISSUERS))
    dataset: Optional[str] = None
    synthetic: Optional[SyntheticParams] = field(default_factory=SyntheticParams)
    seed: int = 42
    transport: str = "loopback"
    activation: str = "sigmoid"
    train: fl.TrainConfig = field(default_factory=fl.TrainConfig)
    start_time: str = "2021-03-01T00:00:00+00:00"

    def validate(self) -> None:
        names = [a.name for a in self.agents]
        if len(set(names)) != len(names):
            raise ConfigError("agent names must be unique")
        ports = [p for a in self.agents for p in a.ports]
        dupes = sorted({p for p in ports if ports.count(p) > 1})
        if dupes:
            raise ConfigError(f"duplicate ports {dupes}")
        for role in (RESEARCHER, *HOSPITALS):
            if role not in names:
                raise ConfigError(f"missing agent {role!r}")
        for schema, issuer in self.issuers.items():
            if schema not in self.schemas:
                raise ConfigError(f"issuer mapping names unknown schema {schema!r}")
            if issuer not in names:
                raise ConfigError(f"issuer {issuer!r} is not among the agents")
        for schema in (HOSPITAL_SCHEMA, RESEARCHER_SCHEMA):
            if schema not in self.issuers:
                raise ConfigError(f"no issuer for {schema!r}")
        if self.dataset is None and self.synthetic is None:
            raise ConfigError("need a dataset path or synthetic parameters")
        if self.dataset is not None and not os.path.exists(self.dataset):
            raise ConfigError(f"dataset {self.dataset} does not exist")
        if self.transport not in ("loopback", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.activation not in fl.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    def agent(self, name: str) -> AgentConfig:
        for a in self.agents:
            if a.name == name:
                return a
        raise ConfigError(f"no agent named {name!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        try:
            kwargs = {}
            if "agents" in doc:
                kwargs["agents"] = tuple(
                    AgentConfig(a["name"], int(a["http_port"]), int(a["admin_port"]), int(a["webhook_port"]),
                                a.get("host", "127.0.0.1"))
                    for a in doc["agents"]
                )
            if "schemas" in doc:
                kwargs["schemas"] = {k: tuple(v) for k, v in doc["schemas"].items()}
            if "issuers" in doc:
                kwargs["issuers"] = dict(doc["issuers"])
            if "dataset" in doc:
                kwargs["dataset"] = doc["dataset"]
            if "synthetic" in doc:
                syn = doc["synthetic"]
                kwargs["synthetic"] = None if syn is None else SyntheticParams(
                    int(syn.get("n", 1290)), int(syn.get("d", 8)), float(syn.get("separation", 1.0)))
            for key in ("seed",):
                if key in doc:
                    kwargs[key] = int(doc[key])
            for key in ("transport", "activation", "start_time"):
                if key in doc:
                    kwargs[key] = str(doc[key])
            if "train" in doc:
                kwargs["train"] = replace(fl.TrainConfig(), **doc["train"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        return cls(**kwargs)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:  # Python 3.10
                import tomli as tomllib
            doc = tomllib.loads(raw.decode("utf-8"))
        else:
            doc = json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ScenarioConfig.from_dict(doc)


class CredentialThief(Agent):
    """Presents a credential copied from another holder without its link secret."""

    stolen: Optional[Credential] = None

    def build_presentation(self, request: ProofRequest) -> Optional[ProofPresentation]:
        if self.stolen is None:
            return None
        view = credential_view(self.stolen, request.requested_attributes)
        forged = LinkProof(self.rng.randbelow(Q), self.rng.randbelow(Q), self.rng.randbelow(Q))
        return ProofPresentation(view, forged, self.stolen.revocation_id)


class Topology:
    """Live agents, ledger, transport and capture for one scenario run."""

    def __init__(self, config: ScenarioConfig, with_sockets: Optional[bool] = None) -> None:
        from .did import PublicLedger

        config.validate()
        self.config = config
        self.rng = DeterministicRandom(config.seed, "scenario")
        self.clock = SimClock(config.start_time)
        self.capture = CaptureLog()
        self.transport = make_transport(config.transport, self.capture, self.clock.timestamp)
        self.ledger = PublicLedger()
        self.agents: Dict[str, Agent] = {}
        self.controllers: Dict[str, Controller] = {}
        self.schema_ids: Dict[str, str] = {}
        self.credential_values: List[str] = []
        self.revocation_ids: Dict[str, str] = {}
        self.trust_lines: List[str] = []
        self._logged: set = set()
        self._servers: list = []
        if with_sockets is None:
            with_sockets = config.transport == "tcp"
        self.with_sockets = with_sockets
        for agent_cfg in config.agents:
            self.add_agent(agent_cfg)

    def add_agent(self, agent_cfg: AgentConfig, cls=Agent) -> Agent:
        agent = cls(agent_cfg, self.transport, self.ledger, self.rng.child(agent_cfg.name), self.clock)
        self.agents[agent_cfg.name] = agent
        self.controllers[agent_cfg.name] = Controller(agent)
        if self.with_sockets:
            receiver = WebhookReceiver(agent_cfg.host, agent_cfg.webhook_port)
            poster = WebhookPoster(agent_cfg.host, agent_cfg.webhook_port)
            agent.subscribe(poster)
            self._servers += [AdminServer(agent), receiver, poster]
        return agent

    def close(self) -> None:
        for server in self._servers:
            server.close()
        for agent in self.agents.values():
            agent.close()
        self.transport.close()

    def __enter__(self) -> "Topology":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def settle(self) -> None:
        if not self.transport.wait_idle(30.0):
            raise ScenarioError("transport", "messages still in flight after 30 s")

    # ------------------------------------------------------------------ stages

    def publish_issuers(self) -> None:
        for schema_name, issuer_name in self.config.issuers.items():
            issuer = self.agents[issuer_name]
            issuer.register_public_did()
            schema = issuer.publish_schema(schema_name, "1.0", self.config.schemas[schema_name])
            self.schema_ids[schema_name] = schema.schema_id

    def issuer_did(self, schema_name: str) -> str:
        return str(self.agents[self.config.issuers[schema_name]].public_did)

    def attributes_for(self, holder: str, schema_name: str) -> Dict[str, str]:
        now = format_timestamp(self.clock.now())
        values = {"status": "verified" if schema_name == HOSPITAL_SCHEMA else "audited", "issued_at": now,
                  "hospital_name": holder, "researcher_name": holder}
        names = self.config.schemas[schema_name]
        return {n: values.get(n, f"{holder} {n}") for n in names}

    def issue(self, holder: str, schema_name: str, expiry: Optional[str] = None) -> Credential:
        """Connect ``holder`` to the schema's issuer and run the issuance protocol."""
        issuer_name = self.config.issuers[schema_name]
        issuer, agent = self.agents[issuer_name], self.agents[holder]
        issuer_cid, _holder_cid = connect(issuer, agent)
        attrs = self.attributes_for(holder, schema_name)
        if expiry is None:
            expiry = format_timestamp(self.clock.now() + timedelta(seconds=CREDENTIAL_LIFETIME))
        self.controllers[issuer_name].call("issue_credential", connection_id=issuer_cid,
                                           schema_id=self.schema_ids[schema_name], attributes=attrs, expiry=expiry)
        self.settle()
        stored = [e.credential for e in agent.wallet if e.credential.schema_id == self.schema_ids[schema_name]]
        if not stored:
            raise ScenarioError("issuance", f"{holder} did not receive a {schema_name} credential")
        self.credential_values.extend(attrs.values())
        self.revocation_ids[holder] = stored[-1].revocation_id
        return stored[-1]

    def hospital_policy(self) -> TrustPolicy:
        """What a hospital demands from the researcher."""
        return TrustPolicy(self.schema_ids[RESEARCHER_SCHEMA], frozenset({self.issuer_did(RESEARCHER_SCHEMA)}),
                           ("researcher_name", "status"), {"status": "audited"})

    def researcher_policy(self) -> TrustPolicy:
        """What the researcher demands from a hospital."""
        return TrustPolicy(self.schema_ids[HOSPITAL_SCHEMA], frozenset({self.issuer_did(HOSPITAL_SCHEMA)}),
                           ("hospital_name", "status"), {"status": "verified"})

    def trust(self, name: str) -> Tuple[bool, bool]:
        """Connect ``name`` to the researcher and run the mutual proof exchange."""
        agent, researcher = self.agents[name], self.agents[RESEARCHER]
        connect(researcher, agent)
        outcome = establish_trust(agent, researcher, self.hospital_policy(), self.researcher_policy())
        self._log_proofs(researcher, agent)
        self._log_proofs(agent, researcher)
        return outcome

    def _log_proofs(self, verifier: Agent, peer: Agent) -> None:
        cid = verifier.connection_to(peer).connection_id
        for key, pending in verifier.proofs.items():
            if pending.connection_id != cid or (verifier.name, key) in self._logged:
                continue
            self._logged.add((verifier.name, key))
            if pending.timed_out:
                outcome, failed = "timeout", "-"
            elif pending.result is None:
                outcome, failed = "pending", "-"
            else:
                outcome = "trusted" if pending.result.overall else "rejected"
                failed = ",".join(pending.result.failed_checks()) or "-"
            self.trust_lines.append(f"{format_timestamp(self.clock.now())} verifier={verifier.name!r} "
                                    f"peer={peer.name!r} outcome={outcome} failed={failed}")

    def load_dataset(self) -> fl.Dataset:
        cfg = self.config
        if cfg.dataset is not None:
            return fl.load_csv(cfg.dataset)
        syn = cfg.synthetic
        return fl.synthetic_dataset(cfg.seed, syn.n, syn.d, syn.separation)

    def federate(self, names: Sequence[str], data: fl.Dataset, **kwargs) -> fl.FederationResult:
        parts, validation = fl.partition_dataset(data, len(HOSPITALS), self.config.seed)
        for hospital, part in zip(HOSPITALS, parts):
            fl.attach_trainer(self.agents[hospital], part)
        cfg = replace(self.config.train, seed=self.config.seed)
        initial = fl.ModelParams.zeros(data.d, self.config.activation)
        self.validation = validation
        return fl.run_federation(self.agents[RESEARCHER], [self.agents[n] for n in names], initial, cfg,
                                 validation, **kwargs)

    def secret_needles(self) -> List[bytes]:
        """Byte strings that must never be seen on the wire."""
        needles = []
        for agent in self.agents.values():
            secrets = [agent.link_secret] + [e.link_secret for e in agent.wallet]
            for s in secrets:
                needles.append(s.secret.to_bytes(32, "big"))
                needles.append(scalar_to_b64(s.secret).encode("ascii"))
        return needles


def model_needles(models: Sequence[fl.ModelParams]) -> List[bytes]:
    out = []
    for m in models:
        raw = fl.serialize_model(m)
        out += [raw, crypto.b64url_encode(raw).encode("ascii")]
    return out


def plant_plaintext_frame(log: CaptureLog, needle: bytes, kind: str = "loopback") -> CaptureLog:
    """Copy of ``log`` plus one deliberately unencrypted debug frame carrying ``needle``."""
    planted = CaptureLog()
    for record in log.records:
        planted.append(record)
    transport = make_transport(kind, planted)
    sink = Endpoint("127.0.0.1", 8099)
    try:
        listener = transport.bind(sink, lambda _payload: None)
        listener.send(sink, b"DEBUG plaintext: " + needle)
        transport.wait_idle(5.0)
    finally:
        transport.close()
    return planted


@dataclass
class DemoResult:
    status: int
    rounds: List[fl.RoundResult]
    trusted: Dict[str, Tuple[bool, bool]]
    hits: List[Tuple[bytes, int]]
    needles: List[bytes]
    validation_size: int
    capture: CaptureLog
    out_dir: Path
    stage: Optional[str] = None
    error: Optional[str] = None


def _write_artifacts(out: Path, topo: Topology, rounds: Sequence[fl.RoundResult]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / ROUNDS_FILE).write_text(fl.rounds_csv(rounds), encoding="ascii")
    topo.capture.write(out / CAPTURE_FILE)
    (out / TRUST_FILE).write_text("".join(line + "\n" for line in topo.trust_lines), encoding="utf-8")


def run_demo(config: ScenarioConfig, out_dir) -> DemoResult:
    """Full run: issuance, mutual trust, federation, artifacts and leak scan."""
    out = Path(out_dir)
    config.validate()
    stage = "setup"
    rounds: List[fl.RoundResult] = []
    trusted: Dict[str, Tuple[bool, bool]] = {}
    with Topology(config) as topo:
        try:
            stage = "issuers"
            topo.publish_issuers()
            stage = "issuance"
            topo.issue(RESEARCHER, RESEARCHER_SCHEMA)
            for name in HOSPITALS:
                topo.issue(name, HOSPITAL_SCHEMA)
            stage = "trust"
            for name in HOSPITALS:
                trusted[name] = topo.trust(name)
                if trusted[name] != (True, True):
                    raise ScenarioError(stage, f"{name} trust outcome {trusted[name]}")
            stage = "dataset"
            data = topo.load_dataset()
            stage = "federation"
            result = topo.federate(list(HOSPITALS), data)
            if result.partial:
                raise ScenarioError(stage, result.error or "incomplete federation")
            rounds = list(result)
            stage = "scan"
            models = [m["model"] for m in topo.agents[RESEARCHER].model_inbox]
            needles = [v.encode("utf-8") for v in topo.credential_values]
            needles += model_needles([fl.ModelParams.zeros(data.d, config.activation)])
            needles += [m for raw in models for m in (raw, crypto.b64url_encode(raw).encode("ascii"))]
            needles += topo.secret_needles()
            hits = scan_capture(topo.capture, needles)
            _write_artifacts(out, topo, rounds)
            if hits:
                raise ScenarioError(stage, f"{len(hits)} plaintext hits in capture")
            return DemoResult(0, rounds, trusted, hits, needles, topo.validation.n, topo.capture, out)
        except Exception as exc:
            logger.error("stage %s failed: %s", stage, exc)
            _write_artifacts(out, topo, rounds)
            return DemoResult(1, rounds, trusted, [], [], 0, topo.capture, out, stage, str(exc))


@dataclass
class MaliciousCase:
    name: str
    trusted: bool
    outcome: str
    failed_checks: Tuple[str, ...]
    frames_during_federation: int

    def to_json(self) -> dict:
        return {"name": self.name, "trusted": self.trusted, "outcome": self.outcome,
                "failed_checks": list(self.failed_checks),
                "frames_during_federation": self.frames_during_federation}


def _researcher_verdict(topo: Topology, name: str) -> Tuple[str, Tuple[str, ...]]:
    researcher = topo.agents[RESEARCHER]
    cid = researcher.connection_to(topo.agents[name]).connection_id
    verdicts = [p for p in researcher.proofs.values() if p.connection_id == cid]
    if not verdicts:
        return "no proof", ()
    last = verdicts[-1]
    if last.timed_out:
        return "timeout", ()
    if last.result is None:
        return "pending", ()
    return ("trusted" if last.result.overall else "rejected"), last.result.failed_checks()


def run_malicious(config: ScenarioConfig, out_dir=None) -> dict:
    """Rogue participants try to join; none may be trusted or receive a model.

    Cases: an agent with no credential, an agent holding a credential it
    issued to itself, an agent replaying a credential copied from a real
    hospital, and a hospital whose credential is revoked after round 1.
    """
    config.validate()
    used = {p for a in config.agents for p in a.ports}
    base = max(used) + 10
    rogue_names = ("Rogue No-Credential", "Rogue Self-Signed", "Rogue Copied-Credential")
    rogue_cfgs = [AgentConfig(n, base + 10 * i, base + 10 * i + 1, base + 10 * i + 2)
                  for i, n in enumerate(rogue_names)]
    with Topology(config) as topo:
        topo.publish_issuers()
        topo.issue(RESEARCHER, RESEARCHER_SCHEMA)
        for name in HOSPITALS:
            topo.issue(name, HOSPITAL_SCHEMA)
        topo.add_agent(rogue_cfgs[0])  # never receives a credential
        self_signed = topo.add_agent(rogue_cfgs[1])
        thief = topo.add_agent(rogue_cfgs[2], cls=CredentialThief)

        # self-signed: own public DID and registry, NHS schema, own signature
        self_signed.register_public_did()
        schema = topo.ledger.schema(topo.schema_ids[HOSPITAL_SCHEMA])
        blinded = self_signed.link_secret.reblind(self_signed.rng)
        forged = issue_credential(self_signed.public_keys, self_signed.public_did, schema,
                                  topo.attributes_for(self_signed.name, HOSPITAL_SCHEMA),
                                  commit_link_secret(blinded),
                                  format_timestamp(topo.clock.now() + timedelta(seconds=CREDENTIAL_LIFETIME)),
                                  self_signed.registry, self_signed.rng)
        self_signed.store_credential(forged, blinded)
        thief.stolen = topo.agents["Hospital 1"].wallet[-1].credential

        outcomes = {}
        for name in (*HOSPITALS, *rogue_names):
            outcomes[name] = topo.trust(name)

        revoked = "Hospital 2"

        def revoke_after_first(round_index: int, _hospital) -> None:
            if round_index == 2:
                topo.agents[NHS_TRUST].revoke_credential(topo.revocation_ids[revoked])

        rogue_endpoints = {c.endpoint for c in rogue_cfgs}
        start = len(topo.capture)
        data = topo.load_dataset()
        result = topo.federate([*HOSPITALS, *rogue_names], data, skip_untrusted=True,
                               before_round=revoke_after_first)
        frames = topo.capture.records[start:]
        cases = []
        for name in rogue_names:
            outcome, failed = _researcher_verdict(topo, name)
            cid = topo.agents[RESEARCHER].connection_to(topo.agents[name]).connection_id
            endpoint = next(c.endpoint for c in rogue_cfgs if c.name == name)
            cases.append(MaliciousCase(name, topo.agents[RESEARCHER].is_trusted(cid), outcome, failed,
                                       sum(1 for r in frames if r.dst == endpoint)))
        revoked_endpoint = topo.config.agent(revoked).endpoint
        researcher = topo.agents[RESEARCHER]
        start_rounds = {r.round for r in result}
        cases.append(MaliciousCase(
            f"{revoked} (revoked after round 1)",
            researcher.is_trusted(researcher.connection_to(topo.agents[revoked]).connection_id),
            "excluded" if revoked in result.excluded else "included",
            ("not_revoked",) if revoked in result.excluded else (),
            sum(1 for r in frames if r.dst == revoked_endpoint),
        ))
        report_doc = {
            "cases": [c.to_json() for c in cases],
            "excluded": list(result.excluded),
            "rounds": sorted(start_rounds),
            "rogue_frames_during_federation": sum(1 for r in frames if r.dst in rogue_endpoints),
            "trust_outcomes": {k: list(v) for k, v in outcomes.items()},
        }
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "malicious.json").write_text(json.dumps(report_doc, indent=2, sort_keys=True), encoding="utf-8")
            (out / TRUST_FILE).write_text("".join(line + "\n" for line in topo.trust_lines), encoding="utf-8")
        return report_doc


@dataclass
class AgentTraffic:
    name: str
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0


def traffic_by_agent(log: CaptureLog, agents: Sequence[AgentConfig] = DEFAULT_AGENTS) -> Dict[str, AgentTraffic]:
    names = {a.endpoint: a.name for a in agents}
    table: Dict[str, AgentTraffic] = {a.name: AgentTraffic(a.name) for a in agents}

    def row(endpoint: Optional[Endpoint]) -> Optional[AgentTraffic]:
        if endpoint is None:
            return None
        name = names.get(endpoint, str(endpoint))
        return table.setdefault(name, AgentTraffic(name))

    for record in log.records:
        src, dst = row(record.src), row(record.dst)
        if src is not None:
            src.bytes_sent += len(record.frame)
            src.messages_sent += 1
        dst.bytes_received += len(record.frame)
        dst.messages_received += 1
    return table


def report(out_dir, agents: Sequence[AgentConfig] = DEFAULT_AGENTS) -> str:
    out = Path(out_dir)
    capture_path, rounds_path = out / CAPTURE_FILE, out / ROUNDS_FILE
    for path in (capture_path, rounds_path):
        if not path.exists():
            raise MissingArtifact(f"{path} not found")
    log = CaptureLog.load(capture_path)
    table = traffic_by_agent(log, agents)
    lines = [f"{'agent':<26}{'sent B':>10}{'recv B':>10}{'sent #':>8}{'recv #':>8}"]
    for t in table.values():
        lines.append(f"{t.name:<26}{t.bytes_sent:>10}{t.bytes_received:>10}"
                     f"{t.messages_sent:>8}{t.messages_received:>8}")
    lines.append(f"{'total':<26}{log.total_bytes():>10}{log.total_bytes():>10}{len(log):>8}{len(log):>8}")
    lines.append("")
    lines.append(f"{'round':>5}{'tp':>6}{'fp':>6}{'tn':>6}{'fn':>6}{'accuracy':>10}")
    rows = rounds_path.read_text(encoding="ascii").splitlines()[1:]
    for line in rows:
        r, tp, fp, tn, fn, acc = line.split(",")
        lines.append(f"{r:>5}{tp:>6}{fp:>6}{tn:>6}{fn:>6}{float(acc) * 100:>9.1f}%")
    return "\n".join(lines) + "\n"


def _build_config(args: argparse.Namespace) -> ScenarioConfig:
    config = load_config(args.config) if args.config else ScenarioConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.transport is not None:
        overrides["transport"] = args.transport
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    return replace(config, **overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="trustfl", description="Trusted federated learning scenario runner")
    parser.add_argument("verb", choices=("run-demo", "run-malicious", "scan-capture", "report"))
    parser.add_argument("--config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--transport", choices=("loopback", "tcp"))
    parser.add_argument("--dataset")
    parser.add_argument("--out", default="out")
    parser.add_argument("--needle", action="append", default=[],
                        help="scan-capture: byte string to search for (repeatable)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "run-demo":
            result = run_demo(_build_config(args), args.out)
            if result.status != 0:
                print(f"run-demo failed at stage {result.stage}: {result.error}", file=sys.stderr)
                return result.status
            print(report(args.out, _build_config(args).agents), end="")
            return 0
        if args.verb == "run-malicious":
            doc = run_malicious(_build_config(args), args.out)
            for case in doc["cases"]:
                failed = ",".join(case["failed_checks"]) or "-"
                print(f"{case['name']}: trusted={case['trusted']} outcome={case['outcome']} failed={failed} "
                      f"frames_during_federation={case['frames_during_federation']}")
            rogue_ok = all(not c["trusted"] and c["frames_during_federation"] == 0 for c in doc["cases"])
            return 0 if rogue_ok else 1
        if args.verb == "scan-capture":
            path = Path(args.out) / CAPTURE_FILE
            if not path.exists():
                raise MissingArtifact(f"{path} not found")
            hits = scan_capture(CaptureLog.load(path), [n.encode("utf-8") for n in args.needle])
            for needle, index in hits:
                print(f"hit frame={index} needle={needle.decode('utf-8', 'replace')!r}")
            print(f"{len(hits)} hit(s)")
            return 1 if hits else 0
        print(report(args.out, _build_config(args).agents), end="")
        return 0
    except ScenarioError as exc:
        print(f"error in stage {exc.stage}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
