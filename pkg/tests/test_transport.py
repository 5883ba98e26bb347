"""Loopback and TCP frame delivery, capture and scanning."""

import threading

import pytest

from trustfl.transport import (
    MAX_FRAME,
    AddressInUse,
    CaptureLog,
    CaptureRecord,
    Endpoint,
    FrameTooLarge,
    LoopbackTransport,
    TcpTransport,
    Unreachable,
    frame,
    make_transport,
    scan_capture,
)

from helpers import free_port


@pytest.fixture(params=["loopback", "tcp"])
def transport(request):
    t = make_transport(request.param)
    yield t
    t.close()


def endpoint():
    return Endpoint("127.0.0.1", free_port())


class TestEndpoint:
    @pytest.mark.parametrize("port", [0, 65536, -1])
    def test_port_range(self, port):
        with pytest.raises(ValueError):
            Endpoint("127.0.0.1", port)

    def test_parse(self):
        assert Endpoint.parse("tcp://127.0.0.1:8050") == Endpoint("127.0.0.1", 8050)
        assert Endpoint.parse("localhost:1") == Endpoint("localhost", 1)
        assert Endpoint("h", 5).uri == "tcp://h:5"

    def test_parse_rejects(self):
        with pytest.raises(ValueError):
            Endpoint.parse("no-port")


def test_frame_prefix():
    assert frame(b"abc") == b"\x00\x00\x00\x03abc"


def test_bind_then_send(transport):
    got = []
    ep = endpoint()
    listener = transport.bind(ep, got.append)
    listener.send(ep, b"payload")
    assert transport.wait_idle(5)
    assert got == [b"payload"]
    assert transport.capture.records[0].frame == frame(b"payload")
    assert transport.capture.records[0].dst == ep


def test_double_bind(transport):
    ep = endpoint()
    transport.bind(ep, lambda _: None)
    with pytest.raises(AddressInUse):
        transport.bind(ep, lambda _: None)


def test_unbound_destination(transport):
    with pytest.raises(Unreachable):
        transport.send(endpoint(), b"x")
    assert transport.wait_idle(1)


def test_frame_too_large(transport):
    ep = endpoint()
    transport.bind(ep, lambda _: None)
    with pytest.raises(FrameTooLarge):
        transport.send(ep, bytes(MAX_FRAME + 1))
    assert len(transport.capture) == 0


def test_per_pair_order_preserved(transport):
    got = []
    ep = endpoint()
    transport.bind(ep, got.append)
    for i in range(50):
        transport.send(ep, str(i).encode())
    assert transport.wait_idle(5)
    assert got == [str(i).encode() for i in range(50)]


def test_handlers_never_overlap(transport):
    ep = endpoint()
    active = []
    overlaps = []
    lock = threading.Lock()

    def handler(_payload):
        with lock:
            active.append(1)
            if len(active) > 1:
                overlaps.append(1)
        threading.Event().wait(0.001)
        with lock:
            active.pop()

    transport.bind(ep, handler)
    senders = [threading.Thread(target=lambda: [transport.send(ep, b"x") for _ in range(10)]) for _ in range(4)]
    for s in senders:
        s.start()
    for s in senders:
        s.join()
    assert transport.wait_idle(10)
    assert not overlaps


def test_handler_error_does_not_wedge(transport):
    ep = endpoint()
    transport.bind(ep, lambda _: 1 / 0)
    transport.send(ep, b"x")
    assert transport.wait_idle(5)


def test_loopback_nested_sends_are_queued_not_reentrant():
    t = LoopbackTransport()
    a, b = Endpoint("h", 1), Endpoint("h", 2)
    order = []
    depth = [0]

    def on_a(payload):
        depth[0] += 1
        order.append(("a", payload, depth[0]))
        t.send(b, payload + b"!", source=a)
        depth[0] -= 1

    t.bind(a, on_a)
    t.bind(b, lambda p: order.append(("b", p, depth[0])))
    t.send(a, b"1")
    assert order == [("a", b"1", 1), ("b", b"1!", 0)]


def test_tcp_after_close_is_unreachable():
    t = TcpTransport(connect_timeout=1)
    ep = endpoint()
    t.bind(ep, lambda _: None)
    t.unbind(ep)
    with pytest.raises(Unreachable):
        t.send(ep, b"x")


class TestCapture:
    def test_export_load_roundtrip(self, tmp_path):
        log = CaptureLog()
        log.append(CaptureRecord(1.5, Endpoint("a", 1), Endpoint("b", 2), b"\x00\x01frame"))
        log.append(CaptureRecord(2.0, None, Endpoint("b", 2), b""))
        path = tmp_path / "cap.ndjson"
        log.write(path)
        assert path.read_text().splitlines()[0].startswith("1.500000,a:1,b:2,")
        back = CaptureLog.load(path)
        assert back.records == log.records
        assert back.total_bytes() == log.total_bytes() == 7

    def test_scan_finds_every_occurrence(self):
        log = CaptureLog()
        log.append(CaptureRecord(0, None, Endpoint("b", 2), b"xx secret yy secret"))
        log.append(CaptureRecord(0, None, Endpoint("b", 2), b"nothing here"))
        log.append(CaptureRecord(0, None, Endpoint("b", 2), b"aaaa"))
        hits = scan_capture(log, [b"secret", b"aa"])
        assert sorted(hits) == [(b"aa", 2), (b"aa", 2), (b"aa", 2), (b"secret", 0), (b"secret", 0)]

    def test_planted_needle_single_hit(self):
        log = CaptureLog()
        for i in range(10):
            log.append(CaptureRecord(0, None, Endpoint("b", 2), bytes([i]) * 40))
        log.append(CaptureRecord(0, None, Endpoint("b", 2), b"debug: PLANTED-VALUE"))
        assert scan_capture(log, [b"PLANTED-VALUE"]) == [(b"PLANTED-VALUE", 10)]

    def test_no_needles(self):
        log = CaptureLog()
        log.append(CaptureRecord(0, None, Endpoint("b", 2), b"abc"))
        assert scan_capture(log, []) == []
        assert scan_capture(log, [b""]) == []
