import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from torus2d.transport import (HEADER_SIZE, FabricClosed, FrameError, InprocFabric,
                               InvalidDestination, RecvTimeout, TcpEndpoint, WireMessage,
                               create_inproc_fabric, decode_frame, encode_frame, load_peers)

from conftest import free_ports


def msg(cid=0, phase=0, step=0, src=0, dtype=0, payload=b""):
    return WireMessage(cid, phase, step, src, dtype, payload)


def test_header_size_matches_layout():
    # magic u32, version u8, cid u32, phase u8, step u32, src u32, dtype u8, len u64
    assert HEADER_SIZE == 4 + 1 + 4 + 1 + 4 + 4 + 1 + 8 == 27
    assert len(encode_frame(msg())) == 27


def test_frame_layout_is_little_endian():
    frame = encode_frame(msg(cid=7, phase=2, step=3, src=5, dtype=1, payload=b"\x00\x3c"))
    assert frame[:4] == bytes([0x52, 0x54, 0x44, 0x32])
    assert frame[4] == 1
    assert frame[5:9] == (7).to_bytes(4, "little")
    assert frame[9] == 2
    assert frame[10:14] == (3).to_bytes(4, "little")
    assert frame[14:18] == (5).to_bytes(4, "little")
    assert frame[18] == 1
    assert frame[19:27] == (2).to_bytes(8, "little")
    assert frame[27:] == b"\x00\x3c"


payload_sizes = {0: 4, 1: 2, 2: 8}


@st.composite
def messages(draw):
    dtype = draw(st.integers(0, 2))
    n = draw(st.integers(0, 64))
    return WireMessage(
        draw(st.integers(0, 2**32 - 1)), draw(st.integers(0, 255)), draw(st.integers(0, 2**32 - 1)),
        draw(st.integers(0, 2**32 - 1)), dtype, draw(st.binary(min_size=n * payload_sizes[dtype],
                                                                max_size=n * payload_sizes[dtype])))


@given(messages())
def test_frame_round_trip(m):
    assert decode_frame(encode_frame(m)) == m


def test_decode_errors():
    good = encode_frame(msg(payload=b"\x00" * 8))
    bad_magic = b"\x00" + good[1:]
    with pytest.raises(FrameError, match="magic"):
        decode_frame(bad_magic)
    with pytest.raises(FrameError, match="version"):
        decode_frame(good[:4] + b"\x02" + good[5:])
    with pytest.raises(FrameError, match="truncated"):
        decode_frame(good[:-1])
    with pytest.raises(FrameError, match="truncated header"):
        decode_frame(good[:10])
    with pytest.raises(FrameError, match="dtype"):
        decode_frame(good[:18] + b"\x03" + good[19:])


def test_payload_must_be_whole_elements():
    with pytest.raises(ValueError):
        msg(dtype=0, payload=b"\x00" * 3)
    with pytest.raises(ValueError):
        msg(dtype=5)


def test_array_round_trip():
    a = np.array([1.5, -2.25, 3.0], dtype=np.float16)
    m = WireMessage.from_array(a, collective_id=1, phase=0, step=0, src=0)
    assert m.dtype == 1 and m.payload_len == 6
    np.testing.assert_array_equal(decode_frame(encode_frame(m)).to_array(), a)


def test_inproc_single_rank():
    eps = create_inproc_fabric(1)
    assert len(eps) == 1 and eps[0].rank == 0
    with pytest.raises(InvalidDestination):
        eps[0].send(0, msg())


def test_inproc_delivery_and_fifo():
    eps = create_inproc_fabric(4)
    eps[0].send(1, msg(payload=b"\x01\x00\x00\x00"))
    eps[0].send(1, msg(payload=b"\x02\x00\x00\x00"))
    assert eps[1].recv(0, 0, 0, 0).payload[0] == 1
    assert eps[1].recv(0, 0, 0, 0).payload[0] == 2
    assert eps[1].try_recv(0, 0, 0, 0) is None


def test_inproc_exact_key_matching():
    eps = create_inproc_fabric(3)
    eps[0].send(2, msg(cid=1, step=0, payload=b"\x01\x00\x00\x00"))
    eps[0].send(2, msg(cid=0, step=0, payload=b"\x02\x00\x00\x00"))
    eps[1].send(2, msg(cid=0, step=0, src=1, payload=b"\x03\x00\x00\x00"))
    assert eps[2].recv(0, 0, 0, 0).payload[0] == 2
    assert eps[2].recv(1, 0, 0, 0).payload[0] == 3
    assert eps[2].recv(0, 1, 0, 0).payload[0] == 1


def test_inproc_errors():
    eps = create_inproc_fabric(2)
    with pytest.raises(InvalidDestination):
        eps[0].send(5, msg())
    with pytest.raises(RecvTimeout):
        eps[0].recv(1, 0, 0, 0, timeout=0.01)
    eps[0].fabric.close()
    with pytest.raises(FabricClosed):
        eps[0].send(1, msg())
    with pytest.raises(FabricClosed):
        eps[1].recv(0, 0, 0, 0)


def test_closing_wakes_blocked_receiver():
    eps = create_inproc_fabric(2)
    errors = []

    def waiter():
        try:
            eps[1].recv(0, 0, 0, 0)
        except FabricClosed as exc:
            errors.append(exc)

    th = threading.Thread(target=waiter)
    th.start()
    eps[0].fabric.close()
    th.join(5)
    assert not th.is_alive() and errors


def test_send_log_records_every_message():
    fabric = InprocFabric(2)
    fabric.endpoints[0].send(1, msg(phase=1, step=4, payload=b"\x00" * 8))
    (rec,) = fabric.log
    assert (rec.src, rec.dst, rec.phase, rec.step, rec.nbytes) == (0, 1, 1, 4, 8)


def test_load_peers(tmp_path):
    path = tmp_path / "peers"
    path.write_text("# table\n0 127.0.0.1:5000\n1 localhost:5001  # second\n\n")
    assert load_peers(path) == {0: ("127.0.0.1", 5000), 1: ("localhost", 5001)}
    path.write_text("0 127.0.0.1:5000\n2 127.0.0.1:5001\n")
    with pytest.raises(ValueError):
        load_peers(path)
    path.write_text("0 127.0.0.1\n")
    with pytest.raises(ValueError):
        load_peers(path)


def test_tcp_point_to_point():
    ports = free_ports(3)
    peers = {r: ("127.0.0.1", p) for r, p in enumerate(ports)}
    eps = [TcpEndpoint(r, peers, timeout=5.0) for r in range(3)]
    try:
        eps[0].send(1, msg(cid=3, step=1, payload=b"\x01\x00\x00\x00"))
        eps[0].send(1, msg(cid=3, step=0, payload=b"\x02\x00\x00\x00"))
        eps[2].send(1, msg(cid=3, step=0, src=2, payload=b"\x03\x00\x00\x00"))
        assert eps[1].recv(0, 3, 0, 0).payload[0] == 2
        assert eps[1].recv(0, 3, 0, 1).payload[0] == 1
        assert eps[1].recv(2, 3, 0, 0).payload[0] == 3
        for i in range(20):
            eps[2].send(0, msg(src=2, payload=i.to_bytes(4, "little")))
        assert [eps[0].recv(2, 0, 0, 0).payload[0] for _ in range(20)] == list(range(20))
        with pytest.raises(RecvTimeout):
            eps[1].recv(0, 9, 0, 0, timeout=0.05)
        with pytest.raises(InvalidDestination):
            eps[0].send(0, msg())
        # only the peers actually used got connections
        assert set(eps[0]._out) == {1} and set(eps[1]._out) == set()
    finally:
        for ep in eps:
            ep.close()
