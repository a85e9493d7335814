"""Wire framing and the inline inference server (with a stubbed model path)."""

import socket
import struct

import numpy as np
import pytest

import cardiomark.service as service
from cardiomark.errors import ProtocolError
from cardiomark.heatmap import VIEWS, LandmarkSet
from cardiomark.service import (
    FrameStream,
    InferenceServer,
    MAX_PAYLOAD,
    pack_frame,
    recv_frame,
    send_frame,
    unpack_payload,
)


class TestFraming:
    def test_roundtrip_random_payloads(self, rng):
        for _ in range(20):
            header = {"series": "s", "frame": int(rng.integers(100)),
                      "blob": rng.integers(10 ** 6).item()}
            pixels = rng.integers(0, 256, int(rng.integers(0, 5000))).astype(
                np.uint8).tobytes()
            frame = pack_frame(header, pixels)
            (plen,) = struct.unpack(">I", frame[:4])
            h, px = unpack_payload(frame[4 : 4 + plen])
            assert h == header and px == pixels

    def test_stream_split_at_arbitrary_boundaries(self, rng):
        frames = [
            ({"i": i}, rng.integers(0, 256, int(rng.integers(0, 800))).astype(
                np.uint8).tobytes())
            for i in range(12)
        ]
        blob = b"".join(pack_frame(h, p) for h, p in frames)
        for _ in range(10):
            stream = FrameStream()
            got = []
            pos = 0
            while pos < len(blob):
                step = int(rng.integers(1, 97))
                got += stream.feed(blob[pos : pos + step])
                pos += step
            assert [h["i"] for h, _p in got] == list(range(12))
            assert all(p == frames[i][1] for i, (_h, p) in enumerate(got))
            assert stream.pending == 0

    def test_oversize_rejected_on_pack(self):
        with pytest.raises(ProtocolError):
            pack_frame({}, b"\0" * (MAX_PAYLOAD + 1))

    def test_oversize_rejected_on_feed(self):
        stream = FrameStream()
        with pytest.raises(ProtocolError):
            stream.feed(struct.pack(">I", MAX_PAYLOAD + 1) + b"xxxx")

    def test_malformed_header_length(self):
        payload = struct.pack(">I", 999) + b"{}"
        with pytest.raises(ProtocolError):
            unpack_payload(payload)


def _stub_infer(lengths_by_frame):
    def stub(model, image, view, frame, tau):
        idx = stub.calls
        stub.calls += 1
        pts = {s: (10.0 + i, 20.0 + i) for i, s in enumerate(VIEWS[view])}
        lm = LandmarkSet(view, pts, image.pixels.shape, image.spacing_mm)
        length = lengths_by_frame(idx) if view in ("CH2", "CH3", "CH4") else None
        return lm, length

    stub.calls = 0
    return stub


@pytest.fixture
def stub_server(monkeypatch):
    servers = []

    def make(lengths_by_frame=lambda i: 70.0):
        monkeypatch.setattr(service, "infer_image", _stub_infer(lengths_by_frame))
        srv = InferenceServer(model=None, frame=(160, 160))
        srv.start()
        servers.append(srv)
        return srv.address

    yield make
    for srv in servers:
        srv.stop()


def _req(series, idx, view="CH4", h=16, w=16, last=False, spacing=(1.0, 1.0)):
    header = {"series": series, "frame": idx, "height": h, "width": w,
              "spacing_mm": list(spacing), "view": view, "last_frame": last}
    pixels = np.zeros((h, w), dtype="<f4").tobytes()
    return header, pixels


class TestServer:
    def test_series_roundtrip_with_shortening(self, stub_server, capsys):
        # LV lengths max 80 / min 60 across the series -> shortening 25%
        host, port = stub_server(lambda i: [80.0, 70.0, 60.0, 75.0][i % 4])
        with socket.create_connection((host, port)) as sock:
            responses = []
            for i in range(8):
                h, px = _req("cine1", i, last=(i == 7))
                send_frame(sock, h, px)
                responses.append(recv_frame(sock)[0])
        for i, r in enumerate(responses):
            assert r["series"] == "cine1" and r["frame"] == i
            assert r["landmarks"]["APEX"] is not None
        assert responses[-1]["ed_mm"] == 80.0
        assert responses[-1]["es_mm"] == 60.0
        summary = responses[-1]["series_summary"]
        assert summary["shortening_pct"] == pytest.approx(25.0)
        assert summary["n_frames"] == 8
        assert "elapsed_s" in summary
        assert "series cine1: 8 frames" in capsys.readouterr().out

    def test_sax_frames_have_no_length(self, stub_server):
        host, port = stub_server()
        with socket.create_connection((host, port)) as sock:
            h, px = _req("sax1", 0, view="SAX", last=True)
            send_frame(sock, h, px)
            r = recv_frame(sock)[0]
        assert r["lv_length_mm"] is None
        assert "shortening_pct" not in r["series_summary"]

    def test_interleaved_series_on_two_connections(self, stub_server):
        host, port = stub_server()
        with socket.create_connection((host, port)) as s1, \
                socket.create_connection((host, port)) as s2:
            for i in range(3):
                send_frame(s1, *_req("A", i))
                send_frame(s2, *_req("B", i))
                ra = recv_frame(s1)[0]
                rb = recv_frame(s2)[0]
                assert ra["series"] == "A" and ra["frame"] == i
                assert rb["series"] == "B" and rb["frame"] == i

    def test_identical_frames_identical_responses(self, stub_server):
        host, port = stub_server()
        with socket.create_connection((host, port)) as sock:
            send_frame(sock, *_req("s", 5))
            r1 = recv_frame(sock)[0]
            send_frame(sock, *_req("s", 5))
            r2 = recv_frame(sock)[0]
        assert r1["landmarks"] == r2["landmarks"]

    def test_bad_pixel_count_gets_error_and_close(self, stub_server):
        host, port = stub_server()
        with socket.create_connection((host, port)) as sock:
            header, _ = _req("s", 0)
            send_frame(sock, header, b"\0" * 7)  # wrong byte count
            resp = recv_frame(sock)[0]
            assert "error" in resp
            assert recv_frame(sock) is None  # server closed the connection

    def test_unknown_view_rejected(self, stub_server):
        host, port = stub_server()
        with socket.create_connection((host, port)) as sock:
            header, px = _req("s", 0)
            header["view"] = "AXIAL"
            send_frame(sock, header, px)
            resp = recv_frame(sock)[0]
            assert "error" in resp

    def test_oversize_claim_closes_connection(self, stub_server):
        host, port = stub_server()
        with socket.create_connection((host, port)) as sock:
            sock.sendall(struct.pack(">I", MAX_PAYLOAD + 5))
            sock.sendall(b"junk")
            sock.shutdown(socket.SHUT_WR)
            try:
                assert sock.recv(4096) == b""  # FIN
            except ConnectionResetError:
                pass  # RST: closed with unread data still buffered
