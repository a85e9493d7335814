"""Inline TCP inference service.

Wire framing (all integers big-endian):

    u32 payload length | payload
    payload = u32 JSON header length | JSON header | raw pixel bytes

Request headers carry series id, frame index, extents, spacing, view and a
`last_frame` flag; pixels are little-endian float32, 4*H*W bytes.  Responses
use the same framing with an empty pixel section.  Each response echoes the
frame index and reports landmarks in original-frame coordinates; LAX frames
add the LV length and the running ED/ES lengths, and the final frame of a
series adds the longitudinal shortening ratio and the series wall time.

Connections are handled concurrently against one shared read-only model;
series state lives in the handling connection only.
"""

import json
import socket
import struct
import threading
import time

import numpy as np

from .errors import ProtocolError
from .heatmap import VIEWS
from .inference import infer_image, landmarks_to_json
from .measure import longitudinal_shortening
from .preprocess import Image

MAX_PAYLOAD = 64 * 1024 * 1024


def pack_frame(header, pixels=b""):
    """Encode one frame: length-prefixed JSON header + raw pixel bytes."""
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = struct.pack(">I", len(hj)) + hj + pixels
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload {len(payload)} exceeds {MAX_PAYLOAD} bytes")
    return struct.pack(">I", len(payload)) + payload


def unpack_payload(payload):
    if len(payload) < 4:
        raise ProtocolError("payload shorter than its header length prefix")
    (hlen,) = struct.unpack(">I", payload[:4])
    if hlen > len(payload) - 4:
        raise ProtocolError(f"header length {hlen} exceeds payload")
    try:
        header = json.loads(payload[4 : 4 + hlen].decode())
    except ValueError as exc:
        raise ProtocolError(f"undecodable JSON header: {exc}") from exc
    return header, payload[4 + hlen :]


class FrameStream:
    """Incremental frame splitter; correct for any read-chunk boundaries."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data):
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < 4:
                break
            (plen,) = struct.unpack(">I", bytes(self._buf[:4]))
            if plen > MAX_PAYLOAD:
                raise ProtocolError(f"payload {plen} exceeds {MAX_PAYLOAD} bytes")
            if len(self._buf) < 4 + plen:
                break
            payload = bytes(self._buf[4 : 4 + plen])
            del self._buf[: 4 + plen]
            frames.append(unpack_payload(payload))
        return frames

    @property
    def pending(self):
        return len(self._buf)


def _recv_exactly(sock, n):
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(min(65536, n - got))
        if not part:
            return None
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def recv_frame(sock):
    """Read one framed message; None on clean EOF."""
    head = _recv_exactly(sock, 4)
    if head is None:
        return None
    (plen,) = struct.unpack(">I", head)
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload {plen} exceeds {MAX_PAYLOAD} bytes")
    payload = _recv_exactly(sock, plen)
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return unpack_payload(payload)


def send_frame(sock, header, pixels=b""):
    sock.sendall(pack_frame(header, pixels))


class InferenceServer:
    """Serves landmark detection over persistent TCP connections."""

    def __init__(self, model, frame, tau=0.5, host="127.0.0.1", port=0):
        self.model = model
        self.frame = frame
        self.tau = tau
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._threads = []

    def start(self):
        """Accept connections on a background thread; returns (host, port)."""
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        self._threads.append(t)
        return self.address

    def serve_forever(self):
        print(f"[serve] listening on {self.address[0]}:{self.address[1]}", flush=True)
        try:
            while not self._stop.is_set():
                try:
                    conn, addr = self._listener.accept()
                except OSError:
                    break
                t = threading.Thread(target=self._handle, args=(conn,), daemon=True)
                t.start()
                self._threads.append(t)
        finally:
            self._listener.close()

    def stop(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass

    def _handle(self, conn):
        series = {}  # series id -> dict(lengths, n, t0); confined to this connection
        try:
            with conn:
                while True:
                    frame = recv_frame(conn)
                    if frame is None:
                        return
                    header, pixels = frame
                    try:
                        response = self._process(header, pixels, series)
                    except (ProtocolError, KeyError, ValueError) as exc:
                        send_frame(conn, {"error": str(exc)})
                        return
                    send_frame(conn, response)
        except ProtocolError:
            return
        except OSError:
            return

    def _process(self, header, pixels, series):
        sid = str(header["series"])
        idx = int(header["frame"])
        h = int(header["height"])
        w = int(header["width"])
        view = header["view"]
        if view not in VIEWS:
            raise ProtocolError(f"unknown view {view!r}")
        spacing = tuple(float(v) for v in header["spacing_mm"])
        if len(pixels) != 4 * h * w:
            raise ProtocolError(
                f"pixel payload is {len(pixels)} bytes, expected {4 * h * w}"
            )
        image = Image(
            np.frombuffer(pixels, dtype="<f4").reshape(h, w).astype(np.float32),
            spacing,
        )
        state = series.setdefault(sid, {"lengths": [], "n": 0, "t0": time.perf_counter()})
        landmarks, length = infer_image(self.model, image, view, self.frame, self.tau)
        state["n"] += 1
        response = landmarks_to_json(landmarks, length)
        response["series"] = sid
        response["frame"] = idx
        if length is not None:
            state["lengths"].append(length)
        if state["lengths"]:
            response["ed_mm"] = max(state["lengths"])
            response["es_mm"] = min(state["lengths"])
        if header.get("last_frame"):
            elapsed = time.perf_counter() - state["t0"]
            summary = {"n_frames": state["n"], "elapsed_s": elapsed}
            if state["lengths"]:
                ed = max(state["lengths"])
                es = min(state["lengths"])
                summary["ed_mm"] = ed
                summary["es_mm"] = es
                if ed > 0:
                    summary["shortening_pct"] = longitudinal_shortening(ed, es)
            response["series_summary"] = summary
            print(
                f"[serve] series {sid}: {state['n']} frames in {elapsed:.3f}s "
                f"({1000.0 * elapsed / max(state['n'], 1):.1f} ms/frame)",
                flush=True,
            )
            series.pop(sid, None)
        return response


def serve(checkpoint_path, port, host="127.0.0.1", tau=0.5):
    """Blocking entry point used by the CLI; runs until interrupted."""
    from .inference import load_model

    model, frame, _sigma = load_model(checkpoint_path)
    server = InferenceServer(model, frame, tau=tau, host=host, port=port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
