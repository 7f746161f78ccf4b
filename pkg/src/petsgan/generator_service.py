"""Out-of-process generator protocol.

Every message is a little-endian u32 byte length followed by the payload.
On connect the server sends a JSON handshake
``{"protocol", "latent_dim", "channels", "height", "width"}``.
Requests are ``u32 dim, f32[dim]``; responses are ``u32 c, u32 h, u32 w, f32[c*h*w]``.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading

import numpy as np
import torch

PROTOCOL = "petsgan-gen-1"


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        buf.extend(chunk)
    return bytes(buf)


def send_message(sock, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def recv_message(sock) -> bytes:
    (n,) = struct.unpack("<I", _recv_exact(sock, 4))
    return _recv_exact(sock, n)


def encode_request(z) -> bytes:
    z = np.asarray(z, dtype="<f4").ravel()
    return struct.pack("<I", z.size) + z.tobytes()


def decode_request(payload: bytes) -> np.ndarray:
    (dim,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + 4 * dim:
        raise ValueError("malformed latent request")
    return np.frombuffer(payload, dtype="<f4", offset=4, count=dim)


def encode_response(img) -> bytes:
    img = np.asarray(img, dtype="<f4")
    c, h, w = img.shape
    return struct.pack("<III", c, h, w) + img.tobytes()


def decode_response(payload: bytes) -> np.ndarray:
    c, h, w = struct.unpack_from("<III", payload)
    if len(payload) != 12 + 4 * c * h * w:
        raise ValueError("malformed image response")
    return np.frombuffer(payload, dtype="<f4", offset=12, count=c * h * w).reshape(c, h, w)


def _parse_address(address):
    if isinstance(address, tuple):
        return socket.AF_INET, address
    if address.startswith("unix:"):
        return socket.AF_UNIX, address[5:]
    host, _, port = address.rpartition(":")
    return socket.AF_INET, (host or "127.0.0.1", int(port))


class GeneratorServer:
    """Serve an in-process generator ``fn(z[1, dim]) -> [1, c, h, w]`` over a socket."""

    def __init__(self, fn, latent_dim: int, out_shape, address="127.0.0.1:0"):
        family, addr = _parse_address(address)
        handshake = json.dumps(
            {"protocol": PROTOCOL, "latent_dim": latent_dim, "channels": out_shape[0], "height": out_shape[1], "width": out_shape[2]}
        ).encode()

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                send_message(self.request, handshake)
                while True:
                    try:
                        payload = recv_message(self.request)
                    except ConnectionError:
                        return
                    z = torch.from_numpy(decode_request(payload).copy())
                    with torch.no_grad():
                        img = fn(z[None])[0]
                    send_message(self.request, encode_response(img.detach().cpu().numpy()))

        if family == socket.AF_UNIX:
            server_cls = type("S", (socketserver.ThreadingMixIn, socketserver.UnixStreamServer), {"daemon_threads": True})
        else:
            server_cls = type("S", (socketserver.ThreadingMixIn, socketserver.TCPServer), {"daemon_threads": True, "allow_reuse_address": True})
        self.server = server_cls(addr, Handler)
        self.family = family
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def address(self) -> str:
        if self.family == socket.AF_UNIX:
            return f"unix:{self.server.server_address}"
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "GeneratorServer":
        self._thread.start()
        return self

    def close(self):
        self.server.shutdown()
        self.server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


class _RemoteDecode(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, client):
        ctx.client = client
        ctx.save_for_backward(z)
        return client.decode(z)

    @staticmethod
    def backward(ctx, grad_out):
        (z,) = ctx.saved_tensors
        client = ctx.client
        h = client.fd_step
        grad = torch.zeros_like(z)
        # central differences, one latent coordinate at a time
        for i in range(z.shape[1]):
            e = torch.zeros_like(z)
            e[:, i] = h
            jvp = (client.decode(z + e) - client.decode(z - e)) / (2 * h)
            grad[:, i] = (jvp * grad_out).flatten(1).sum(1)
        return grad, None


class GeneratorClient:
    """Client for a generator service; usable as an external generator handle.

    Gradients w.r.t. the latent are estimated by central finite differences,
    costing 2*latent_dim requests per backward pass.
    """

    value_range = "signed"

    def __init__(self, address, timeout: float = 30.0, fd_step: float = 1e-2):
        family, addr = _parse_address(address)
        self.sock = socket.socket(family, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        self.sock.connect(addr)
        hs = json.loads(recv_message(self.sock).decode())
        if hs.get("protocol") != PROTOCOL:
            raise ConnectionError(f"unexpected protocol {hs.get('protocol')!r}")
        self.latent_dim = hs["latent_dim"]
        self.out_shape = (hs["channels"], hs["height"], hs["width"])
        self.fd_step = fd_step
        self._lock = threading.Lock()

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        outs = []
        with self._lock:
            for row in z.detach().reshape(-1, self.latent_dim):
                send_message(self.sock, encode_request(row.cpu().numpy()))
                outs.append(torch.from_numpy(decode_response(recv_message(self.sock)).copy()))
        return torch.stack(outs).to(z.dtype)

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 1
        zb = z[None] if squeeze else z
        if zb.shape[1] != self.latent_dim:
            raise ValueError(f"latent dim {zb.shape[1]} != service dim {self.latent_dim}")
        out = _RemoteDecode.apply(zb, self)
        return out[0] if squeeze else out

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
