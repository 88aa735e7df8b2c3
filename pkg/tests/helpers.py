import socket
import threading

from didb.directory import DirectoryServer


def send_lines(port, lines, expect=None, host="127.0.0.1", timeout=5.0):
    """Send lines on one connection; read ``expect`` reply lines (default: one per line)."""
    expect = len(lines) if expect is None else expect
    with socket.create_connection((host, port), timeout=timeout) as s:
        s.sendall("".join(x + "\n" for x in lines).encode())
        f = s.makefile("rb")
        return [f.readline().decode().rstrip("\n") for _ in range(expect)]


class running:
    """Run a socketserver in a background thread for the duration of a with-block."""

    def __init__(self, server):
        self.server = server

    def __enter__(self):
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05},
                                       daemon=True)
        self.thread.start()
        return self.server

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def directory(ttl=30.0):
    return running(DirectoryServer(("127.0.0.1", 0), ttl))


def dead_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def list_nodes(port, host="127.0.0.1", timeout=5.0):
    """Directory LIST as a list of ``host:port`` strings."""
    with socket.create_connection((host, port), timeout=timeout) as s:
        s.sendall(b"LIST\n")
        f = s.makefile("rb")
        out = []
        for raw in f:
            line = raw.decode().rstrip("\n")
            if line == "END":
                return out
            out.append(line)
    raise ConnectionError("directory closed before END")
