"""
Newline-delimited JSON over a Unix stream socket.

Every connection gets its own reader thread; requests are forwarded to a
single engine worker through one FIFO queue, so callLLM runs one at a time
while each connection sees its responses in request order. The first request
of a connection may be {"op": "bind", "client_id": ...}; without it the
connection acts as client "local".
"""

import json
import os
import queue
import socket
import threading
from concurrent.futures import Future
from typing import Optional

from src.service.llm_service import LlmService, ResponseStatus, ServiceResponse
from src.service.logger import logger

_STOP = object()


class LlmSocketServer:

    def __init__(self, service: LlmService, socket_path: str):
        self.service = service
        self.socket_path = socket_path
        self._requests: "queue.Queue" = queue.Queue()
        self._sock: Optional[socket.socket] = None
        self._stopping = threading.Event()
        self._threads = []

    def start(self) -> "LlmSocketServer":
        if os.path.exists(self.socket_path):
            os.remove(self.socket_path)
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(self.socket_path)
        self._sock.listen(16)
        for target, name in ((self._engine_loop, "llms-engine"), (self._accept_loop, "llms-accept")):
            thread = threading.Thread(target=target, name=name, daemon=True)
            thread.start()
            self._threads.append(thread)
        logger.info("serving on %s", self.socket_path)
        return self

    def serve_forever(self) -> None:
        self.start()
        try:
            self._stopping.wait()
        except KeyboardInterrupt:
            logger.info("interrupted")
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        if self._sock is None:
            return
        self._stopping.set()
        self._requests.put(_STOP)
        try:
            self._sock.close()
        finally:
            self._sock = None
            if os.path.exists(self.socket_path):
                os.remove(self.socket_path)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                break
            threading.Thread(target=self._connection, args=(conn,), name="llms-conn", daemon=True).start()

    def _engine_loop(self) -> None:
        while True:
            item = self._requests.get()
            if item is _STOP:
                return
            client_id, request, future = item
            future.set_result(self.service.handle(client_id, request))

    def submit(self, client_id: str, request: dict) -> ServiceResponse:
        future: Future = Future()
        self._requests.put((client_id, request, future))
        return future.result()

    def _connection(self, conn: socket.socket) -> None:
        client_id = "local"
        with conn, conn.makefile("rwb") as stream:
            for line in stream:
                if not line.strip():
                    continue
                try:
                    request = json.loads(line)
                    if not isinstance(request, dict):
                        raise ValueError("request must be a JSON object")
                except ValueError as e:
                    response = ServiceResponse(ResponseStatus.INVALID_REQUEST, error=f"bad request: {e}")
                else:
                    if request.get("op") == "bind":
                        client_id = str(request.get("client_id") or client_id)
                        self.service.bind(client_id)
                    response = self.submit(client_id, request)
                try:
                    stream.write((json.dumps(response.to_wire(), ensure_ascii=False) + "\n").encode("utf-8"))
                    stream.flush()
                except OSError:
                    logger.warning("client %s went away", client_id)
                    return
