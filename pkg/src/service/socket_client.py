import json
import socket
from typing import Optional

from src.service.errors import BusyError, LlmsError, NotFoundError, QuotaError

_ERRORS = {"NOT_FOUND": NotFoundError, "BUSY": BusyError, "QUOTA_EXCEEDED": QuotaError}


class LlmClient:
    """Blocking client of the socket service; bind happens on connect."""

    def __init__(self, socket_path: str, client_id: str = "local", timeout: Optional[float] = 60.0):
        self.client_id = client_id
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.settimeout(timeout)
        self._sock.connect(socket_path)
        self._stream = self._sock.makefile("rwb")
        self.request({"op": "bind", "client_id": client_id})

    def request(self, message: dict) -> dict:
        self._stream.write((json.dumps(message, ensure_ascii=False) + "\n").encode("utf-8"))
        self._stream.flush()
        line = self._stream.readline()
        if not line:
            raise ConnectionError("service closed the connection")
        response = json.loads(line)
        if not response.get("ok"):
            raise _ERRORS.get(response.get("status"), LlmsError)(response.get("error", "request failed"))
        return response

    def new_llm_ctx(self, system_prompt: Optional[str] = None) -> int:
        message = {"op": "new"}
        if system_prompt:
            message["system_prompt"] = system_prompt
        return int(self.request(message)["ctx_id"])

    def call_llm(self, ctx_id: int, prompt: str, max_new_tokens: Optional[int] = None) -> dict:
        message = {"op": "call", "ctx_id": ctx_id, "prompt": prompt}
        if max_new_tokens is not None:
            message["max_new_tokens"] = max_new_tokens
        return self.request(message)

    def del_llm_ctx(self, ctx_id: int) -> dict:
        return self.request({"op": "del", "ctx_id": ctx_id})

    def close(self) -> None:
        try:
            self._stream.close()
        finally:
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
