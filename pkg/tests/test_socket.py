import json
import socket
import tempfile
import threading
from pathlib import Path

import pytest

from src.service.errors import NotFoundError, QuotaError
from src.service.llm_service import LlmService
from src.service.socket_client import LlmClient
from src.service.socket_server import LlmSocketServer

pytestmark = pytest.mark.skipif(not hasattr(socket, "AF_UNIX"), reason="needs unix domain sockets")


@pytest.fixture
def server(model_config, store_config):
    # AF_UNIX paths are short; keep the socket out of the deep pytest tmp tree
    with tempfile.TemporaryDirectory(prefix="llms") as short:
        service = LlmService(model_config, store_config, max_contexts=2, max_new_tokens=4)
        running = LlmSocketServer(service, str(Path(short) / "s.sock")).start()
        yield running
        running.shutdown()


def test_cold_switch_is_slower_than_warm(server):
    with LlmClient(server.socket_path, "app") as client:
        ctx_id = client.new_llm_ctx("x" * 64)
        client.call_llm(ctx_id, "warm up")
        store = server.service.store
        for chunk in store.get(ctx_id).chunk_list():
            store.force_evict(chunk)
        cold = client.call_llm(ctx_id, "cold call")
        warm = client.call_llm(ctx_id, "warm call")
        assert cold["ok"] and warm["ok"]
        assert "tokens" in cold
        assert warm["switch_latency_ms"] <= 0.1 * cold["switch_latency_ms"]


def test_errors_come_back_as_exceptions(server):
    with LlmClient(server.socket_path, "app") as client:
        with pytest.raises(NotFoundError):
            client.call_llm(12345, "hello")
        client.new_llm_ctx()
        client.new_llm_ctx()
        with pytest.raises(QuotaError):
            client.new_llm_ctx()


def test_deleting_twice_only_warns(server):
    with LlmClient(server.socket_path, "app") as client:
        ctx_id = client.new_llm_ctx()
        assert "warning" not in client.del_llm_ctx(ctx_id)
        assert client.del_llm_ctx(ctx_id)["warning"]


def test_bad_json_gets_an_invalid_request(server):
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as raw:
        raw.connect(server.socket_path)
        with raw.makefile("rwb") as stream:
            stream.write(b"this is not json\n")
            stream.flush()
            response = json.loads(stream.readline())
    assert response == {"ok": False, "status": "INVALID_REQUEST", "error": response["error"]}


def test_clients_are_served_concurrently(server):
    results, errors = {}, []

    def run(name):
        try:
            with LlmClient(server.socket_path, name) as client:
                ctx_id = client.new_llm_ctx("system prompt for " + name)
                results[name] = [client.call_llm(ctx_id, f"question {i}")["tokens"] for i in range(3)]
        except Exception as e:      # surfaced below
            errors.append(e)

    threads = [threading.Thread(target=run, args=(f"app-{i}",)) for i in range(3)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout=120)
    assert not errors
    assert sorted(results) == ["app-0", "app-1", "app-2"]
    assert all(len(answers) == 3 for answers in results.values())
