"""Remote planner backend against a local stub endpoint."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from sceneatlas.errors import ConfigurationError, TransportError
from sceneatlas.planner import RemotePlanner
from sceneatlas.router import parse_action


class _StubHandler(BaseHTTPRequestHandler):
    script = ["Final Answer: stub reply"]
    fail_first = 0
    requests_seen = []

    def do_POST(self):
        cls = type(self)
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        cls.requests_seen.append(body)
        if cls.fail_first > 0:
            cls.fail_first -= 1
            self.send_response(503)
            self.end_headers()
            return
        reply = cls.script[min(len(cls.requests_seen), len(cls.script)) - 1]
        payload = json.dumps(
            {"choices": [{"message": {"role": "assistant", "content": reply}}]}
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    _StubHandler.requests_seen = []
    _StubHandler.fail_first = 0
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestRemotePlanner:
    def test_canned_action_round_trip(self, stub_server):
        _StubHandler.script = [
            "Thought: restyle\nAction: grayscale_stylize\nAction Input: ab12cd34.scn"
        ]
        planner = RemotePlanner(base_url=stub_server, model="test-model", api_key="k")
        out = planner.complete([{"role": "user", "content": "make it gray"}])
        act = parse_action(out)
        assert act.kind == "tool" and act.tool == "grayscale_stylize"
        sent = _StubHandler.requests_seen[-1]
        assert sent["model"] == "test-model"
        assert sent["temperature"] == 0
        assert sent["messages"][-1]["content"] == "make it gray"

    def test_retries_through_transient_5xx(self, stub_server):
        _StubHandler.script = ["Final Answer: recovered"]
        _StubHandler.fail_first = 2
        planner = RemotePlanner(base_url=stub_server, model="m", api_key="k",
                                backoff_s=0.01)
        out = planner.complete([{"role": "user", "content": "x"}])
        assert "recovered" in out

    def test_persistent_failure_is_transport_error(self, stub_server):
        _StubHandler.fail_first = 99
        planner = RemotePlanner(base_url=stub_server, model="m", api_key="k",
                                retries=2, backoff_s=0.01)
        with pytest.raises(TransportError):
            planner.complete([{"role": "user", "content": "x"}])

    def test_missing_environment_is_configuration_error(self, monkeypatch):
        for var in ("SCENEATLAS_PLANNER_URL", "SCENEATLAS_PLANNER_MODEL",
                    "SCENEATLAS_PLANNER_KEY"):
            monkeypatch.delenv(var, raising=False)
        with pytest.raises(ConfigurationError, match="SCENEATLAS_PLANNER_URL"):
            RemotePlanner()

    def test_environment_configuration(self, monkeypatch, stub_server):
        monkeypatch.setenv("SCENEATLAS_PLANNER_URL", stub_server)
        monkeypatch.setenv("SCENEATLAS_PLANNER_MODEL", "env-model")
        monkeypatch.setenv("SCENEATLAS_PLANNER_KEY", "env-key")
        _StubHandler.script = ["Final Answer: ok"]
        planner = RemotePlanner()
        assert planner.model == "env-model"
        out = planner.complete([{"role": "user", "content": "x"}])
        assert "ok" in out
