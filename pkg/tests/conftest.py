from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
SYNTHETIC = FIXTURES / "synthetic"


@pytest.fixture
def synthetic_dir() -> Path:
    return SYNTHETIC


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


class _JudgeHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # keep pytest output quiet
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        self.server.requests.append(body)
        prompt = body["messages"][0]["content"]
        output = prompt.split("### Corresponding Output:\n", 1)[1].split("\n\nEvaluation Form", 1)[0]
        digest = hashlib.sha256(output.encode()).digest()
        if digest[0] % 17 == 0:
            reply = "I cannot rate this."
        elif not output.strip():
            reply = "- Quality: 4"
        else:
            reply = f"- Quality: {1 + digest[1] % 4}"
        payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": reply}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture
def judge_server():
    """Local chat-completions stub: deterministic score from a hash of the judged output."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _JudgeHandler)
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
