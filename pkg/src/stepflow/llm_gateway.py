"""HTTP client for an external text-generation service, and a loopback mock of it.

Wire format (JSON over POST):

    request  {"prompt": str, "temperature": float, "max_tokens": int, "n": int, "stop": [str]}
    response {"completions": [{"text": str, "token_logprobs": [float] | null}]}
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from typing import Callable, Optional, Sequence

from .core import (
    ContractViolation,
    PartialSolution,
    Rollout,
    Step,
    answers_equal,
    extract_final_answer,
    split_into_steps,
)
from .envs import StepProposal

log = logging.getLogger(__name__)

ENV_ENDPOINT = "STEPFLOW_LLM_ENDPOINT"
ENV_TOKEN = "STEPFLOW_LLM_TOKEN"
ENV_TIMEOUT = "STEPFLOW_LLM_TIMEOUT"
RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


class TransportError(RuntimeError):
    """The service could not be reached or kept failing after all retries."""


class ProtocolError(RuntimeError):
    """The service answered with something that is not a valid response."""


@dataclass
class GenRequest:
    prompt: str
    temperature: float = 0.8
    max_tokens: int = 256
    n: int = 1
    stop: list = field(default_factory=list)

    def __post_init__(self):
        if self.n < 1:
            raise ContractViolation("n must be >= 1")
        if self.max_tokens < 1:
            raise ContractViolation("max_tokens must be >= 1")
        if not self.temperature > 0:
            raise ContractViolation("temperature must be > 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GenRequest":
        d = json.loads(text)
        return cls(d["prompt"], d["temperature"], d["max_tokens"], d["n"], list(d.get("stop", [])))


@dataclass
class GenResponse:
    completions: list
    token_logprobs: list

    def to_json(self) -> str:
        rows = [{"text": t, "token_logprobs": lp} for t, lp in zip(self.completions, self.token_logprobs)]
        return json.dumps({"completions": rows}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, expect_n: Optional[int] = None) -> "GenResponse":
        try:
            d = json.loads(text)
            rows = d["completions"]
            texts = [r["text"] for r in rows]
            lps = [r.get("token_logprobs") for r in rows]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed response: {exc}") from exc
        if not all(isinstance(t, str) for t in texts):
            raise ProtocolError("completion text must be a string")
        for lp in lps:
            if lp is not None and not (isinstance(lp, list) and all(isinstance(x, (int, float)) for x in lp)):
                raise ProtocolError("token_logprobs must be a list of numbers")
        if expect_n is not None and len(texts) != expect_n:
            raise ProtocolError(f"expected {expect_n} completions, got {len(texts)}")
        return cls(texts, lps)


@dataclass
class GatewayConfig:
    endpoint: str = ""
    token: Optional[str] = None
    timeout: float = 30.0
    attempts: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "GatewayConfig":
        cfg = cls(
            endpoint=os.environ.get(ENV_ENDPOINT, ""),
            token=os.environ.get(ENV_TOKEN) or None,
            timeout=float(os.environ.get(ENV_TIMEOUT, 30.0)),
        )
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg

    def validate(self, prefix: str = "llm") -> None:
        if not self.endpoint:
            raise ValueError(f"{prefix}.endpoint: no endpoint configured (set {ENV_ENDPOINT})")
        for key in ("timeout", "attempts", "max_in_flight"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")
        if self.backoff < 0:
            raise ValueError(f"{prefix}.backoff: value {self.backoff!r} out of range")


class LLMClient:
    """Blocking client with retries and exponential backoff.

    ``attempt_log`` holds one ``(request_id, attempt, outcome)`` tuple per
    HTTP attempt.
    """

    def __init__(self, config: GatewayConfig, sleep: Callable[[float], None] = time.sleep):
        config.validate()
        self.config = config
        self.sleep = sleep
        self.attempt_log: list[tuple] = []
        self._lock = threading.Lock()

    def _post(self, body: bytes, request_id: str) -> tuple[int, bytes]:
        headers = {"Content-Type": "application/json", "X-Request-Id": request_id}
        if self.config.token:
            headers["Authorization"] = f"Bearer {self.config.token}"
        req = urllib.request.Request(self.config.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read()

    def _note(self, *entry) -> None:
        with self._lock:
            self.attempt_log.append(entry)

    def generate(self, request: GenRequest) -> GenResponse:
        body = request.to_json().encode()
        rid = uuid.uuid4().hex
        last = "no attempt made"
        for attempt in range(1, self.config.attempts + 1):
            try:
                status, payload = self._post(body, rid)
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                status, last = None, f"{type(exc).__name__}: {exc}"
            else:
                if status == 200:
                    self._note(rid, attempt, "ok")
                    return GenResponse.from_json(payload.decode("utf-8", "replace"), expect_n=request.n)
                last = f"HTTP {status}"
                if status not in RETRYABLE_STATUS:
                    self._note(rid, attempt, last)
                    raise TransportError(f"request rejected with {last}: {payload[:200]!r}")
            self._note(rid, attempt, last)
            log.warning("generation attempt %d/%d failed: %s", attempt, self.config.attempts, last)
            if attempt < self.config.attempts:
                self.sleep(self.config.backoff * 2 ** (attempt - 1))
        raise TransportError(f"generation failed after {self.config.attempts} attempts: {last}")

    def generate_many(self, requests: Sequence[GenRequest]) -> list[GenResponse]:
        """Concurrent ``generate`` capped at ``max_in_flight``; results in request order."""
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(self.generate, requests))


# --- prompting ----------------------------------------------------------------------


def load_template(name: str = "fewshot.txt") -> str:
    return resources.files("stepflow.prompts").joinpath(name).read_text(encoding="utf-8")


def render_prompt(state: PartialSolution, template: Optional[str] = None) -> str:
    """Fill ``{question}`` and ``{prefix}`` (prefix steps, one per line) in the few-shot template."""
    template = load_template() if template is None else template
    prefix = "".join(t + "\n" for t in state.texts)
    return template.replace("{question}", state.problem.statement).replace("{prefix}", prefix)


def first_line(text: str) -> str:
    return text.lstrip("\n").split("\n", 1)[0].strip()


def generate_steps(
    client: LLMClient,
    state: PartialSolution,
    k: int,
    temperature: float,
    max_tokens: int = 256,
    template: Optional[str] = None,
) -> list[StepProposal]:
    """``k`` single-line candidate next steps (empty completions are dropped)."""
    req = GenRequest(render_prompt(state, template), temperature, max_tokens, k, ["\n"])
    resp = client.generate(req)
    n = len(state.steps)
    out = []
    for text, lps in zip(resp.completions, resp.token_logprobs):
        line = first_line(text)
        if not line:
            continue
        lp = None if lps is None else min(0.0, float(sum(lps)))
        out.append(StepProposal(Step(line, n), lp))
    return out


class LLMGenerator:
    """Step generator backed by the remote service (the ``rng`` argument is unused)."""

    def __init__(self, client: LLMClient, max_tokens: int = 256, completion_tokens: int = 1024, template=None):
        self.client = client
        self.max_tokens = max_tokens
        self.completion_tokens = completion_tokens
        self.template = template

    def propose_steps(self, state, k, temperature, rng=None) -> list[StepProposal]:
        return generate_steps(self.client, state, k, temperature, self.max_tokens, self.template)

    def complete(self, state, temperature, rng=None) -> Rollout:
        req = GenRequest(render_prompt(state, self.template), temperature, self.completion_tokens, 1, [])
        text = self.client.generate(req).completions[0]
        steps = split_into_steps(text)
        full = "\n".join(list(state.texts) + [s.text for s in steps])
        answer = extract_final_answer(full) if full else None
        correct = answer is not None and answers_equal(answer, state.problem.gold_answer)
        return Rollout(tuple(steps), answer, correct)


# --- mock server ---------------------------------------------------------------------


class MockServer:
    """Loopback server replaying a script of responses.

    Each script entry is ``{"status": int}`` (an error reply) or
    ``{"completions": [...]}`` (texts or full completion objects).  Once the
    script is used up, every request is answered by echoing: completion
    ``i`` is ``"<last prompt line> #i"``.
    """

    def __init__(self, script: Optional[Sequence[dict]] = None, delay: float = 0.0):
        self.script = list(script or [])
        self.delay = delay
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                status, payload = server._reply(raw)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread: Optional[threading.Thread] = None

    @classmethod
    def from_file(cls, path: str) -> "MockServer":
        with open(path) as fh:
            return cls(json.load(fh))

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/generate"

    def _reply(self, raw: bytes) -> tuple[int, dict]:
        if self.delay:
            time.sleep(self.delay)
        try:
            req = json.loads(raw)
        except ValueError:
            return 400, {"error": "body is not JSON"}
        with self._lock:
            self.requests.append(req)
            entry = self.script.pop(0) if self.script else None
        if entry is not None and "status" in entry and entry["status"] != 200:
            return entry["status"], {"error": "scripted failure"}
        if entry is not None:
            rows = [c if isinstance(c, dict) else {"text": c, "token_logprobs": None} for c in entry["completions"]]
            return 200, {"completions": rows}
        last = req.get("prompt", "").rstrip("\n").rsplit("\n", 1)[-1]
        n = int(req.get("n", 1))
        return 200, {"completions": [{"text": f"{last} #{i}", "token_logprobs": None} for i in range(n)]}

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
