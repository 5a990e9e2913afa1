import json
import socket
from pathlib import Path

import pytest

from stepflow.core import ContractViolation, PartialSolution, Problem
from stepflow.llm_gateway import (
    ENV_ENDPOINT,
    ENV_TIMEOUT,
    ENV_TOKEN,
    GatewayConfig,
    GenRequest,
    GenResponse,
    LLMClient,
    LLMGenerator,
    MockServer,
    ProtocolError,
    TransportError,
    generate_steps,
    load_template,
    render_prompt,
)

GOLDEN = Path(__file__).parent / "golden"


def _client(server, **kw):
    sleeps = []
    cfg = GatewayConfig(endpoint=server.url, timeout=kw.pop("timeout", 5.0), backoff=0.5, **kw)
    return LLMClient(cfg, sleep=sleeps.append), sleeps


def _state(steps=()):
    return PartialSolution(Problem("p", "What is 2 + 3?", "5")).extend(list(steps))


def test_golden_round_trip():
    req_text = (GOLDEN / "gen_request.json").read_text().strip()
    assert GenRequest.from_json(req_text).to_json() == req_text
    resp_text = (GOLDEN / "gen_response.json").read_text().strip()
    assert GenResponse.from_json(resp_text, expect_n=2).to_json() == resp_text


def test_request_invariants():
    with pytest.raises(ContractViolation):
        GenRequest("p", n=0)
    with pytest.raises(ContractViolation):
        GenRequest("p", max_tokens=0)


def test_echo_is_deterministic_and_n_completions():
    with MockServer() as srv:
        client, _ = _client(srv)
        a = client.generate(GenRequest("Question\nlast line", n=4))
        b = client.generate(GenRequest("Question\nlast line", n=4))
    assert a.completions == b.completions == [f"last line #{i}" for i in range(4)]


def test_retry_then_success_logs_three_attempts():
    with MockServer([{"status": 503}, {"status": 503}, {"completions": ["ok"]}]) as srv:
        client, sleeps = _client(srv)
        resp = client.generate(GenRequest("x"))
    assert resp.completions == ["ok"]
    assert [e[1:] for e in client.attempt_log] == [(1, "HTTP 503"), (2, "HTTP 503"), (3, "ok")]
    assert len({e[0] for e in client.attempt_log}) == 1
    assert sleeps == [0.5, 1.0]


def test_retries_exhausted_raise_transport_error():
    with MockServer([{"status": 500}] * 3) as srv:
        client, _ = _client(srv)
        with pytest.raises(TransportError):
            client.generate(GenRequest("x"))
    assert len(client.attempt_log) == 3


def test_client_error_is_not_retried():
    with MockServer([{"status": 400}]) as srv:
        client, _ = _client(srv)
        with pytest.raises(TransportError):
            client.generate(GenRequest("x"))
    assert len(client.attempt_log) == 1


def test_unreachable_endpoint():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    client = LLMClient(GatewayConfig(endpoint=f"http://127.0.0.1:{port}/", attempts=2), sleep=lambda s: None)
    with pytest.raises(TransportError):
        client.generate(GenRequest("x"))


def test_timeout_is_enforced():
    with MockServer(delay=0.5) as srv:
        client, _ = _client(srv, timeout=0.1, attempts=1)
        with pytest.raises(TransportError):
            client.generate(GenRequest("x"))


def test_wrong_completion_count_is_protocol_error():
    with MockServer([{"completions": ["a"]}]) as srv:
        client, _ = _client(srv)
        with pytest.raises(ProtocolError):
            client.generate(GenRequest("x", n=2))
    with pytest.raises(ProtocolError):
        GenResponse.from_json('{"completions": [{"text": 3}]}')
    with pytest.raises(ProtocolError):
        GenResponse.from_json("not json")


def test_generate_steps_from_script():
    with MockServer.from_file(str(GOLDEN / "mock_script.json")) as srv:
        client, _ = _client(srv)
        props = generate_steps(client, _state(), 2, 0.8)
        sent = srv.requests[-1]
    assert [p.step.text for p in props] == ["step A", "step B"]
    assert all(p.logprob is None and p.step.index == 0 for p in props)
    assert sent["stop"] == ["\n"] and sent["n"] == 2


def test_multiline_completions_are_cut_to_one_step():
    script = [{"completions": [{"text": "2 + 3 = 5\nanswer: \\boxed{5}", "token_logprobs": [-0.1, -0.2]}, "\n\nsecond\nthird"]}]
    with MockServer(script) as srv:
        client, _ = _client(srv)
        props = generate_steps(client, _state(["first step"]), 2, 0.8)
    assert [p.step.text for p in props] == ["2 + 3 = 5", "second"]
    assert props[0].logprob == pytest.approx(-0.3) and props[0].step.index == 1


def test_prompt_renders_question_then_prefix_lines():
    tpl = load_template()
    assert tpl.count("Question:") == 5
    prompt = render_prompt(_state(["a = 1", "b = 2"]))
    assert prompt.endswith("Question: What is 2 + 3?\nSolution:\na = 1\nb = 2\n")


def test_failure_leaves_state_unchanged():
    state = _state(["a = 1"])
    before = (state.texts, state.problem)
    with MockServer([{"status": 500}] * 3) as srv:
        client, _ = _client(srv)
        with pytest.raises(TransportError):
            LLMGenerator(client).propose_steps(state, 2, 0.8)
    assert (state.texts, state.problem) == before


def test_generate_many_keeps_order():
    with MockServer(delay=0.01) as srv:
        client, _ = _client(srv, max_in_flight=4)
        out = client.generate_many([GenRequest(f"q\nline {i}") for i in range(8)])
    assert [r.completions[0] for r in out] == [f"line {i} #0" for i in range(8)]


def test_generator_complete_judges_answer():
    with MockServer([{"completions": ["2 + 3 = 5\nanswer: \\boxed{5}"]}]) as srv:
        client, _ = _client(srv)
        r = LLMGenerator(client).complete(_state(), 0.6)
    assert r.correct and r.texts == ("2 + 3 = 5", "answer: \\boxed{5}")


def test_config_from_environment(monkeypatch):
    monkeypatch.setenv(ENV_ENDPOINT, "http://example.invalid/gen")
    monkeypatch.setenv(ENV_TOKEN, "secret")
    monkeypatch.setenv(ENV_TIMEOUT, "7")
    cfg = GatewayConfig.from_env(attempts=5)
    assert (cfg.endpoint, cfg.token, cfg.timeout, cfg.attempts) == ("http://example.invalid/gen", "secret", 7.0, 5)
    monkeypatch.delenv(ENV_ENDPOINT)
    with pytest.raises(ValueError):
        LLMClient(GatewayConfig.from_env())
