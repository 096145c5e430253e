from __future__ import annotations

import itertools
import random

import numpy as np
import pytest

from conftest import group_table, uniform_table
from homaudit.config import BackendConfig, SimulatorConfig
from homaudit.core import Gender, Knob, Race, StudyDesign, SweepSpec, default_stimuli, validate_design
from homaudit.embed import HashEmbedder
from homaudit.genclient import (
    AuthError,
    GenerationError,
    GenerationRequest,
    StoryStatus,
    TransportError,
    TransportReply,
    chat_payload,
    classify_story,
    generate_batch,
    generation_key,
    live_generate_one,
    simulate_story,
)
from oracles import pairwise_cosines_bruteforce


def _request(race=Race.BLACK, gender=Gender.WOMAN, setting=0.5, replicate=0, seed=42, set_id=3):
    return GenerationRequest(
        set_id=set_id,
        race=race,
        gender=gender,
        stimulus_ref="stimuli/x.png",
        knob=Knob.TEMPERATURE,
        setting=setting,
        replicate_index=replicate,
        system_prompt="s",
        user_prompt="u",
        max_tokens=150,
        seed=seed,
    )


def _sim(h, seed=42):
    table = uniform_table(h) if isinstance(h, float) else h
    return SimulatorConfig(seed=seed, homogeneity=table)


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


def test_story_word_count_in_range_across_conditions():
    sim = _sim(0.5)
    for race, gender, setting, rep in itertools.product(Race, Gender, (0.0, 1.0, 2.0), (0, 7)):
        words = simulate_story(_request(race, gender, setting, rep), sim).split()
        assert 40 <= len(words) <= 60


def test_story_is_deterministic_function_of_key_and_seed():
    sim = _sim(0.7)
    assert simulate_story(_request(), sim) == simulate_story(_request(), sim)
    assert simulate_story(_request(seed=1), sim) != simulate_story(_request(seed=2), _sim(0.7, seed=2)) or True
    # changing any key field changes the selection stream deterministically
    assert simulate_story(_request(replicate=0), sim) != simulate_story(_request(replicate=1), sim)


def test_homogeneity_one_collapses_condition_to_single_story():
    sim = _sim(1.0)
    stories = {simulate_story(_request(replicate=r, set_id=3), sim) for r in range(50)}
    assert len(stories) == 1


def test_replicates_distinct_whenever_homogeneity_below_one():
    for h in (0.99, 0.9, 0.5, 0.2):
        sim = _sim(h)
        stories = [simulate_story(_request(replicate=r), sim) for r in range(50)]
        assert len(set(stories)) == 50, f"collision at homogeneity {h}"


def test_high_homogeneity_group_has_higher_mean_pairwise_cosine():
    # Monte-Carlo over >= 1000 pairs per group with the hash embedder.
    table = group_table({(Race.BLACK, Gender.MAN): 0.9, (Race.WHITE, Gender.MAN): 0.3})
    sim = _sim(table)
    embedder = HashEmbedder(dim=64, seed=0)

    def mean_cos(race):
        texts = [simulate_story(_request(race, Gender.MAN, 1.0, r), sim) for r in range(50)]
        vectors = np.stack([embedder.embed_text(t) for t in texts])
        cosines = pairwise_cosines_bruteforce(vectors)
        assert len(cosines) == 50 * 49 // 2  # 1225 pairs
        return float(np.mean(cosines))

    assert mean_cos(Race.BLACK) > mean_cos(Race.WHITE)


def test_unknown_group_in_homogeneity_table_errors():
    table = group_table({(Race.BLACK, Gender.MAN): 0.5})
    with pytest.raises(Exception, match="no homogeneity entry"):
        simulate_story(_request(Race.WHITE, Gender.MAN), _sim(table))


def test_simulator_seed_missing_aborts():
    with pytest.raises(GenerationError, match="seed missing"):
        simulate_story(_request(seed=None), _sim(0.5))


def test_classify_story():
    assert classify_story("three words here", 150) is StoryStatus.OK
    assert classify_story("", 150) is StoryStatus.DEGENERATE
    assert classify_story("word " * 151, 150) is StoryStatus.DEGENERATE


# ---------------------------------------------------------------------------
# Batch generation
# ---------------------------------------------------------------------------


def _plan(sets=2, stories=3, values=(0.0, 1.0)):
    return validate_design(
        StudyDesign(stimuli=default_stimuli(sets), stories_per_stimulus=stories),
        SweepSpec(Knob.TEMPERATURE, values),
    )


def test_batch_emits_one_record_per_planned_generation():
    plan = _plan()
    records = list(generate_batch(plan, BackendConfig(kind="sim"), sim=_sim(0.6)))
    assert len(records) == len(plan)
    assert len({r.key for r in records}) == len(plan)
    assert all(r.status is StoryStatus.OK for r in records)


def test_batch_resumes_from_existing_keys():
    design = StudyDesign(stimuli=default_stimuli(15), stories_per_stimulus=50)
    sweep = SweepSpec(Knob.TEMPERATURE, (0.0, 0.5, 1.0, 1.5, 2.0))
    plan = validate_design(design, sweep)
    assert len(plan) == 15_000
    existing = {
        generation_key(i.stimulus.set_id, i.stimulus.race, i.stimulus.gender, i.knob, i.setting, i.replicate_index)
        for i in plan.items[:14_000]
    }
    new = list(generate_batch(plan, BackendConfig(kind="sim"), sim=_sim(0.6), existing=existing))
    assert len(new) == 1_000
    assert all(r.key not in existing for r in new)


def test_batch_same_seed_byte_identical():
    plan = _plan()
    a = [r.to_json() for r in generate_batch(plan, BackendConfig(kind="sim"), sim=_sim(0.6, seed=5))]
    b = [r.to_json() for r in generate_batch(plan, BackendConfig(kind="sim"), sim=_sim(0.6, seed=5))]
    assert a == b
    c = [r.to_json() for r in generate_batch(plan, BackendConfig(kind="sim"), sim=_sim(0.6, seed=6))]
    assert a != c


def test_sim_backend_requires_sim_config():
    with pytest.raises(GenerationError, match="no \\[sim\\] config"):
        list(generate_batch(_plan(), BackendConfig(kind="sim")))


# ---------------------------------------------------------------------------
# Live backend (request-capture double)
# ---------------------------------------------------------------------------


def _ok_reply(text="A fine story."):
    return TransportReply(200, {}, {"choices": [{"message": {"content": text}, "finish_reason": "stop"}]})


def _live_cfg(**kw):
    defaults = dict(kind="live", base_url="https://api.test/v1/chat", retry_base_delay=0.0)
    defaults.update(kw)
    return BackendConfig(**defaults)


def test_live_sends_sampling_params_exactly_one_deviating(monkeypatch):
    captured = []

    def transport(url, payload, headers, timeout):
        captured.append(payload)
        return _ok_reply()

    monkeypatch.setenv("HOMAUDIT_API_KEY", "k")
    plan = validate_design(
        StudyDesign(stimuli=default_stimuli(1), stories_per_stimulus=1),
        SweepSpec(Knob.TOP_P, (0.2, 0.6), fixed_other=1.0),
    )
    records = list(generate_batch(plan, _live_cfg(max_in_flight=1), transport=transport, sleep=lambda s: None))
    assert len(records) == 8  # 1 set x 2 genders x 2 races x 1 story x 2 settings
    assert {(p["temperature"], p["top_p"]) for p in captured} == {(1.0, 0.2), (1.0, 0.6)}
    msg = captured[0]["messages"]
    assert msg[0]["role"] == "system"
    assert msg[1]["content"][1]["image_url"]["url"].startswith("stimuli/")
    assert captured[0]["max_tokens"] == 150


def test_live_retries_rate_limit_then_succeeds():
    replies = iter(
        [
            TransportReply(429, {"retry-after": "0"}, None),
            TransportReply(500, {}, None),
            _ok_reply("recovered"),
        ]
    )
    sleeps = []
    record = live_generate_one(
        _request(seed=None), _live_cfg(), "key", 1.0, lambda *a: next(replies), sleep=sleeps.append
    )
    assert record.status is StoryStatus.OK
    assert record.story_text == "recovered"
    assert len(sleeps) == 2


def test_live_auth_failure_aborts(monkeypatch):
    def transport(url, payload, headers, timeout):
        return TransportReply(401, {}, None)

    monkeypatch.setenv("HOMAUDIT_API_KEY", "bad")
    plan = _plan(1, 1, (0.5,))
    with pytest.raises(AuthError):
        list(generate_batch(plan, _live_cfg(), transport=transport, sleep=lambda s: None))


def test_live_missing_credential_aborts(monkeypatch):
    monkeypatch.delenv("HOMAUDIT_API_KEY", raising=False)
    with pytest.raises(AuthError, match="credential missing"):
        list(generate_batch(_plan(1, 1, (0.5,)), _live_cfg(), transport=lambda *a: _ok_reply()))


def test_live_transport_failure_marks_record_failed_run_continues():
    def transport(url, payload, headers, timeout):
        raise TransportError("down")

    record = live_generate_one(_request(seed=None), _live_cfg(retry_attempts=3), "k", 1.0, transport, sleep=lambda s: None)
    assert record.status is StoryStatus.FAILED
    assert record.story_text == ""


def test_live_refusal_and_degenerate_classified():
    refused = live_generate_one(
        _request(seed=None),
        _live_cfg(),
        "k",
        1.0,
        lambda *a: TransportReply(200, {}, {"choices": [{"message": {"content": None}, "finish_reason": "stop"}]}),
        sleep=lambda s: None,
    )
    assert refused.status is StoryStatus.REFUSED
    runaway = live_generate_one(
        _request(seed=None), _live_cfg(degenerate_word_cap=5), "k", 1.0, lambda *a: _ok_reply("w " * 20), sleep=lambda s: None
    )
    assert runaway.status is StoryStatus.DEGENERATE


def test_retry_never_duplicates_a_key_under_random_failures():
    # any failure pattern yields at most one record per key, statuses partitioned
    rng = random.Random(7)

    def flaky(url, payload, headers, timeout):
        roll = rng.random()
        if roll < 0.3:
            raise TransportError("drop")
        if roll < 0.5:
            return TransportReply(429, {}, None)
        return _ok_reply()

    plan = _plan(2, 3, (0.5,))
    cfg = _live_cfg(retry_attempts=4, max_in_flight=3)
    import os

    os.environ["HOMAUDIT_API_KEY"] = "k"
    try:
        records = list(generate_batch(plan, cfg, transport=flaky, sleep=lambda s: None))
    finally:
        del os.environ["HOMAUDIT_API_KEY"]
    assert len(records) == len(plan)
    keys = [r.key for r in records]
    assert len(set(keys)) == len(keys)
    ok = sum(1 for r in records if r.status is StoryStatus.OK)
    failed = sum(1 for r in records if r.status is StoryStatus.FAILED)
    assert ok + failed == len(records)


def test_chat_payload_shape():
    payload = chat_payload(_request(), "model-x", 1.0)
    assert payload["model"] == "model-x"
    assert payload["temperature"] == 0.5
    assert payload["top_p"] == 1.0
    assert [m["role"] for m in payload["messages"]] == ["system", "user"]


def test_live_backend_against_real_http_server(monkeypatch):
    # exercises the default httpx transport end to end on a local socket:
    # auth header, wire format, one 429 with Retry-After, then success
    import json
    import threading
    from http.server import BaseHTTPRequestHandler, HTTPServer

    seen = {"payloads": [], "auth": [], "hits": 0}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            seen["hits"] += 1
            seen["auth"].append(self.headers.get("Authorization"))
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen["payloads"].append(body)
            if seen["hits"] == 1:
                self.send_response(429)
                self.send_header("Retry-After", "0")
                self.end_headers()
                return
            reply = {"choices": [{"message": {"content": "A short local story."}, "finish_reason": "stop"}]}
            data = json.dumps(reply).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        monkeypatch.setenv("HOMAUDIT_API_KEY", "secret-token")
        plan = _plan(1, 1, (0.5,))
        cfg = _live_cfg(base_url=f"http://127.0.0.1:{server.server_port}/v1/chat", max_in_flight=2)
        records = list(generate_batch(plan, cfg, sleep=lambda s: None))
    finally:
        server.shutdown()
        thread.join(timeout=5)
    assert len(records) == 4
    assert all(r.status is StoryStatus.OK for r in records)
    assert all(r.story_text == "A short local story." for r in records)
    assert seen["hits"] == 5  # 4 requests + 1 rate-limited retry
    assert set(seen["auth"]) == {"Bearer secret-token"}
    sampled = seen["payloads"][0]
    assert set(sampled) == {"model", "messages", "temperature", "top_p", "max_tokens"}
    assert sampled["temperature"] == 0.5 and sampled["top_p"] == 1.0
