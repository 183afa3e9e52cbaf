import json

import httpx
import pytest

from amelo.cases import DiagnosisLabel, Gender, VariantLabel
from amelo.gateway import (
    AuthFailure,
    EmptyInput,
    ExhaustedRetries,
    GatewayConfig,
    MalformedJson,
    RESPONSE_FIELDS,
    SchemaViolation,
    build_prompt,
    extract_via_llm,
    parse_llm_response,
    serialize_response,
)

CONFIG = GatewayConfig(endpoint="https://llm.example/v1/chat", model="test-model")


def chat_body(content: str) -> dict:
    return {"choices": [{"message": {"content": content}}]}


def valid_payload(pmcid="PMC6974990") -> dict:
    return {
        pmcid: {
            "presenting_complaint": "painless swelling",
            "clinical_features": "firm mass",
            "radiological_features": "multilocular radiolucency",
            "histopathological_features": "follicular islands",
            "treatment": "segmental resection",
            "diagnosis": "Follicular ameloblastoma",
            "variant": "Unicystic",
            "tumor_location": "right mandible",
            "tumor_size": "4.5 x 3.2 cm",
            "patient_age": "47",
            "patient_gender": "male",
        }
    }


class TestGatewayConfig:
    def test_rejects_bad_timeout(self):
        with pytest.raises(ValueError):
            GatewayConfig(endpoint="x", model="m", timeout_s=0)

    def test_rejects_negative_retries(self):
        with pytest.raises(ValueError):
            GatewayConfig(endpoint="x", model="m", max_retries=-1)


class TestBuildPrompt:
    def test_contains_all_eleven_field_names(self):
        prompt = build_prompt("some case text", "PMC1")
        for name in RESPONSE_FIELDS:
            assert f'"{name}"' in prompt
        assert len(RESPONSE_FIELDS) == 11

    def test_keyed_by_pmcid(self):
        assert '"PMC6974990"' in build_prompt("text", "PMC6974990")

    def test_deterministic(self):
        assert build_prompt("case text", "PMC1") == build_prompt("case text", "PMC1")

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            build_prompt("   ", "PMC1")

    def test_names_who_categories_and_null_rule(self):
        prompt = build_prompt("text", "PMC1")
        for category in ("Solid/Multicystic", "Unicystic", "Peripheral", "Desmoplastic"):
            assert category in prompt
        assert "null" in prompt


class TestParseResponse:
    def test_null_retained(self):
        payload = valid_payload()
        payload["PMC6974990"]["diagnosis"] = None
        parsed = parse_llm_response(json.dumps(payload))
        assert parsed["PMC6974990"]["diagnosis"] is None

    def test_unknown_field_rejected_with_path(self):
        payload = valid_payload()
        payload["PMC6974990"]["prognosis"] = "good"
        with pytest.raises(SchemaViolation) as err:
            parse_llm_response(json.dumps(payload))
        assert err.value.path == "PMC6974990.prognosis"

    def test_truncated_json(self):
        raw = json.dumps(valid_payload())[:40]
        with pytest.raises(MalformedJson) as err:
            parse_llm_response(raw)
        assert err.value.offset >= 0

    def test_non_pmc_key_rejected(self):
        with pytest.raises(SchemaViolation):
            parse_llm_response(json.dumps({"case1": {}}))

    def test_code_fences_stripped(self):
        raw = "```json\n" + json.dumps(valid_payload()) + "\n```"
        parsed = parse_llm_response(raw)
        assert "PMC6974990" in parsed

    def test_missing_fields_read_as_null(self):
        parsed = parse_llm_response(json.dumps({"PMC1": {"diagnosis": "x"}}))
        assert parsed["PMC1"]["treatment"] is None

    def test_non_string_value_rejected(self):
        with pytest.raises(SchemaViolation):
            parse_llm_response(json.dumps({"PMC1": {"patient_age": 47}}))

    def test_parse_serialize_round_trip(self):
        parsed = parse_llm_response(json.dumps(valid_payload()))
        again = parse_llm_response(serialize_response(parsed))
        assert again == parsed


class TestExtractViaLlm:
    def test_missing_env_var_fails_before_network(self, monkeypatch):
        monkeypatch.delenv(CONFIG.api_key_env, raising=False)

        def explode(request):  # any network call is a test failure
            raise AssertionError("network reached without credentials")

        with pytest.raises(AuthFailure):
            extract_via_llm(CONFIG, "text", "PMC1", transport=httpx.MockTransport(explode))

    def test_healthy_round_trip(self, monkeypatch):
        monkeypatch.setenv(CONFIG.api_key_env, "k-123")
        transport = httpx.MockTransport(
            lambda request: httpx.Response(200, json=chat_body(json.dumps(valid_payload())))
        )
        record = extract_via_llm(CONFIG, "case text", "PMC6974990", transport=transport)
        assert record.pmcid == "PMC6974990"
        assert record.variant_label is VariantLabel.Unicystic
        assert record.diagnosis_label is DiagnosisLabel.Follicular
        assert record.patient_age == 47
        assert record.patient_gender is Gender.male
        assert record.tumor_size_mm == (45.0, 32.0)

    def test_two_5xx_then_success_with_backoff(self, monkeypatch):
        monkeypatch.setenv(CONFIG.api_key_env, "k-123")
        calls = {"n": 0}

        def flaky(request):
            calls["n"] += 1
            if calls["n"] <= 2:
                return httpx.Response(503, text="busy")
            return httpx.Response(200, json=chat_body(json.dumps(valid_payload("PMC1"))))

        sleeps = []
        record = extract_via_llm(
            CONFIG, "case text", "PMC1",
            transport=httpx.MockTransport(flaky), sleep=sleeps.append,
        )
        assert record.pmcid == "PMC1"
        assert calls["n"] == 3
        assert len(sleeps) == 2
        assert sleeps[0] < sleeps[1]  # strictly increasing backoff

    def test_exhausted_retries(self, monkeypatch):
        monkeypatch.setenv(CONFIG.api_key_env, "k-123")
        transport = httpx.MockTransport(lambda request: httpx.Response(500))
        with pytest.raises(ExhaustedRetries):
            extract_via_llm(CONFIG, "text", "PMC1", transport=transport, sleep=lambda s: None)

    def test_rejected_key_is_auth_failure(self, monkeypatch):
        monkeypatch.setenv(CONFIG.api_key_env, "k-bad")
        transport = httpx.MockTransport(lambda request: httpx.Response(401))
        with pytest.raises(AuthFailure):
            extract_via_llm(CONFIG, "text", "PMC1", transport=transport)

    def test_nulls_map_to_unknown_never_invented(self, monkeypatch):
        monkeypatch.setenv(CONFIG.api_key_env, "k-123")
        payload = {"PMC1": {name: None for name in RESPONSE_FIELDS}}
        transport = httpx.MockTransport(
            lambda request: httpx.Response(200, json=chat_body(json.dumps(payload)))
        )
        record = extract_via_llm(CONFIG, "text", "PMC1", transport=transport)
        assert record.variant_label is VariantLabel.Unknown
        assert record.diagnosis_label is DiagnosisLabel.Unknown
        assert record.patient_age is None
        assert record.patient_gender is Gender.unknown
        assert record.presenting_complaint == ""
        assert record.tumor_size_mm == ()

    def test_request_body_shape(self, monkeypatch):
        monkeypatch.setenv(CONFIG.api_key_env, "k-123")
        seen = {}

        def capture(request):
            seen.update(json.loads(request.content))
            return httpx.Response(200, json=chat_body(json.dumps(valid_payload("PMC1"))))

        extract_via_llm(CONFIG, "text", "PMC1", transport=httpx.MockTransport(capture))
        assert seen["model"] == "test-model"
        assert seen["temperature"] == 0
        assert len(seen["messages"]) == 1 and seen["messages"][0]["role"] == "user"
