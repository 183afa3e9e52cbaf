"""External LLM client: structured prompt out, strict JSON-by-PMCID back.

The client never invents data: a null in the response stays empty/Unknown
in the assembled record, unknown fields and non-PMC keys are rejected,
and the request is a minimal chat-completion body at temperature 0 so a
provider swap only needs a different endpoint and content adapter.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass
from typing import Callable, Optional

import httpx

from .cases import CaseRecord, Gender, normalize_diagnosis, normalize_variant
from .extraction import normalize_dimensions

PMCID_KEY_RE = re.compile(r"^PMC[0-9]+$")

RESPONSE_FIELDS = (
    "presenting_complaint",
    "clinical_features",
    "radiological_features",
    "histopathological_features",
    "treatment",
    "diagnosis",
    "variant",
    "tumor_location",
    "tumor_size",
    "patient_age",
    "patient_gender",
)

WHO_VARIANTS = ("Solid/Multicystic", "Unicystic", "Peripheral", "Desmoplastic")

DEFAULT_API_KEY_ENV = "AMELO_LLM_API_KEY"


class EmptyInput(ValueError):
    pass


class MalformedJson(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class SchemaViolation(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path


class AuthFailure(RuntimeError):
    pass


class Transport(RuntimeError):
    pass


class ExhaustedRetries(RuntimeError):
    pass


@dataclass(frozen=True)
class GatewayConfig:
    endpoint: str
    model: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_base_ms: int = 250

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


LlmCaseResponse = dict[str, dict[str, Optional[str]]]


_PROMPT_TEMPLATE = """You are extracting structured data from an ameloblastoma case report.

Return ONLY a single JSON object, with no prose, no markdown, and no code fences.
The object must have exactly one top-level key, "{pmcid}", whose value is an object
with exactly these fields (every field present, string or null):
{field_lines}

Rules:
- Use null for any information the report does not state. Never guess or invent.
- Copy wording from the report; do not paraphrase clinical findings.
- "variant" must be one of: {variants}; use null if the report names none.
- "tumor_size" is the measurement text as written (e.g. "4.5 x 3.2 cm").
- "patient_age" is the age in years as a string of digits, or null.
- "patient_gender" is "male", "female", "other", or null.

Case report:
{case_text}
"""


def build_prompt(case_text: str, pmcid: str) -> str:
    """Deterministic extraction prompt keyed by the case's PMCID."""
    if not case_text.strip():
        raise EmptyInput("case text is empty")
    field_lines = "\n".join(f'  - "{name}"' for name in RESPONSE_FIELDS)
    return _PROMPT_TEMPLATE.format(
        pmcid=pmcid,
        field_lines=field_lines,
        variants=", ".join(WHO_VARIANTS),
        case_text=case_text.strip(),
    )


_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\s*\n(.*?)\n?```\s*$", re.DOTALL)


def _strip_code_fences(raw: str) -> str:
    match = _FENCE_RE.match(raw.strip())
    return match.group(1) if match else raw


def parse_llm_response(raw: str) -> LlmCaseResponse:
    """Accept exactly one JSON object of {pmcid: {field: string-or-null}}.

    Surrounding code fences are tolerated; everything else is strict.
    Missing fields read as null; unknown fields or keys are rejected.
    """
    text = _strip_code_fences(raw)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"response is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(data, dict):
        raise SchemaViolation("response must be a JSON object keyed by PMCID", path="$")

    out: LlmCaseResponse = {}
    for key, value in data.items():
        if not PMCID_KEY_RE.match(str(key)):
            raise SchemaViolation(f"top-level key {key!r} is not a PMCID", path=str(key))
        if not isinstance(value, dict):
            raise SchemaViolation(f"{key}: case payload must be an object", path=str(key))
        fields: dict[str, Optional[str]] = {}
        for name, field_value in value.items():
            if name not in RESPONSE_FIELDS:
                raise SchemaViolation(f"unknown field {name!r}", path=f"{key}.{name}")
            if field_value is not None and not isinstance(field_value, str):
                raise SchemaViolation(
                    f"{key}.{name}: expected string or null", path=f"{key}.{name}"
                )
            fields[name] = field_value
        for name in RESPONSE_FIELDS:
            fields.setdefault(name, None)
        out[key] = fields
    return out


def serialize_response(response: LlmCaseResponse) -> str:
    return json.dumps(response, sort_keys=True, indent=2)


def record_from_response(pmcid: str, fields: dict[str, Optional[str]]) -> CaseRecord:
    """Map a parsed payload onto a CaseRecord; nulls become empty/Unknown."""
    text = lambda name: fields.get(name) or ""

    age: Optional[int] = None
    age_raw = fields.get("patient_age")
    if age_raw:
        digits = re.search(r"\d+", age_raw)
        if digits:
            age = int(digits.group(0))

    gender = Gender.unknown
    gender_raw = (fields.get("patient_gender") or "").strip().lower()
    if gender_raw in (g.value for g in Gender):
        gender = Gender(gender_raw)

    diagnosis_raw = text("diagnosis")
    variant_raw = text("variant")
    return CaseRecord(
        pmcid=pmcid,
        patient_age=age,
        patient_gender=gender,
        presenting_complaint=text("presenting_complaint"),
        clinical_features=text("clinical_features"),
        radiological_features=text("radiological_features"),
        histopathological_features=text("histopathological_features"),
        tumor_location=text("tumor_location"),
        diagnosis_raw=diagnosis_raw,
        diagnosis_label=normalize_diagnosis(diagnosis_raw),
        variant_raw=variant_raw,
        variant_label=normalize_variant(variant_raw),
        tumor_size_mm=tuple(normalize_dimensions(text("tumor_size"))),
        treatment=text("treatment"),
        outcome=None,
    )


def _default_content_of(payload: dict) -> str:
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise Transport(f"response body lacks chat content: {exc}") from exc


def extract_via_llm(
    config: GatewayConfig,
    case_text: str,
    pmcid: str,
    transport: Optional[httpx.BaseTransport] = None,
    content_of: Callable[[dict], str] = _default_content_of,
    sleep: Callable[[float], None] = time.sleep,
) -> CaseRecord:
    """Submit the prompt, retry transient failures with exponential backoff,
    parse the strict JSON response, and assemble a normalized CaseRecord."""
    api_key = os.environ.get(config.api_key_env)
    if not api_key:
        raise AuthFailure(f"environment variable {config.api_key_env} is not set")

    prompt = build_prompt(case_text, pmcid)
    body = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
    }
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}

    last_error: Optional[Exception] = None
    with httpx.Client(transport=transport, timeout=config.timeout_s) as client:
        for attempt in range(config.max_retries + 1):
            if attempt > 0:
                sleep((config.backoff_base_ms / 1000.0) * (2 ** (attempt - 1)))
            try:
                response = client.post(config.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if response.status_code in (401, 403):
                raise AuthFailure(f"endpoint rejected credentials ({response.status_code})")
            if response.status_code >= 500:
                last_error = Transport(f"server error {response.status_code}")
                continue
            if response.status_code != 200:
                raise Transport(f"unexpected status {response.status_code}")
            payload = response.json()
            parsed = parse_llm_response(content_of(payload))
            if pmcid not in parsed:
                raise SchemaViolation(f"response is not keyed by {pmcid}", path=pmcid)
            return record_from_response(pmcid, parsed[pmcid])

    raise ExhaustedRetries(
        f"gave up after {config.max_retries + 1} attempts: {last_error}"
    )
