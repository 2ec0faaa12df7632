"""Chat-completion client that asks an external model to summarise a feature and
rate its complexity from its top activating samples."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import requests
from scipy import stats as sps

from .rules import IndexEntry, IndexSample

log = logging.getLogger(__name__)

N_SAMPLES = 10
WINDOW = 100
RETRY_STATUS = frozenset({429, 500, 502, 503, 504})
EXPECTED_FIELDS = ("summarization", "complexity")


def rubric() -> str:
    return resources.files("featrace").joinpath("resources/complexity_rubric.txt").read_text(encoding="utf-8")


@dataclass
class EndpointConfig:
    base_url: str
    model_name: str
    auth_token_env_var: str = "FEATRACE_API_KEY"
    timeout_seconds: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    backoff_seconds: float = 1.0
    max_concurrency: int = 4


@dataclass
class AnnotationRequest:
    feature_id: int
    prompt: str


@dataclass
class AnnotationResult:
    feature_id: int
    summarization: str
    complexity: float
    retries: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"feature_id": self.feature_id, "summarization": self.summarization,
                "complexity": self.complexity, "retries": self.retries, "warnings": self.warnings}


class AnnotationParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class AnnotationRequestError(RuntimeError):
    def __init__(self, message: str, retries: int):
        super().__init__(message)
        self.retries = retries


def _window(sample: IndexSample, width: int) -> tuple[int, int]:
    centre = sample.position - sample.start
    lo = max(0, centre - width // 2)
    hi = min(len(sample.tokens), lo + width + 1)
    lo = max(0, hi - width - 1)
    return lo, hi


def render_sample(sample: IndexSample, vocab: Sequence[str] | None, width: int = WINDOW) -> str:
    lo, hi = _window(sample, width)
    parts = []
    for p in range(lo, hi):
        tok = sample.tokens[p]
        text = vocab[tok] if vocab is not None and 0 <= tok < len(vocab) else str(tok) if vocab is None else f"<{tok}>"
        act = sample.activations[p]
        parts.append(f"<<{text}, {act:.1f}>>" if act > 0 else text)
    return "".join(parts)


def render_prompt(
    entry: IndexEntry, vocab: Sequence[str] | None = None, n_samples: int = N_SAMPLES, width: int = WINDOW
) -> str:
    """Rubric followed by the top samples with activating tokens marked ``<<text, act>>``."""
    samples = entry.samples[:n_samples]
    if not samples:
        raise ValueError(f"feature {entry.feature_id} has no samples")
    docs = [f"### Document {j + 1}\n{render_sample(s, vocab, width)}" for j, s in enumerate(samples)]
    return rubric().rstrip("\n") + "\n\n## Documents\n\n" + "\n\n".join(docs) + "\n"


_FENCE = re.compile(r"^```[a-zA-Z]*\s*\n?(.*?)\n?```$", re.DOTALL)


def _strip_fence(text: str) -> str:
    text = text.strip()
    m = _FENCE.match(text)
    return m.group(1).strip() if m else text


def parse_annotation(body: str, feature_id: int = -1) -> AnnotationResult:
    """Parse a chat-completion response (or a bare JSON object) into a result."""
    warnings: list[str] = []
    try:
        outer = json.loads(_strip_fence(body))
    except json.JSONDecodeError as e:
        raise AnnotationParseError(f"response is not JSON: {e}", body) from None
    content = outer
    if isinstance(outer, dict) and "choices" in outer:
        try:
            content = outer["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise AnnotationParseError("no choices[0].message.content in response", body) from None
    if isinstance(content, str):
        try:
            content = json.loads(_strip_fence(content))
        except json.JSONDecodeError as e:
            raise AnnotationParseError(f"message content is not JSON: {e}", body) from None
    if not isinstance(content, dict):
        raise AnnotationParseError("annotation is not a JSON object", body)
    missing = [k for k in EXPECTED_FIELDS if k not in content]
    if missing:
        raise AnnotationParseError(f"annotation lacks {missing}", body)
    extra = sorted(set(content) - set(EXPECTED_FIELDS))
    if extra:
        warnings.append(f"ignored extra fields {extra}")
    try:
        c = float(content["complexity"])
    except (TypeError, ValueError):
        raise AnnotationParseError(f"complexity {content['complexity']!r} is not a number", body) from None
    if not math.isfinite(c):
        raise AnnotationParseError("complexity is not finite", body)
    if not 1.0 <= c <= 5.0:
        clamped = min(5.0, max(1.0, c))
        warnings.append(f"complexity {c} clamped to {clamped}")
        c = clamped
    for w in warnings:
        log.warning("feature %d: %s", feature_id, w)
    return AnnotationResult(feature_id, str(content["summarization"]), c, warnings=warnings)


def annotate(
    request: AnnotationRequest,
    config: EndpointConfig,
    session: requests.Session | None = None,
    sleep=time.sleep,
) -> AnnotationResult:
    """POST the prompt; retry 429/5xx and connection failures with exponential backoff.

    Total time stays within ``timeout_seconds * (max_retries + 1)``.
    """
    token = os.environ.get(config.auth_token_env_var)
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {
        "model": config.model_name,
        "messages": [{"role": "user", "content": request.prompt}],
        "temperature": config.temperature,
    }
    http = session or requests.Session()
    deadline = time.monotonic() + config.timeout_seconds * (config.max_retries + 1)
    retries = 0
    last = "no attempt made"
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise AnnotationRequestError(f"deadline exceeded: {last}", retries)
        try:
            resp = http.post(config.base_url, json=body, headers=headers, timeout=min(config.timeout_seconds, remaining))
        except requests.RequestException as e:
            resp, last = None, f"{type(e).__name__}: {e}"
        if resp is not None:
            if resp.status_code == 200:
                result = parse_annotation(resp.text, request.feature_id)
                result.retries = retries
                return result
            last = f"HTTP {resp.status_code}"
            if resp.status_code not in RETRY_STATUS:
                raise AnnotationRequestError(f"request failed: {last}: {resp.text[:200]}", retries)
        if retries >= config.max_retries:
            raise AnnotationRequestError(f"giving up after {retries} retries: {last}", retries)
        wait = min(config.backoff_seconds * 2**retries, max(0.0, deadline - time.monotonic()))
        sleep(wait)
        retries += 1


def annotate_features(
    entries: Sequence[IndexEntry],
    config: EndpointConfig,
    vocab: Sequence[str] | None = None,
) -> dict[int, AnnotationResult | Exception]:
    """Annotate several features concurrently; results keyed and ordered by feature id."""

    def one(entry: IndexEntry):
        try:
            return annotate(AnnotationRequest(entry.feature_id, render_prompt(entry, vocab)), config)
        except (AnnotationParseError, AnnotationRequestError, ValueError) as e:
            return e

    with ThreadPoolExecutor(max(1, config.max_concurrency)) as pool:
        out = list(pool.map(one, entries))
    return dict(sorted(zip((e.feature_id for e in entries), out)))


@dataclass
class Correlation:
    r: float
    p_value: float
    n: int


def pearson_with_p(x: Sequence[float], y: Sequence[float]) -> Correlation:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = float(dx @ dx), float(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    r = max(-1.0, min(1.0, float(dx @ dy) / math.sqrt(sx * sy)))
    if abs(r) == 1.0:
        return Correlation(r, 0.0, n)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return Correlation(r, float(2.0 * sps.t.sf(abs(t), n - 2)), n)


def complexity_vs_peak(results: Mapping[int, AnnotationResult], stats: Mapping[int, object]) -> Correlation:
    """Pearson r (two-sided t-test p-value) between peak step and complexity over emergent features.

    ``stats`` maps feature id to an object with ``kind`` and ``peak_step``
    attributes (see :class:`featrace.evolution.EvolutionStats`).
    """
    pairs = [
        (stats[f].peak_step, res.complexity)
        for f, res in sorted(results.items())
        if isinstance(res, AnnotationResult) and f in stats and stats[f].kind == "emergent"
    ]
    if len(pairs) < 3:
        raise ValueError("need at least 3 annotated emergent features")
    x, y = zip(*pairs)
    return pearson_with_p(x, y)
