"""Pluggable client for externally judged reasoning-quality scores.

Wire format: one JSON object per request and per response, newline
terminated. Request fields are ``trace``, ``truth`` and ``rubric_version``;
the response carries ``ssv``, ``gtfa``, ``sd``, ``dlc`` and ``es`` in
[0, 100]. Endpoints are address strings: ``stub``, ``tcp://host:port`` or an
``http(s)://`` URL (the JSON is POSTed as the body).
"""

from __future__ import annotations

import json
import socket
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from typing import Iterable
from urllib.parse import urlparse

from .rewards import structure_reward
from .trace import LabelSet, StructuredTrace, canonical_serialize

RUBRIC_VERSION = "sspo-reasoning-v1"
SCORE_FIELDS = ("ssv", "gtfa", "sd", "dlc", "es")
STUB_SCORE = 50.0


class JudgeError(Exception):
    pass


class JudgeTransportError(JudgeError):
    pass


class JudgeResponseError(JudgeError):
    pass


class JudgeScoreRangeError(JudgeError):
    pass


@dataclass(frozen=True)
class JudgeScores:
    ssv: float
    gtfa: float
    sd: float
    dlc: float
    es: float
    source: str  # local_rule | remote_judge | stub


def build_request(trace: StructuredTrace, truth: LabelSet) -> dict:
    return {
        "trace": trace.raw or canonical_serialize(trace),
        "truth": sorted(truth),
        "rubric_version": RUBRIC_VERSION,
    }


def parse_response(payload: bytes | str) -> JudgeScores:
    try:
        obj = json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise JudgeResponseError(f"judge response is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise JudgeResponseError("judge response must be a JSON object")
    missing = [f for f in SCORE_FIELDS if f not in obj]
    if missing:
        raise JudgeResponseError(f"judge response lacks fields: {', '.join(missing)}")
    scores = {}
    for f in SCORE_FIELDS:
        v = obj[f]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise JudgeResponseError(f"judge field {f!r} is not a number: {v!r}")
        if not 0.0 <= float(v) <= 100.0:
            raise JudgeScoreRangeError(f"judge field {f!r} = {v} outside [0, 100]")
        scores[f] = float(v)
    return JudgeScores(**scores, source="remote_judge")


def stub_scores(trace: StructuredTrace) -> JudgeScores:
    ssv = 100.0 if structure_reward(trace) == 1.0 else 0.0
    return JudgeScores(ssv, STUB_SCORE, STUB_SCORE, STUB_SCORE, STUB_SCORE, source="stub")


def _exchange_tcp(host: str, port: int, body: bytes, timeout: float) -> bytes:
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.sendall(body + b"\n")
            sock.shutdown(socket.SHUT_WR)
            chunks = []
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                chunks.append(chunk)
    except OSError as exc:
        raise JudgeTransportError(f"tcp judge {host}:{port}: {exc}") from None
    return b"".join(chunks).split(b"\n", 1)[0]


def _exchange_http(url: str, body: bytes, timeout: float) -> bytes:
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise JudgeTransportError(f"http judge {url}: {exc}") from None


def judge_request(
    trace: StructuredTrace,
    truth: LabelSet,
    endpoint: str = "stub",
    timeout: float = 30.0,
) -> JudgeScores:
    """One request/response exchange; no retries."""
    if endpoint == "stub":
        return stub_scores(trace)
    body = json.dumps(build_request(trace, truth), sort_keys=True).encode()
    url = urlparse(endpoint)
    if url.scheme == "tcp":
        if not url.hostname or not url.port:
            raise JudgeTransportError(f"bad tcp endpoint {endpoint!r}")
        payload = _exchange_tcp(url.hostname, url.port, body, timeout)
    elif url.scheme in ("http", "https"):
        payload = _exchange_http(endpoint, body, timeout)
    else:
        raise JudgeTransportError(f"unsupported judge endpoint {endpoint!r}")
    return parse_response(payload)


def mean_scores(scores: Iterable[JudgeScores]) -> dict[str, float]:
    scores = list(scores)
    if not scores:
        return {}
    out = {f: sum(getattr(s, f) for s in scores) / len(scores) for f in SCORE_FIELDS}
    return out


def scores_to_json(s: JudgeScores) -> dict:
    return asdict(s)
