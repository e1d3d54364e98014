"""Judges for claim comparison.

:class:`RuleJudge` is deterministic and used for tests, ablations and any
structured transcript. :class:`RemoteJudge` renders a prompt, sends it to a
chat-completions style endpoint through :class:`JudgeClient`, and parses a
one-word answer. The client caches responses on disk keyed by a hash of the
model name and rendered prompt, retries transient failures, and collapses
concurrent identical requests into one call.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import httpx

from .records import Claim, DifferenceRecord, claim_fields, normalize_text

log = logging.getLogger(__name__)


class JudgeError(RuntimeError):
    """A verdict could not be obtained."""


class JudgeConfigError(JudgeError):
    pass


class JudgeLabel(str, enum.Enum):
    CONSISTENT = "consistent"
    CONTRADICTORY = "contradictory"
    AMBIGUOUS = "ambiguous"

    @property
    def weight(self) -> float:
        return CR_WEIGHTS[self]


CR_WEIGHTS = {
    JudgeLabel.CONSISTENT: 1.0,
    JudgeLabel.CONTRADICTORY: -1.0,
    JudgeLabel.AMBIGUOUS: 0.5,
}


@dataclass
class JudgeVerdict:
    label: JudgeLabel | bool
    raw: str
    cache_hit: bool = False
    latency_ms: float = 0.0


# ---------------------------------------------------------------------------
# rule judge


def _gt_fields(gt: DifferenceRecord) -> tuple[str, str, str, str]:
    return (normalize_text(gt.kind), normalize_text(gt.category),
            normalize_text(gt.detail), normalize_text(gt.after))


class RuleJudge:
    """Exact-field predicates over parsed (or keyword-inferred) claim fields.

    match: kinds equal, categories equal, and the claim's detail equals the
    ground-truth detail ("before to after") or just its "after" state.
    consistency: equal fields or text -> consistent; same category otherwise
    -> contradictory; anything else -> ambiguous.
    """

    name = "rule"

    def match(self, claim: Claim, gt: DifferenceRecord, context: str | None = None) -> bool:
        if claim.placeholder:
            return False
        kind, category, detail = claim_fields(claim)
        g_kind, g_cat, g_detail, g_after = _gt_fields(gt)
        if not kind or kind != g_kind or category != g_cat:
            return False
        return detail == g_detail or (bool(detail) and detail == g_after)

    def consistency(self, a: Claim, b: Claim) -> JudgeLabel:
        fa, fb = claim_fields(a), claim_fields(b)
        if normalize_text(a.raw) == normalize_text(b.raw) or (fa == fb and any(fa)):
            return JudgeLabel.CONSISTENT
        if fa[1] and fa[1] == fb[1]:
            return JudgeLabel.CONTRADICTORY
        return JudgeLabel.AMBIGUOUS


# ---------------------------------------------------------------------------
# prompt templates

TEMPLATES = {
    "consistency_v1": (
        "You are comparing two descriptions of differences between the same pair of images.\n"
        "The first comes from the answer to \"Are the two pictures the same?\" and the second "
        "from the answer to \"Are the two pictures different?\".\n"
        "Description A: {a}\n"
        "Description B: {b}\n"
        "Label the pair: consistent if both describe the same difference, contradictory if they "
        "conflict on the same aspect, ambiguous if uncertain or vague.\n"
        "Answer with exactly one word: consistent, contradictory, or ambiguous."
    ),
    "match_v1": (
        "You are verifying a claimed difference between two images against the annotated ground truth.\n"
        "Scene context: {context}\n"
        "Ground-truth difference: {gt}\n"
        "Claimed difference: {claim}\n"
        "Does the claim describe this ground-truth difference (same modification type, same "
        "object, same attribute change)?\n"
        "Answer with exactly one word: true or false."
    ),
}


@dataclass(frozen=True)
class JudgeRequest:
    task: str  # "consistency_pair" | "drf_match"
    texts: tuple[str, ...]
    ground_truth: str = ""
    context: str = ""
    template_id: str = ""

    def __post_init__(self):
        if self.task not in ("consistency_pair", "drf_match"):
            raise JudgeError(f"unknown judge task {self.task!r}")
        template = self.template_id or ("consistency_v1" if self.task == "consistency_pair" else "match_v1")
        if template not in TEMPLATES:
            raise JudgeError(f"unregistered template {template!r}")
        object.__setattr__(self, "template_id", template)
        needed = 2 if self.task == "consistency_pair" else 1
        if len(self.texts) != needed or not all(t.strip() for t in self.texts):
            raise JudgeError(f"{self.task} needs {needed} nonempty claim text(s)")
        if self.task == "drf_match" and not self.ground_truth.strip():
            raise JudgeError("drf_match needs a ground-truth description")

    def render(self) -> str:
        tpl = TEMPLATES[self.template_id]
        if self.task == "consistency_pair":
            return tpl.format(a=self.texts[0], b=self.texts[1])
        return tpl.format(claim=self.texts[0], gt=self.ground_truth,
                          context=self.context or "not provided")


# ---------------------------------------------------------------------------
# remote client


@dataclass(frozen=True)
class JudgeSettings:
    endpoint: str
    api_key: str
    model: str
    cache_dir: Path | None = None
    timeout: float = 60.0

    @classmethod
    def from_env(cls, cache_dir: str | os.PathLike | None = None, env=None) -> "JudgeSettings":
        env = os.environ if env is None else env
        missing = [k for k in ("JUDGE_ENDPOINT", "JUDGE_API_KEY", "JUDGE_MODEL") if not env.get(k)]
        if missing:
            raise JudgeConfigError(f"remote judge not configured: missing {', '.join(missing)}")
        return cls(env["JUDGE_ENDPOINT"], env["JUDGE_API_KEY"], env["JUDGE_MODEL"],
                   Path(cache_dir) if cache_dir else None)


BACKOFF = (0.5, 2.0, 8.0)
RETRY_STATUS = {408, 429, 500, 502, 503, 504}


class DiskCache:
    """One JSON file per key. Reads hit an in-memory snapshot; writes are serialized."""

    def __init__(self, directory: Path | None):
        self.directory = Path(directory) if directory else None
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        hit = self._mem.get(key)
        if hit is not None or self.directory is None:
            return hit
        path = self._path(key)
        if not path.exists():
            return None
        raw = json.loads(path.read_text(encoding="utf-8"))["response"]
        self._mem[key] = raw
        return raw

    def put(self, key: str, prompt: str, response: str) -> None:
        with self._lock:
            self._mem[key] = response
            if self.directory is None:
                return
            payload = json.dumps({"prompt": prompt, "response": response}, ensure_ascii=False)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp, self._path(key))


class JudgeClient:
    def __init__(self, settings: JudgeSettings, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.settings = settings
        self.cache = DiskCache(settings.cache_dir)
        self._http = httpx.Client(transport=transport, timeout=settings.timeout)
        self._sleep = sleep
        self._inflight: dict[str, tuple[threading.Event, dict]] = {}
        self._inflight_lock = threading.Lock()
        self.network_calls = 0

    def cache_key(self, prompt: str) -> str:
        return hashlib.sha256(f"{self.settings.model}\x00{prompt}".encode()).hexdigest()

    def complete(self, prompt: str) -> tuple[str, bool]:
        """Return ``(raw text, cache_hit)``."""
        key = self.cache_key(prompt)
        cached = self.cache.get(key)
        if cached is not None:
            return cached, True
        with self._inflight_lock:
            waiting = self._inflight.get(key)
            if waiting is None:
                event, slot = threading.Event(), {}
                self._inflight[key] = (event, slot)
        if waiting is not None:
            event, slot = waiting
            event.wait()
            if "error" in slot:
                raise slot["error"]
            return slot["text"], True
        try:
            text = self._send(prompt)
            self.cache.put(key, prompt, text)
            slot["text"] = text
            return text, False
        except JudgeError as exc:
            slot["error"] = exc
            raise
        finally:
            event.set()
            with self._inflight_lock:
                self._inflight.pop(key, None)

    def _send(self, prompt: str) -> str:
        body = {"model": self.settings.model, "temperature": 0,
                "messages": [{"role": "user", "content": prompt}]}
        headers = {"Authorization": f"Bearer {self.settings.api_key}"}
        last = "no attempt made"
        for attempt in range(len(BACKOFF) + 1):
            if attempt:
                self._sleep(BACKOFF[attempt - 1])
            self.network_calls += 1
            try:
                resp = self._http.post(self.settings.endpoint, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                log.warning("judge request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code in RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                log.warning("judge request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise JudgeError(f"judge endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise JudgeError(f"malformed judge response: {exc!r}") from exc
        raise JudgeError(f"judge request failed after {len(BACKOFF)} retries: {last}")

    def close(self) -> None:
        self._http.close()


def _one_word(raw: str) -> str:
    words = normalize_text(raw).split()
    return words[0] if len(words) == 1 else ""


class RemoteJudge:
    name = "remote"

    def __init__(self, client: JudgeClient):
        self.client = client

    def verdict(self, request: JudgeRequest) -> JudgeVerdict:
        start = time.perf_counter()
        raw, hit = self.client.complete(request.render())
        latency = (time.perf_counter() - start) * 1000.0
        word = _one_word(raw)
        if request.task == "consistency_pair":
            try:
                label: JudgeLabel | bool = JudgeLabel(word)
            except ValueError:
                raise JudgeError(f"judge answered outside the label set: {raw!r}") from None
        else:
            if word not in ("true", "false"):
                raise JudgeError(f"judge answered outside true/false: {raw!r}")
            label = word == "true"
        return JudgeVerdict(label, raw, hit, latency)

    def consistency(self, a: Claim, b: Claim) -> JudgeLabel:
        return self.verdict(JudgeRequest("consistency_pair", (a.raw, b.raw))).label

    def match(self, claim: Claim, gt: DifferenceRecord, context: str | None = None) -> bool:
        if claim.placeholder:
            return False
        return self.verdict(JudgeRequest("drf_match", (claim.raw,), gt.describe(),
                                         context or "")).label
