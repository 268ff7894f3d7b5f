"""Initial trajectory segmentation with short annotated segments.

Three interchangeable backends produce an EnrichedTrajectory from a raw
Trajectory:

* ``llm_segment`` prompts a chat-completion endpoint with the goal and the
  language names of the actions (observations are never sent), parses the
  returned segment list, validates it, and retries with the violation
  appended to the prompt before falling back.
* ``oracle_segment`` derives segments deterministically from ground-truth
  subgoal boundaries, chunking each subgoal span greedily into pieces of
  at most five actions.
* ``uniform_segment`` chunks blindly; it is the fallback of last resort.

Responses are cached on disk keyed by a content hash of (model, prompt) so
repeated runs and offline tests never touch the network.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import requests

from .corpus import (
    EnrichedTrajectory,
    LengthPolicy,
    Segment,
    Segmentation,
    Trajectory,
    enrich,
    validate_segmentation,
)

log = logging.getLogger(__name__)

BASE_URL_VAR = "LAST_LLM_BASE_URL"
API_KEY_VAR = "LAST_LLM_API_KEY"

DEFAULT_MAX_SEGMENTS = 40
DEFAULT_CONTEXT_BUDGET = 8000  # tokens; estimate_tokens must stay below this


class ParseError(ValueError):
    """The response text does not contain a recognizable segment list."""


class VocabError(ValueError):
    """A segment names an action missing from the vocabulary."""


class ConfigurationError(RuntimeError):
    """The client is not configured well enough to run."""


class LLMRequestError(RuntimeError):
    """Network or API failure, with retry metadata in the message."""


def _normalize_action(name: str) -> str:
    return "".join(name.lower().split())


def estimate_tokens(text: str) -> int:
    """Crude upper-bound token count used to guard the context budget."""
    return len(text) // 4 + 1


_EXAMPLE_BLOCK = """Example:
Goal: pick up the red key, then go to the blue ball
Actions: turn right, move forward, move forward, pick up, turn left, move forward, turn left, move forward, move forward
Output:
[
  {"index": 0, "summary_action_str": "approach the red key", "robot_actions_str": "turn right, move forward, move forward"},
  {"index": 1, "summary_action_str": "pick up the red key", "robot_actions_str": "pick up"},
  {"index": 2, "summary_action_str": "head toward the blue ball step 1", "robot_actions_str": "turn left, move forward, turn left"},
  {"index": 3, "summary_action_str": "head toward the blue ball step 2", "robot_actions_str": "move forward, move forward"}
]"""


def build_prompt(
    traj: Trajectory,
    action_names: Sequence[str],
    max_segments: int = DEFAULT_MAX_SEGMENTS,
    len_bounds: tuple[int, int] = (1, 5),
    feedback: str | None = None,
) -> str:
    """Render the segmentation request for one trajectory.

    Only the goal text and the language names of the actions are included;
    observations never appear. ``feedback`` carries the previous attempt's
    violation on retries.
    """
    lo, hi = len_bounds
    names = [action_names[a] for a in traj.actions.tolist()]
    parts = [
        "You are watching an agent carry out tasks in a grid world. "
        f"For the following goal and sequence of actions taken by the agent, segment "
        f"the actions into no more than {max_segments} skills, where each skill "
        "corresponds to one contiguous part of the action sequence.",
        'Answer with a JSON list in which each element is an object with fields '
        '"index" (segment number starting at 0), "summary_action_str" (a short '
        'description of the skill), and "robot_actions_str" (the comma-separated '
        "actions belonging to that skill).",
        f"The number of actions assigned to each skill should not exceed {hi} but "
        f"should be larger than {lo}. The segmentation should be as reasonable and "
        "fine-grained as possible. There should not be any leftover actions and "
        "concatenating the actions in the order of the skills must recover the given "
        "sequence of actions in the exact same order.",
        _EXAMPLE_BLOCK,
        f"Goal: {traj.goal_text}",
        f"Actions: {', '.join(names)}",
    ]
    if feedback:
        parts.append(
            "Your previous answer was rejected for the following reason, fix it: "
            + feedback
        )
    return "\n\n".join(parts)


_KEY_ALIASES = {
    "index": "index",
    "summary_action_str": "summary",
    "summaryactionstr": "summary",
    "summary_action": "summary",
    "robot_actions_str": "actions",
    "robotactionsstr": "actions",
    "robot_actions": "actions",
}


def _canon_key(key: str) -> str | None:
    flat = re.sub(r"[\s_]+", "_", key.strip().strip('"').strip("'").lower()).strip("_")
    return _KEY_ALIASES.get(flat) or _KEY_ALIASES.get(flat.replace("_", ""))


def _strip_quotes(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    return value.rstrip(",").strip()


def _blocks_from_text(text: str) -> list[dict]:
    """Extract segment dicts from loosely formatted {...} blocks."""
    blocks = re.findall(r"\{(.*?)\}", text, flags=re.DOTALL)
    out = []
    for block in blocks:
        entry: dict = {}
        # fields are "key: value" pairs separated by commas and/or newlines;
        # values may themselves contain commas, so split on known keys
        pattern = re.compile(
            r"(index|summary[\s_]*action[\s_]*str|robot[\s_]*actions[\s_]*str)"
            r'["\']?\s*:\s*',
            flags=re.IGNORECASE,
        )
        matches = list(pattern.finditer(block))
        for m, nxt in zip(matches, matches[1:] + [None]):
            key = _canon_key(m.group(1))
            end = nxt.start() if nxt is not None else len(block)
            raw = block[m.end():end].strip().rstrip(",").strip()
            if key == "index":
                digits = re.match(r"-?\d+", raw)
                entry[key] = int(digits.group()) if digits else None
            elif key is not None:
                entry[key] = _strip_quotes(raw)
        if "summary" in entry and "actions" in entry:
            out.append(entry)
    return out


def _blocks_from_json(text: str) -> list[dict] | None:
    start = text.find("[")
    end = text.rfind("]")
    if start < 0 or end <= start:
        return None
    try:
        data = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    if not isinstance(data, list):
        return None
    out = []
    for item in data:
        if not isinstance(item, dict):
            return None
        entry: dict = {}
        for key, value in item.items():
            canon = _canon_key(str(key))
            if canon == "index":
                entry[canon] = int(value)
            elif canon is not None:
                entry[canon] = str(value)
        if "summary" not in entry or "actions" not in entry:
            return None
        out.append(entry)
    return out or None


def parse_response(
    text: str, action_vocab: Sequence[str]
) -> tuple[Segmentation, list[list[int]]]:
    """Extract ordered (annotation, actions) segments from a response.

    Returns the segmentation (segments laid out consecutively from step 0)
    together with the per-segment action ids, which
    ``validate_segmentation`` can check against the real trajectory.
    Raises ParseError for unusable structure and VocabError for unknown
    action names; coverage problems are left to the validator.
    """
    if not text or not text.strip():
        raise ParseError("empty response")
    lookup = {_normalize_action(name): i for i, name in enumerate(action_vocab)}
    blocks = _blocks_from_json(text)
    if blocks is None:
        blocks = _blocks_from_text(text)
    if not blocks:
        raise ParseError("no segment objects found in response")
    segments: list[Segment] = []
    ids: list[list[int]] = []
    cursor = 0
    for n, entry in enumerate(blocks):
        names = [p.strip() for p in entry["actions"].split(",") if p.strip()]
        if not names:
            raise ParseError(f"segment {n} lists no actions")
        seg_ids = []
        for name in names:
            key = _normalize_action(name)
            if key not in lookup:
                raise VocabError(f"segment {n} names unknown action {name!r}")
            seg_ids.append(lookup[key])
        segments.append(Segment(cursor, cursor + len(seg_ids) - 1, entry["summary"]))
        ids.append(seg_ids)
        cursor += len(seg_ids)
    return Segmentation(segments), ids


# -- deterministic backends -------------------------------------------------


def _chunk_span(start: int, end: int, max_len: int) -> list[tuple[int, int]]:
    """Greedy left-to-right split of [start, end] into pieces <= max_len."""
    out = []
    s = start
    while s <= end:
        e = min(s + max_len - 1, end)
        out.append((s, e))
        s = e + 1
    return out


def oracle_segment(
    traj: Trajectory,
    subgoal_boundaries: Sequence[int],
    subgoal_texts: Sequence[str],
    max_len: int = 5,
) -> EnrichedTrajectory:
    """Segment along ground-truth subgoal boundaries, splitting each span
    into chunks of at most max_len actions, annotated '<subgoal text> step i'."""
    bounds = list(subgoal_boundaries)
    if len(bounds) != len(subgoal_texts):
        raise ValueError("boundary count does not match subgoal text count")
    if not bounds or bounds[-1] != traj.length or sorted(set(bounds)) != bounds or bounds[0] < 1:
        raise ValueError(f"boundaries {bounds} do not partition 1..{traj.length}")
    segments = []
    start = 0
    for text, bound in zip(subgoal_texts, bounds):
        chunks = _chunk_span(start, bound - 1, max_len)
        for i, (s, e) in enumerate(chunks, start=1):
            segments.append(Segment(s, e, f"{text} step {i}"))
        start = bound
    out = enrich(traj, Segmentation(segments))
    out.provenance = "oracle"
    return out


def uniform_segment(traj: Trajectory, max_len: int = 5) -> EnrichedTrajectory:
    """Blind fallback: consecutive chunks of at most max_len actions."""
    segments = [
        Segment(s, e, f"segment {i + 1}")
        for i, (s, e) in enumerate(_chunk_span(0, traj.length - 1, max_len))
    ]
    out = enrich(traj, Segmentation(segments))
    out.provenance = "uniform"
    return out


# -- the LLM backend ----------------------------------------------------------


@dataclass
class LLMConfig:
    """Connection, cache, and retry settings for the LLM backend."""

    model: str = "gpt-4"
    base_url: str | None = None  # default: $LAST_LLM_BASE_URL
    api_key: str | None = None  # default: $LAST_LLM_API_KEY
    cache_dir: str | Path | None = None
    max_retries: int = 3
    timeout: float = 60.0
    max_segments: int = DEFAULT_MAX_SEGMENTS
    len_bounds: tuple[int, int] = (1, 5)
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    fallback: str = "oracle"  # oracle | uniform
    max_concurrency: int = 4
    transport: Callable[[str], str] | None = field(default=None, repr=False)


class LLMClient:
    """Cached chat-completion client.

    The cache maps sha256(model + prompt) to the raw response text; hits
    never touch the transport. Writes are serialized so concurrent
    segmentation workers can share one cache directory.
    """

    def __init__(self, config: LLMConfig):
        self.config = config
        self.network_calls = 0
        self._lock = threading.Lock()
        if config.transport is None:
            self.base_url = config.base_url or os.environ.get(BASE_URL_VAR)
            self.api_key = config.api_key or os.environ.get(API_KEY_VAR)
            if not self.base_url:
                raise ConfigurationError(
                    f"no LLM endpoint: set {BASE_URL_VAR} or pass base_url"
                )
            if not self.api_key:
                raise ConfigurationError(f"no API key: set {API_KEY_VAR} or pass api_key")
        self.cache_dir = Path(config.cache_dir) if config.cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def cache_key(self, prompt: str) -> str:
        digest = hashlib.sha256()
        digest.update(self.config.model.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(prompt.encode("utf-8"))
        return digest.hexdigest()

    def _cache_path(self, key: str) -> Path | None:
        return self.cache_dir / f"{key}.json" if self.cache_dir else None

    def cache_put(self, prompt: str, response: str) -> None:
        """Record a response for a prompt, e.g. replayed transcripts."""
        path = self._cache_path(self.cache_key(prompt))
        if path is None:
            raise ConfigurationError("cache_put requires a cache_dir")
        record = {"model": self.config.model, "prompt": prompt, "response": response}
        with self._lock:
            path.write_text(json.dumps(record, ensure_ascii=False), encoding="utf-8")

    def complete(self, prompt: str) -> str:
        path = self._cache_path(self.cache_key(prompt))
        if path is not None and path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        response = self._send(prompt)
        if path is not None:
            record = {"model": self.config.model, "prompt": prompt, "response": response}
            with self._lock:
                path.write_text(json.dumps(record, ensure_ascii=False), encoding="utf-8")
        return response

    def _send(self, prompt: str) -> str:
        self.network_calls += 1
        if self.config.transport is not None:
            return self.config.transport(prompt)
        url = self.base_url.rstrip("/") + "/chat/completions"
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        log.info("POST %s model=%s prompt_chars=%d (key redacted)", url, self.config.model, len(prompt))
        try:
            resp = requests.post(
                url,
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.config.timeout,
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise LLMRequestError(f"chat completion failed: {exc}") from exc


def llm_segment(
    traj: Trajectory,
    action_names: Sequence[str],
    client: LLMClient,
    policy: LengthPolicy = LengthPolicy(),
    subgoal_boundaries: Sequence[int] | None = None,
    subgoal_texts: Sequence[str] | None = None,
) -> EnrichedTrajectory:
    """Segment one trajectory through the LLM, with validation retries.

    Each failed attempt appends the violation to the next prompt. After
    the retry budget is spent the configured fallback produces the result,
    recorded in the provenance field.
    """
    cfg = client.config
    feedback: str | None = None
    attempts = 0
    for _ in range(max(1, cfg.max_retries)):
        prompt = build_prompt(
            traj, action_names, cfg.max_segments, cfg.len_bounds, feedback
        )
        tokens = estimate_tokens(prompt)
        if tokens > cfg.context_budget:
            log.warning("prompt estimate %d tokens over budget %d", tokens, cfg.context_budget)
            break
        attempts += 1
        try:
            response = client.complete(prompt)
        except LLMRequestError as exc:
            raise LLMRequestError(f"attempt {attempts}/{cfg.max_retries}: {exc}") from exc
        try:
            seg, ids = parse_response(response, action_names)
        except (ParseError, VocabError) as exc:
            feedback = str(exc)
            continue
        violation = validate_segmentation(traj, seg, policy, segment_actions=ids)
        if violation is None:
            out = enrich(traj, seg)
            out.provenance = f"llm:{cfg.model}:attempts={attempts}"
            return out
        feedback = violation
    if cfg.fallback == "oracle" and subgoal_boundaries is not None and subgoal_texts is not None:
        out = oracle_segment(traj, subgoal_boundaries, subgoal_texts, policy.max_len)
        out.provenance = f"fallback:oracle:attempts={attempts}"
        return out
    out = uniform_segment(traj, policy.max_len)
    out.provenance = f"fallback:uniform:attempts={attempts}"
    return out


def segment_corpus(
    trajs: Sequence[Trajectory],
    backend: str,
    action_names: Sequence[str] = None,
    client: LLMClient | None = None,
    boundaries: Sequence[Sequence[int]] | None = None,
    texts: Sequence[Sequence[str]] | None = None,
    policy: LengthPolicy = LengthPolicy(),
) -> list[EnrichedTrajectory]:
    """Apply one backend across a corpus; the llm backend runs with bounded
    concurrency over the shared cached client."""
    if backend == "oracle":
        if boundaries is None or texts is None:
            raise ValueError("oracle backend needs subgoal boundaries and texts")
        return [
            oracle_segment(t, b, x, policy.max_len)
            for t, b, x in zip(trajs, boundaries, texts)
        ]
    if backend == "uniform":
        return [uniform_segment(t, policy.max_len) for t in trajs]
    if backend != "llm":
        raise ValueError(f"unknown segmentation backend {backend!r}")
    if client is None:
        raise ValueError("llm backend needs a client")

    def job(i: int) -> EnrichedTrajectory:
        b = boundaries[i] if boundaries is not None else None
        x = texts[i] if texts is not None else None
        return llm_segment(trajs[i], action_names, client, policy, b, x)

    with ThreadPoolExecutor(max_workers=client.config.max_concurrency) as pool:
        return list(pool.map(job, range(len(trajs))))
