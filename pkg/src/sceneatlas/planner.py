"""Planner backends: a deterministic rules-driven planner and a remote one.

The scripted planner drives all tests and the offline CLI: a rules file maps
user-text substrings to tool invocations, and the planner finishes the turn
after the first observation. The remote planner speaks the common
chat-completions JSON shape over HTTP at temperature 0.
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from .errors import ConfigurationError, TransportError

ENV_BASE_URL = "SCENEATLAS_PLANNER_URL"
ENV_MODEL = "SCENEATLAS_PLANNER_MODEL"
ENV_API_KEY = "SCENEATLAS_PLANNER_KEY"

_RULE_RE = re.compile(r'match\s+"(?P<sub>[^"]+)"\s*->\s*(?P<tool>[\w\-]+)\((?P<args>.*)\)\s*$')
_CURRENT_SCENE_RE = re.compile(r"current scene file is (\S+\.scn)")
_HANDLE_IN_TEXT_RE = re.compile(r"[A-Za-z0-9_.\-]*\.scn")


@dataclass(frozen=True)
class Rule:
    match: str
    tool: str
    args_template: str


def parse_rules(text: str) -> list[Rule]:
    """Parse a rules file: lines of ``match "<substring>" -> <tool>(<args>)``."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _RULE_RE.match(line)
        if not m:
            raise ConfigurationError(f"rules file line {lineno} is malformed: {raw!r}")
        rules.append(Rule(m.group("sub").lower(), m.group("tool"), m.group("args")))
    return rules


def load_rules(path: Path | str) -> list[Rule]:
    return parse_rules(Path(path).read_text())


DEFAULT_RULES = """\
# substring -> tool dispatch used by the scripted planner
match "grayscale" -> grayscale_stylize({scene})
match "gray" -> grayscale_stylize({scene})
match "black and white" -> grayscale_stylize({scene})
match "hue" -> hue_rotate({scene}, 90)
match "brighter" -> brightness({scene}, 0.2)
match "darker" -> brightness({scene}, -0.2)
match "edge" -> sobel_edge_map({scene})
match "remove" -> remove_foreground({scene})
match "extract" -> extract_foreground({scene})
match "replace" -> replace_foreground({scene}, {arg})
match "what" -> describe_scene({scene})
match "describe" -> describe_scene({scene})
"""


class ScriptedPlanner:
    """Deterministic keyword planner emitting the Thought/Action grammar.

    The ``{scene}`` placeholder resolves to a scene name mentioned in the
    user message, falling back to the prompt's current scene; ``{arg}``
    resolves to a path-like token in the user message.
    """

    def __init__(self, rules: list[Rule] | None = None):
        self.rules = rules if rules is not None else parse_rules(DEFAULT_RULES)

    def complete(self, messages: list[dict]) -> str:
        last = messages[-1]
        if last["role"] == "user" and last["content"].startswith("Observation:"):
            summary = last["content"][len("Observation:"):].strip().rstrip(".")
            return f"Final Answer: Done. {summary}."
        query = next(
            (m["content"] for m in reversed(messages) if m["role"] == "user"), ""
        )
        lowered = query.lower()
        for rule in self.rules:
            if rule.match in lowered:
                args = self._fill(rule.args_template, query, messages)
                return (
                    f"Thought: the request matches '{rule.match}', so I will "
                    f"call {rule.tool}.\n"
                    f"Action: {rule.tool}\n"
                    f"Action Input: {args}"
                )
        return (
            "Final Answer: Hello! Ask me to edit the scene (for example "
            "'make it grayscale') and I will call the matching tool."
        )

    def _fill(self, template: str, query: str, messages: list[dict]) -> str:
        scene = None
        mentioned = _HANDLE_IN_TEXT_RE.findall(query)
        if mentioned:
            scene = mentioned[0]
        else:
            for msg in messages:
                if msg["role"] == "system":
                    m = _CURRENT_SCENE_RE.search(msg["content"])
                    if m:
                        scene = m.group(1)
        arg = ""
        path_tokens = [tok for tok in query.split() if "/" in tok or tok.endswith(".png")]
        if path_tokens:
            arg = path_tokens[0].rstrip(".,")
        return template.replace("{scene}", scene or "").replace("{arg}", arg)


class RemotePlanner:
    """Chat-completions client: POST {base}/chat/completions at temperature 0."""

    def __init__(
        self,
        base_url: str | None = None,
        model: str | None = None,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff_s: float = 0.5,
    ):
        self.base_url = base_url or os.environ.get(ENV_BASE_URL)
        self.model = model or os.environ.get(ENV_MODEL)
        self.api_key = api_key or os.environ.get(ENV_API_KEY)
        if not self.base_url:
            raise ConfigurationError(f"remote planner needs {ENV_BASE_URL}")
        if not self.model:
            raise ConfigurationError(f"remote planner needs {ENV_MODEL}")
        if not self.api_key:
            raise ConfigurationError(f"remote planner needs {ENV_API_KEY}")
        self.timeout = timeout
        self.retries = retries
        self.backoff_s = backoff_s

    def complete(self, messages: list[dict]) -> str:
        url = self.base_url.rstrip("/") + "/chat/completions"
        body = {
            "model": self.model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": 0,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                resp = httpx.post(url, json=body, headers=headers, timeout=self.timeout)
                if resp.status_code >= 500:
                    last_error = f"server returned {resp.status_code}"
                elif resp.status_code != 200:
                    raise TransportError(
                        f"planner endpoint returned {resp.status_code}: {resp.text[:200]}"
                    )
                else:
                    data = resp.json()
                    return data["choices"][0]["message"]["content"]
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_error = str(exc)
            if attempt < self.retries:
                time.sleep(self.backoff_s * (2**attempt))
        raise TransportError(f"planner endpoint unreachable after retries: {last_error}")
