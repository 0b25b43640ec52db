"""Dialogue hub: scene handle registry, action parsing, and the tool loop.

Scenes are only ever named by opaque ``xxxxxxxx.scn`` handles issued here;
the planner never sees real paths, and nothing executes against a handle the
registry did not issue. Each turn runs a bounded think/act/observe loop and
appends exactly one user and one assistant message to the session history.
"""

from __future__ import annotations

import random
import re
import string
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BusyError, ParseError, SceneAtlasError, TransportError
from .scene_io import SceneDirectory
from .tools import ToolRegistry, dispatch_tool

HANDLE_CHARS = string.ascii_lowercase + string.digits
HANDLE_RE = re.compile(r"[A-Za-z0-9_.\-]*\.scn")
DEFAULT_TURN_BUDGET = 6


@dataclass
class SceneRef:
    """What a handle points at: a scene directory, optionally a specific edit."""

    scene: SceneDirectory
    edit_id: str | None = None


class SceneRegistry:
    """Issues unique opaque handles and serializes per-scene operations."""

    def __init__(self, seed: int = 0):
        self._rng = random.Random(seed)
        self._refs: dict[str, SceneRef] = {}
        self._mutex = threading.Lock()
        self._locks: dict[Path, threading.Lock] = {}

    def issue(self, scene: SceneDirectory, edit_id: str | None = None) -> str:
        with self._mutex:
            while True:
                handle = "".join(self._rng.choices(HANDLE_CHARS, k=8)) + ".scn"
                if handle not in self._refs:
                    break
            self._refs[handle] = SceneRef(scene=scene, edit_id=edit_id)
            self._locks.setdefault(scene.root, threading.Lock())
            return handle

    def resolve(self, handle: str) -> SceneRef:
        with self._mutex:
            if handle not in self._refs:
                raise KeyError(handle)
            return self._refs[handle]

    def __contains__(self, handle: str) -> bool:
        with self._mutex:
            return handle in self._refs

    def handles(self) -> list[str]:
        with self._mutex:
            return list(self._refs)

    def handle_for_root(self, root: Path) -> str | None:
        with self._mutex:
            for handle, ref in self._refs.items():
                if ref.scene.root == root and ref.edit_id is None:
                    return handle
        return None

    def scene_lock(self, handle: str) -> threading.Lock:
        ref = self.resolve(handle)
        with self._mutex:
            return self._locks.setdefault(ref.scene.root, threading.Lock())

    def acquire(self, handle: str) -> "_SceneGuard":
        """Non-blocking per-scene guard; raises BusyError when held elsewhere."""
        lock = self.scene_lock(handle)
        if not lock.acquire(blocking=False):
            raise BusyError(f"scene behind {handle} is busy with another operation")
        return _SceneGuard(lock)


class _SceneGuard:
    def __init__(self, lock: threading.Lock):
        self._lock = lock

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False


# ---------------------------------------------------------------------------
# planner action grammar


@dataclass
class PlannerAction:
    """Either a tool invocation or a final reply, never both."""

    kind: str  # "tool" | "final"
    tool: str = ""
    args_raw: str = ""
    text: str = ""


def parse_action(text: str) -> PlannerAction:
    """Parse the line-oriented Thought/Action/Action Input/Final Answer block.

    Prose around the block is ignored; the first recognized marker wins.
    """
    lines = text.splitlines()
    for i, line in enumerate(lines):
        stripped = line.strip()
        if stripped.startswith("Action:"):
            tool = stripped[len("Action:"):].strip()
            args_raw = ""
            for later in lines[i + 1:]:
                later = later.strip()
                if later.startswith("Action Input:"):
                    args_raw = later[len("Action Input:"):].strip()
                    break
            return PlannerAction(kind="tool", tool=tool, args_raw=args_raw)
        if stripped.startswith("Final Answer:"):
            rest = [stripped[len("Final Answer:"):].strip()] + lines[i + 1:]
            return PlannerAction(kind="final", text="\n".join(rest).strip())
    raise ParseError("planner output contains neither an Action nor a Final Answer")


def split_args(args_raw: str) -> list[str]:
    if not args_raw.strip():
        return []
    return [part.strip() for part in args_raw.split(",")]


def find_handles(text: str) -> list[str]:
    return HANDLE_RE.findall(text)


def validate_handles(
    action: PlannerAction, registry: SceneRegistry, requires_scene: bool = True
) -> str | None:
    """Check every scene-name-shaped token; violations come back as
    observation text for the planner, never as exceptions."""
    handles = find_handles(action.args_raw)
    for h in handles:
        if h not in registry:
            return (
                "Observation: that scene file does not exist; only use scene "
                "names issued in this conversation."
            )
    if requires_scene and not handles:
        return (
            "Observation: missing required parameter 'scene'; pass a scene "
            "file name such as the one in the user request."
        )
    return None


def sanitize_reply(text: str, registry: SceneRegistry) -> str:
    """Replace unregistered scene names so replies never leak fabrications."""
    def repl(match: re.Match) -> str:
        return match.group(0) if match.group(0) in registry else "[unknown scene]"

    return HANDLE_RE.sub(repl, text)


# ---------------------------------------------------------------------------
# system prompt


PROMPT_PREAMBLE = (
    "You are SceneChat, an assistant that edits multi-view scenes through "
    "tools. You cannot observe scene pixels directly; every scene is handled "
    "via an opaque file name of the form \"xxxxxxxx.scn\" that carries no "
    "meaning. Be strict with scene file names: only use names that appeared "
    "in this conversation or in tool observations, and never invent one. "
    "Trust tool observations over assumptions, and when the user refers to "
    "the latest result, use the scene name from the most recent observation."
)

PROMPT_GRAMMAR = (
    "Reply in exactly one of these two forms.\n"
    "To use a tool:\n"
    "Thought: why a tool is needed\n"
    "Action: the tool name\n"
    "Action Input: the comma-separated arguments\n"
    "To answer without a tool:\n"
    "Final Answer: the reply text"
)


def build_system_prompt(registry: ToolRegistry) -> str:
    """Deterministic system prompt: preamble, tool annotations, grammar."""
    from .errors import ConfigurationError

    if len(registry) == 0:
        raise ConfigurationError("cannot build a planner prompt with no tools")
    blocks = [PROMPT_PREAMBLE, "Tools available:"]
    for tool in registry.tools():
        params = "; ".join(f"{name} ({desc})" for name, desc in tool.spec.params)
        blocks.append(
            f"- name: {tool.spec.name}\n"
            f"  when to use: {tool.spec.description}\n"
            f"  parameters: {params}\n"
            f"  input example: {tool.spec.input_example}"
        )
    blocks.append(PROMPT_GRAMMAR)
    return "\n\n".join(blocks)


# ---------------------------------------------------------------------------
# sessions and the per-turn loop


@dataclass
class Artifact:
    kind: str  # "edit" | "image"
    handle: str | None = None
    edit_id: str | None = None
    path: Path | None = None


@dataclass
class Message:
    role: str
    text: str
    artifacts: list[Artifact] = field(default_factory=list)


@dataclass
class Reply:
    text: str
    artifacts: list[Artifact] = field(default_factory=list)


@dataclass
class ChatSession:
    session_id: str
    scene_handle: str
    budget: int = DEFAULT_TURN_BUDGET
    history: list[Message] = field(default_factory=list)
    in_flight: bool = False

    def current_handle(self) -> str:
        return self.scene_handle


class SessionStore:
    def __init__(self) -> None:
        self._sessions: dict[str, ChatSession] = {}
        self._mutex = threading.Lock()
        self._counter = 0

    def create(self, scene_handle: str, budget: int = DEFAULT_TURN_BUDGET) -> ChatSession:
        with self._mutex:
            self._counter += 1
            session = ChatSession(f"sess-{self._counter:04d}", scene_handle, budget)
            self._sessions[session.session_id] = session
            return session

    def get(self, session_id: str) -> ChatSession | None:
        with self._mutex:
            return self._sessions.get(session_id)

    def begin_turn(self, session: ChatSession) -> None:
        with self._mutex:
            if session.in_flight:
                raise BusyError(f"session {session.session_id} already has a turn in flight")
            session.in_flight = True

    def end_turn(self, session: ChatSession) -> None:
        with self._mutex:
            session.in_flight = False


def run_turn(
    session: ChatSession,
    user_text: str,
    planner,
    registry: SceneRegistry,
    tools: ToolRegistry,
    resolution: int | None = None,
) -> Reply:
    """One dialogue turn: a bounded reason/act/observe loop ending in a reply."""
    system = (
        build_system_prompt(tools)
        + f"\n\nThe current scene file is {session.scene_handle}."
    )
    working: list[dict] = [{"role": "system", "content": system}]
    for msg in session.history:
        working.append({"role": msg.role, "content": msg.text})
    working.append({"role": "user", "content": user_text})

    artifacts: list[Artifact] = []
    reply_text: str | None = None
    parse_failures = 0

    for _ in range(session.budget):
        try:
            raw = planner.complete(working)
        except TransportError as exc:
            reply_text = f"The planner endpoint is unavailable: {exc}"
            break
        try:
            action = parse_action(raw)
        except ParseError:
            parse_failures += 1
            if parse_failures >= 2:
                reply_text = (
                    "I could not interpret the planner output for this request; "
                    "please rephrase."
                )
                break
            working.append(
                {
                    "role": "user",
                    "content": (
                        "Observation: your last reply was not in the expected "
                        "format; answer with an Action block or a Final Answer."
                    ),
                }
            )
            continue

        if action.kind == "final":
            reply_text = sanitize_reply(action.text, registry)
            break

        working.append({"role": "assistant", "content": raw})
        observation = _execute_tool(action, session, registry, tools, artifacts, resolution)
        working.append({"role": "user", "content": observation})

    if reply_text is None:
        made = ", ".join(a.handle or str(a.path) for a in artifacts) or "no artifacts"
        reply_text = (
            f"Stopped after reaching the {session.budget}-step tool budget; "
            f"partial results: {made}."
        )

    session.history.append(Message(role="user", text=user_text))
    reply = Reply(text=reply_text, artifacts=artifacts)
    session.history.append(Message(role="assistant", text=reply_text, artifacts=artifacts))
    return reply


def _execute_tool(
    action: PlannerAction,
    session: ChatSession,
    registry: SceneRegistry,
    tools: ToolRegistry,
    artifacts: list[Artifact],
    resolution: int | None,
) -> str:
    if action.tool not in tools:
        return f"Observation: there is no tool named {action.tool!r}; pick one from the list."
    tool = tools.get(action.tool)
    violation = validate_handles(action, registry, requires_scene=True)
    if violation is not None:
        return violation

    parts = split_args(action.args_raw)
    if len(parts) != len(tool.spec.params):
        return (
            f"Observation: tool {action.tool!r} expects "
            f"{len(tool.spec.params)} comma-separated argument(s), got {len(parts)}."
        )
    handle = parts[0]
    if not handle.endswith(".scn") or handle not in registry:
        return (
            "Observation: the first argument must be a scene file name from "
            "this conversation."
        )
    ref = registry.resolve(handle)
    try:
        with registry.acquire(handle):
            result = dispatch_tool(
                ref.scene,
                action.tool,
                parts[1:],
                tools,
                resolution=resolution,
                base_edit=ref.edit_id,
            )
    except BusyError:
        return "Observation: that scene is busy with another operation; try again later."
    except SceneAtlasError as exc:
        return f"Observation: tool {action.tool!r} failed: {exc}"

    if result.kind == "edit":
        new_handle = registry.issue(ref.scene, edit_id=result.edit.edit_id)
        session.scene_handle = new_handle
        artifacts.append(
            Artifact(
                kind="edit",
                handle=new_handle,
                edit_id=result.edit.edit_id,
                path=result.edit.directory,
            )
        )
        return f"Observation: {action.tool} produced {new_handle}; {result.summary}"
    if result.kind == "artifact":
        artifacts.append(Artifact(kind="image", path=result.artifact_path))
        return (
            f"Observation: {action.tool} produced {result.artifact_path.name}; "
            f"{result.summary}"
        )
    return f"Observation: {action.tool} returned: {result.summary}"
