"""Prompt template loading and rendering.

A template file holds the system message, a ``---- user ----`` separator line,
then the user message. ``{name}`` placeholders are substituted; any other brace
text (JSON examples) is left alone.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

_SEPARATOR = "---- user ----"
_PLACEHOLDER = re.compile(r"\{(\w+)\}")
_TASK_TAG = re.compile(r"^\[task:(\w+)\]")


def load_template(name: str, prompt_dir: str | Path | None = None) -> str:
    if prompt_dir is not None:
        path = Path(prompt_dir) / f"{name}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8")
    return resources.files("crs_eval").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def fill(text: str, values: dict) -> str:
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0), text)


def render(name: str, values: dict, prompt_dir: str | Path | None = None) -> list[dict]:
    """Render a template into a ``[system, user]`` message list."""
    template = load_template(name, prompt_dir)
    system, sep, user = template.partition(_SEPARATOR)
    if not sep:
        raise ValueError(f"template {name!r} lacks the '{_SEPARATOR}' separator")
    return [{"role": "system", "content": fill(system.strip(), values)},
            {"role": "user", "content": fill(user.strip(), values)}]


def task_of(messages) -> str | None:
    if not messages:
        return None
    m = _TASK_TAG.match(messages[0].get("content", ""))
    return m.group(1) if m else None


def section(text: str, tag: str) -> str | None:
    """Content between ``<tag>`` and ``</tag>`` or None."""
    m = re.search(rf"<{tag}>\n?(.*?)\n?</{tag}>", text, re.S)
    return m.group(1) if m else None
