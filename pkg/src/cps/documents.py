"""Line-oriented configuration documents.

A document is a sequence of ``[section]`` headers, each followed by
``key = value`` lines.  Blank lines and full-line ``#`` comments are
skipped.  Section names may repeat; order is preserved.  Card profiles,
signing programs and daemon configs all share this format.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class DocumentError(ValueError):
    """Syntax or structure error in a document, with a line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass
class Section:
    name: str
    line: int
    fields: dict[str, str] = field(default_factory=dict)

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.fields.get(key, default)

    def require(self, key: str) -> str:
        if key not in self.fields:
            raise DocumentError(f"[{self.name}] is missing key {key!r}", self.line)
        return self.fields[key]


def parse_document(text: str) -> list[Section]:
    sections: list[Section] = []
    current: Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise DocumentError("empty section name", lineno)
            current = Section(name, lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise DocumentError(f"expected 'key = value', got {line!r}", lineno)
        if current is None:
            raise DocumentError("key/value line before any [section]", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise DocumentError("empty key", lineno)
        if key in current.fields:
            raise DocumentError(f"duplicate key {key!r} in [{current.name}]", lineno)
        current.fields[key] = value
    return sections
