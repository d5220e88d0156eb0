"""Entity-anchored knowledge markup: parse, render, truncate, convert.

One body of content, two renderings:

  inline    entity mentions wrapped in angle brackets U+27E8/U+27E9,
            each followed (optional whitespace) by its knowledge in
            square brackets: "... ⟨Pepe⟩ [a cartoon frog] ..."
  appended  plain body, then one trailing glossary line per item:
            "...\n[Knowledge] Pepe: a cartoon frog"

"<<" and ">>" are accepted as ASCII stand-ins for the angle brackets
on parse; serialization always emits the canonical angle brackets, so
ASCII input normalizes. Everything else round-trips byte for byte:
parsed segments remember their exact source slice and same-format
serialization replays those slices verbatim.

Literal delimiter characters inside content are backslash-escaped.
Glossary lines additionally escape ":" in the entity and newlines in
both fields so entries stay one line each.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace

OPEN = "⟨"
CLOSE = "⟩"
ASCII_OPEN = "<<"
ASCII_CLOSE = ">>"
GLOSSARY_MARK = "[Knowledge] "

INLINE = "inline"
APPENDED = "appended"
FORMATS = (INLINE, APPENDED)

# characters a backslash may escape in markup context
_ESCAPABLE = {"\\", OPEN, CLOSE, "[", "]", "<", ">"}
# glossary context adds the field separator and a newline stand-in
_GLOSSARY_ESCAPABLE = _ESCAPABLE | {":"}


class ParseError(ValueError):
    """Malformed markup. byte_offset locates the problem in UTF-8 bytes."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte {byte_offset})")
        self.byte_offset = byte_offset


class FormatError(ValueError):
    pass


@dataclass
class PlainSpan:
    """Literal text between knowledge items.

    text is the logical content; raw, when set, is the exact source
    slice this span came from and is replayed verbatim on same-format
    serialization.
    """

    text: str
    raw: str | None = None


@dataclass
class KnowledgeItem:
    """One entity/knowledge pair.

    gap is the whitespace between the entity closer and the knowledge
    opener in inline form (default one space). raw caches the exact
    source slice (inline) or glossary line (appended).
    """

    entity: str
    knowledge: str
    order_index: int = 0
    gap: str = " "
    raw: str | None = None


@dataclass
class AugmentedText:
    """Ordered segments (PlainSpan | KnowledgeItem) plus bookkeeping."""

    segments: list
    source_format: str = INLINE
    warnings: list[str] = field(default_factory=list)

    def items(self) -> list[KnowledgeItem]:
        return [s for s in self.segments if isinstance(s, KnowledgeItem)]

    def item_count(self) -> int:
        return len(self.items())

    def plain_text(self) -> str:
        return "".join(s.text for s in self.segments if isinstance(s, PlainSpan))


def knowledge_multiset(t: AugmentedText) -> Counter:
    return Counter((it.entity, it.knowledge) for it in t.items())


def _check_format(fmt: str) -> None:
    if fmt not in FORMATS:
        raise FormatError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _byte_offset(s: str, i: int) -> int:
    return len(s[:i].encode("utf-8"))


def _escape(text: str) -> str:
    """Backslash-escape markup delimiters so text reads back as written."""
    out = []
    for i, ch in enumerate(text):
        if ch == "\\" or ch in (OPEN, CLOSE, "[", "]"):
            out.append("\\" + ch)
        elif ch == "<" and text[i + 1 : i + 2] == "<":
            out.append("\\<")
        else:
            out.append(ch)
    return "".join(out)


def _unescape(text: str, escapable=frozenset(_ESCAPABLE), newline_alias: bool = False) -> str:
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\\" and i + 1 < n:
            nxt = text[i + 1]
            if newline_alias and nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt in escapable:
                out.append(nxt)
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def _escape_glossary(text: str, escape_colon: bool) -> str:
    s = _escape(text)
    if escape_colon:
        s = s.replace(":", "\\:")
    return s.replace("\n", "\\n")


def _unescape_glossary(text: str) -> str:
    return _unescape(text, escapable=frozenset(_GLOSSARY_ESCAPABLE), newline_alias=True)


# ---- parsing ----


def _find_glossary_separator(line: str) -> int:
    """Index of the unescaped ':' separating entity from knowledge, -1 if none."""
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == "\\" and i + 1 < len(line):
            i += 2
            continue
        if ch == ":":
            return i if line[i + 1 : i + 2] == " " else -1
        i += 1
    return -1


def _is_glossary_line(line: str) -> bool:
    if not line.startswith(GLOSSARY_MARK):
        return False
    body = line[len(GLOSSARY_MARK) :]
    sep = _find_glossary_separator(body)
    return sep > 0  # entity part must be non-empty


def _parse_appended(raw: str, glossary_start_line: int, lines: list[str]) -> AugmentedText:
    glossary_lines = lines[glossary_start_line:]
    pos = sum(len(ln) + 1 for ln in lines[:glossary_start_line])
    body_raw = raw[:pos]
    segments: list = []
    if body_raw:
        # the newline before the glossary is presentation, not body text
        segments.append(PlainSpan(text=_unescape(body_raw[:-1]), raw=body_raw))
    warnings: list[str] = []
    for idx, line in enumerate(glossary_lines):
        entry = line[len(GLOSSARY_MARK) :]
        sep = _find_glossary_separator(entry)
        entity = _unescape_glossary(entry[:sep])
        knowledge = _unescape_glossary(entry[sep + 2 :])
        if not knowledge:
            raise ParseError("empty knowledge in glossary entry", _byte_offset(raw, pos))
        segments.append(
            KnowledgeItem(entity=entity, knowledge=knowledge, order_index=idx, gap=" ", raw=line)
        )
        pos += len(line) + 1
    return AugmentedText(segments=segments, source_format=APPENDED, warnings=warnings)


def parse(raw: str) -> AugmentedText:
    """Parse markup in either format.

    Format is detected: a maximal trailing run of glossary lines marks
    the appended form, anything else is inline. Problems that lose
    content (unclosed or nested delimiters, empty fields) raise
    ParseError with a byte offset; an entity mention with no knowledge
    block is kept as plain text and noted in warnings.
    """
    lines = raw.split("\n")
    start = len(lines)
    while start > 0 and _is_glossary_line(lines[start - 1]):
        start -= 1
    if start < len(lines):
        return _parse_appended(raw, start, lines)
    return _parse_inline(raw)


def _parse_inline(raw: str) -> AugmentedText:
    segments: list = []
    warnings: list[str] = []
    plain: list[str] = []
    plain_raw: list[str] = []
    n = len(raw)
    n_items = 0

    def flush() -> None:
        if plain_raw:
            segments.append(PlainSpan(text="".join(plain), raw="".join(plain_raw)))
            plain.clear()
            plain_raw.clear()

    i = 0
    while i < n:
        ch = raw[i]
        if ch == "\\" and i + 1 < n and raw[i + 1] in _ESCAPABLE:
            plain.append(raw[i + 1])
            plain_raw.append(raw[i : i + 2])
            i += 2
            continue
        is_ascii_open = raw.startswith(ASCII_OPEN, i)
        if ch != OPEN and not is_ascii_open:
            plain.append(ch)
            plain_raw.append(ch)
            i += 1
            continue

        # entity section
        ent_start = i
        j = i + (2 if is_ascii_open else 1)
        ent: list[str] = []
        closed_at = -1
        while j < n:
            d = raw[j]
            if d == "\\" and j + 1 < n and raw[j + 1] in _ESCAPABLE:
                ent.append(raw[j + 1])
                j += 2
                continue
            if not is_ascii_open and d == CLOSE:
                closed_at = j
                j += 1
                break
            if is_ascii_open and raw.startswith(ASCII_CLOSE, j):
                closed_at = j
                j += 2
                break
            if d in (OPEN, "[", "]") or raw.startswith(ASCII_OPEN, j):
                raise ParseError("unescaped delimiter inside entity", _byte_offset(raw, j))
            ent.append(d)
            j += 1
        if closed_at < 0:
            raise ParseError("unclosed entity delimiter", _byte_offset(raw, ent_start))
        entity = "".join(ent)
        if not entity:
            raise ParseError("empty entity", _byte_offset(raw, ent_start))

        # optional whitespace, then the knowledge block
        k = j
        while k < n and raw[k].isspace():
            k += 1
        if k >= n or raw[k] != "[":
            warnings.append(
                f"entity {entity!r} at byte {_byte_offset(raw, ent_start)} has no knowledge block"
            )
            plain.append(OPEN + entity + CLOSE)
            plain_raw.append(raw[ent_start:j])
            i = j
            continue
        m = k + 1
        kn: list[str] = []
        closed = False
        while m < n:
            d = raw[m]
            if d == "\\" and m + 1 < n and raw[m + 1] in _ESCAPABLE:
                kn.append(raw[m + 1])
                m += 2
                continue
            if d == "]":
                closed = True
                break
            if d in (OPEN, CLOSE, "[") or raw.startswith(ASCII_OPEN, m):
                raise ParseError("unescaped delimiter inside knowledge", _byte_offset(raw, m))
            kn.append(d)
            m += 1
        if not closed:
            raise ParseError("unclosed knowledge block", _byte_offset(raw, k))
        knowledge = "".join(kn)
        if not knowledge:
            raise ParseError("empty knowledge block", _byte_offset(raw, k))

        flush()
        segments.append(
            KnowledgeItem(
                entity=entity,
                knowledge=knowledge,
                order_index=n_items,
                gap=raw[j:k],
                # ASCII-delimited items normalize to canonical brackets
                raw=None if is_ascii_open else raw[ent_start : m + 1],
            )
        )
        n_items += 1
        i = m + 1

    flush()
    return AugmentedText(segments=segments, source_format=INLINE, warnings=warnings)


# ---- serialization ----


def _render_inline_item(it: KnowledgeItem) -> str:
    if it.raw is not None:
        return it.raw
    if it.gap and not it.gap.isspace():
        raise FormatError(f"item gap must be whitespace, got {it.gap!r}")
    if not it.entity or not it.knowledge:
        raise FormatError("entity and knowledge must be non-empty")
    return OPEN + _escape(it.entity) + CLOSE + it.gap + "[" + _escape(it.knowledge) + "]"


def _render_glossary_line(it: KnowledgeItem) -> str:
    if it.raw is not None:
        return it.raw
    if not it.entity or not it.knowledge:
        raise FormatError("entity and knowledge must be non-empty")
    return (
        GLOSSARY_MARK
        + _escape_glossary(it.entity, escape_colon=True)
        + ": "
        + _escape_glossary(it.knowledge, escape_colon=False)
    )


def _render_span(span: PlainSpan) -> str:
    return span.raw if span.raw is not None else _escape(span.text)


def serialize(t: AugmentedText, fmt: str | None = None) -> str:
    """Render to a string. Same-format output replays parsed source
    slices verbatim; a different format converts first."""
    fmt = t.source_format if fmt is None else fmt
    _check_format(fmt)
    if fmt != t.source_format:
        t = convert(t, fmt)
    if fmt == INLINE:
        return "".join(
            _render_inline_item(s) if isinstance(s, KnowledgeItem) else _render_span(s)
            for s in t.segments
        )
    body = "".join(_render_span(s) for s in t.segments if isinstance(s, PlainSpan))
    entries = [_render_glossary_line(it) for it in t.items()]
    if not entries:
        return body
    sep = "" if body.endswith("\n") or not body else "\n"
    return body + sep + "\n".join(entries)


# ---- structure edits ----


def _reindexed(segments: list) -> list:
    k = 0
    out = []
    for s in segments:
        if isinstance(s, KnowledgeItem):
            out.append(replace(s, order_index=k))
            k += 1
        else:
            out.append(s)
    return out


def truncate_to_n(t: AugmentedText, n: int) -> AugmentedText:
    """Keep the first n items; demote the rest to bare entity text.

    Document order is salience order, so this keeps the n most salient
    items. Demoted entities stay visible as plain text in both formats.
    """
    if n < 0:
        raise ValueError(f"item budget must be >= 0, got {n}")
    segments: list = []
    kept = 0
    demoted_appended: list[KnowledgeItem] = []
    for seg in t.segments:
        if not isinstance(seg, KnowledgeItem):
            segments.append(replace(seg))
            continue
        if kept < n:
            segments.append(replace(seg))
            kept += 1
        elif t.source_format == INLINE:
            segments.append(PlainSpan(text=seg.entity))
        else:
            demoted_appended.append(seg)
    # appended bodies usually mention the entity already; add it only if absent
    if demoted_appended:
        body = "".join(s.text for s in segments if isinstance(s, PlainSpan))
        for it in demoted_appended:
            if it.entity not in body:
                segments.append(PlainSpan(text=f" {it.entity}"))
                body += f" {it.entity}"
    return AugmentedText(
        segments=_reindexed(segments), source_format=t.source_format, warnings=list(t.warnings)
    )


def convert(t: AugmentedText, target: str) -> AugmentedText:
    """Re-express the same items in the other rendering.

    inline -> appended demotes each anchored mention to bare entity
    text and moves the pair to the glossary. appended -> inline anchors
    each item at the first unclaimed occurrence of its entity in the
    body (left to right); items whose entity never occurs are appended
    at the end. The (entity, knowledge) multiset is preserved exactly.
    """
    _check_format(target)
    if target == t.source_format:
        return AugmentedText(
            segments=[replace(s) for s in t.segments],
            source_format=t.source_format,
            warnings=list(t.warnings),
        )

    if target == APPENDED:
        segments: list = []
        tail: list[KnowledgeItem] = []
        for seg in t.segments:
            if isinstance(seg, KnowledgeItem):
                segments.append(PlainSpan(text=seg.entity))
                tail.append(KnowledgeItem(entity=seg.entity, knowledge=seg.knowledge))
            else:
                segments.append(replace(seg))
        return AugmentedText(segments=_reindexed(segments + tail), source_format=APPENDED)

    # appended -> inline: fresh spans throughout, presentation changes
    pending = list(t.items())
    segments = []
    at = 0
    for seg in t.segments:
        if isinstance(seg, KnowledgeItem):
            continue
        text = seg.text
        pos = 0
        while at < len(pending):
            hit = text.find(pending[at].entity, pos)
            if hit < 0:
                break
            if text[pos:hit]:
                segments.append(PlainSpan(text=text[pos:hit]))
            it = pending[at]
            segments.append(KnowledgeItem(entity=it.entity, knowledge=it.knowledge, gap=" "))
            pos = hit + len(it.entity)
            at += 1
        if text[pos:]:
            segments.append(PlainSpan(text=text[pos:]))
    for it in pending[at:]:
        segments.append(PlainSpan(text=" "))
        segments.append(KnowledgeItem(entity=it.entity, knowledge=it.knowledge, gap=" "))
    return AugmentedText(segments=_reindexed(segments), source_format=INLINE)


_WARN_OFFSET = re.compile(r"at byte (\d+)")


def _delete_char_at_byte(s: str, offset: int) -> str:
    encoded = s.encode("utf-8")
    if offset >= len(encoded):
        return s[:-1]
    idx = len(encoded[:offset].decode("utf-8"))
    return s[:idx] + s[idx + 1:]


def strip_orphan_brackets(s: str, max_deletions: int = 16) -> str:
    """Best-effort repair of sloppy markup: delete the delimiter each
    parse error or dangling-mention warning points at, up to
    max_deletions characters. Strings broken worse than that come back
    unrepaired; callers decide whether that is fatal."""
    for _ in range(max_deletions):
        try:
            t = parse(s)
        except ParseError as exc:
            s = _delete_char_at_byte(s, exc.byte_offset)
            continue
        if not t.warnings:
            return s
        hit = _WARN_OFFSET.search(t.warnings[0])
        if hit is None:
            return s
        s = _delete_char_at_byte(s, int(hit.group(1)))
    return s
