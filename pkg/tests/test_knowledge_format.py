"""Markup round-trip, truncation, and conversion tests."""

from __future__ import annotations

import random

import pytest

from corpus_tools import corpus, random_augmented

from kid import knowledge_format as kf
from kid.knowledge_format import (
    APPENDED,
    INLINE,
    AugmentedText,
    FormatError,
    KnowledgeItem,
    ParseError,
    PlainSpan,
    convert,
    knowledge_multiset,
    parse,
    serialize,
    truncate_to_n,
)

# reference strings exercised end to end; note the differing gap styles
MIXED_A = (
    "The image shows ⟨Pepe the Frog⟩ [an internet meme symbol often "
    "used by far-right groups], looking at..."
)
MIXED_B = (
    "...mocking ⟨Ghotis⟩[a colloquial term for people from West Bengal...] "
    "...with ⟨Jio⟩[a telecom provider...]..."
)


def test_reference_string_a_structure():
    t = parse(MIXED_A)
    assert t.source_format == INLINE
    assert t.item_count() == 1 and not t.warnings
    it = t.items()[0]
    assert it.entity == "Pepe the Frog"
    assert it.knowledge == "an internet meme symbol often used by far-right groups"
    assert it.gap == " "
    assert isinstance(t.segments[0], PlainSpan) and t.segments[0].text == "The image shows "
    assert t.segments[-1].text == ", looking at..."


def test_reference_string_b_structure():
    t = parse(MIXED_B)
    assert [it.entity for it in t.items()] == ["Ghotis", "Jio"]
    assert [it.gap for it in t.items()] == ["", ""]
    assert [it.order_index for it in t.items()] == [0, 1]


@pytest.mark.parametrize("s", [MIXED_A, MIXED_B], ids=["mixed-a", "mixed-b"])
def test_reference_strings_round_trip_byte_for_byte(s):
    assert serialize(parse(s)) == s


def test_round_trip_on_generated_corpus():
    for s in corpus(100, seed=7):
        t = parse(s)
        assert serialize(t) == s, f"round trip changed bytes for {s!r}"


def test_round_trip_on_generated_appended_corpus():
    for s in corpus(60, seed=11, fmt=APPENDED):
        t = parse(s)
        assert serialize(t) == s


def test_programmatic_build_reproduces_reference_a():
    t = AugmentedText(
        segments=[
            PlainSpan(text="The image shows "),
            KnowledgeItem(
                entity="Pepe the Frog",
                knowledge="an internet meme symbol often used by far-right groups",
            ),
            PlainSpan(text=", looking at..."),
        ]
    )
    assert serialize(t, INLINE) == MIXED_A


def test_ascii_fallback_parses_and_normalizes():
    s = "see <<Pepe>> [a frog] now"
    t = parse(s)
    assert t.items()[0].entity == "Pepe"
    out = serialize(t)
    assert "<<" not in out and "⟨Pepe⟩" in out


def test_gap_whitespace_preserved_per_item():
    s = "⟨a⟩[x] mid ⟨b⟩   [y] end ⟨c⟩\t[z]"
    t = parse(s)
    assert [it.gap for it in t.items()] == ["", "   ", "\t"]
    assert serialize(t) == s


def test_escaped_delimiters_in_plain_text_round_trip():
    s = "cost \\[10\\] and \\⟨quote\\⟩ plus \\< \\\\ done"
    t = parse(s)
    assert t.item_count() == 0
    assert "[10]" in t.plain_text() and "⟨quote⟩" in t.plain_text()
    assert serialize(t) == s


def test_escaped_delimiters_inside_knowledge():
    s = "⟨e⟩ [uses \\[brackets\\] and \\⟨angles\\⟩]"
    t = parse(s)
    assert t.items()[0].knowledge == "uses [brackets] and ⟨angles⟩"
    assert serialize(t) == s


def test_orphan_brackets_are_plain_text():
    t = parse("no entity [just brackets] here")
    assert t.item_count() == 0
    assert t.plain_text() == "no entity [just brackets] here"


def test_dangling_entity_is_plain_with_warning():
    t = parse("hello ⟨Pepe⟩ with no block")
    assert t.item_count() == 0
    assert len(t.warnings) == 1 and "Pepe" in t.warnings[0]
    assert serialize(t) == "hello ⟨Pepe⟩ with no block"


def test_unclosed_entity_raises_with_byte_offset():
    with pytest.raises(ParseError, match="unclosed entity") as e:
        parse("abc ⟨never closes")
    assert e.value.byte_offset == 4
    # a bracket inside an open entity is reported where it happens
    with pytest.raises(ParseError, match="inside entity") as e2:
        parse("abc ⟨broken [k]")
    assert e2.value.byte_offset == len("abc ⟨broken ".encode("utf-8"))


def test_unclosed_knowledge_raises():
    with pytest.raises(ParseError, match="unclosed knowledge"):
        parse("⟨e⟩ [never ends")


def test_nested_delimiter_raises():
    with pytest.raises(ParseError, match="inside knowledge"):
        parse("⟨e⟩ [a [nested] b]")
    with pytest.raises(ParseError, match="inside entity"):
        parse("⟨a⟨b⟩ [k]")


def test_empty_fields_raise():
    with pytest.raises(ParseError, match="empty entity"):
        parse("⟨⟩ [k]")
    with pytest.raises(ParseError, match="empty knowledge"):
        parse("⟨e⟩ []")


# ---- truncation ----


def _three_item_text():
    return parse(
        "intro ⟨A⟩ [ka] mid ⟨B⟩ [kb] later ⟨C⟩ [kc] end"
    )


def test_truncate_keeps_first_two_demotes_third():
    out = truncate_to_n(_three_item_text(), 2)
    assert [it.entity for it in out.items()] == ["A", "B"]
    s = serialize(out)
    assert "⟨A⟩ [ka]" in s and "⟨B⟩ [kb]" in s
    assert "kc" not in s and "C" in s and "⟨C⟩" not in s


def test_truncate_to_zero_keeps_entities_drops_knowledge():
    out = truncate_to_n(_three_item_text(), 0)
    assert out.item_count() == 0
    s = serialize(out)
    for name in ("A", "B", "C"):
        assert name in s
    for k in ("ka", "kb", "kc"):
        assert k not in s


def test_truncate_beyond_count_is_identity():
    t = _three_item_text()
    assert serialize(truncate_to_n(t, 7)) == serialize(t)


def test_truncate_order_indexes_stay_dense():
    out = truncate_to_n(_three_item_text(), 2)
    assert [it.order_index for it in out.items()] == [0, 1]


def test_truncate_negative_raises():
    with pytest.raises(ValueError):
        truncate_to_n(_three_item_text(), -1)


def test_truncate_appended_drops_glossary_lines():
    t = convert(_three_item_text(), APPENDED)
    s2 = serialize(truncate_to_n(t, 1))
    assert s2.count("[Knowledge]") == 1 and "ka" in s2
    assert "kb" not in s2 and "B" in s2


# ---- conversion ----


def test_convert_inline_to_appended_shape():
    t = parse(MIXED_B)
    out = convert(t, APPENDED)
    s = serialize(out)
    body, _, _ = s.partition("\n[Knowledge] ")
    assert "...mocking Ghotis ...with Jio..." == body
    assert s.count("[Knowledge] ") == 2
    assert "[Knowledge] Ghotis: a colloquial term for people from West Bengal..." in s
    assert "[Knowledge] Jio: a telecom provider..." in s


def test_convert_preserves_multiset_both_ways():
    rng = random.Random(3)
    for _ in range(100):
        t = random_augmented(rng, fmt=INLINE)
        there = convert(t, APPENDED)
        back = parse(serialize(there))
        assert knowledge_multiset(back) == knowledge_multiset(t)
        again = convert(back, INLINE)
        assert knowledge_multiset(again) == knowledge_multiset(t)


def test_convert_round_trip_preserves_entity_order():
    t = parse(MIXED_B)
    back = convert(convert(t, APPENDED), INLINE)
    assert [it.entity for it in back.items()] == ["Ghotis", "Jio"]
    assert [it.order_index for it in back.items()] == [0, 1]


def test_appended_parse_structure():
    s = "body mentions Pepe here\n[Knowledge] Pepe: a cartoon frog"
    t = parse(s)
    assert t.source_format == APPENDED
    assert t.items()[0].entity == "Pepe"
    assert t.items()[0].knowledge == "a cartoon frog"
    assert serialize(t) == s


def test_appended_to_inline_anchors_at_first_mention():
    s = "body mentions Pepe here\n[Knowledge] Pepe: a cartoon frog"
    out = convert(parse(s), INLINE)
    assert serialize(out) == "body mentions ⟨Pepe⟩ [a cartoon frog] here"


def test_appended_unanchorable_entity_lands_at_end():
    s = "no mention at all\n[Knowledge] Ghost: invisible"
    out = serialize(convert(parse(s), INLINE))
    assert out.endswith("⟨Ghost⟩ [invisible]")


def test_glossary_escapes_colon_and_newline():
    t = AugmentedText(
        segments=[
            PlainSpan(text="about Dr. X "),
            KnowledgeItem(entity="Dr: X", knowledge="line one\nline two"),
        ],
        source_format=INLINE,
    )
    s = serialize(t, APPENDED)
    assert "\n" not in s.split("[Knowledge] ")[1]
    back = parse(s)
    assert back.items()[0].entity == "Dr: X"
    assert back.items()[0].knowledge == "line one\nline two"


def test_zero_item_text_identical_in_both_formats():
    t = parse("just plain text, nothing else")
    assert serialize(t, INLINE) == serialize(t, APPENDED)


def test_unknown_format_rejected():
    t = parse("x")
    with pytest.raises(FormatError):
        serialize(t, "sidecar")


def test_warnings_empty_on_wellformed_corpus():
    for s in corpus(50, seed=23):
        assert parse(s).warnings == []


# ---- markup repair ----

def test_strip_repairs_unclosed_entity():
    fixed = kf.strip_orphan_brackets("fine ⟨Pix⟩ [a cat] then ⟨broken")
    t = kf.parse(fixed)
    assert not t.warnings
    assert t.item_count() == 1
    assert "broken" in t.plain_text()


def test_strip_repairs_dangling_mention_warning():
    fixed = kf.strip_orphan_brackets("⟨Solo⟩ walks away")
    t = kf.parse(fixed)
    assert not t.warnings
    assert t.item_count() == 0
    assert "Solo walks away" in t.plain_text().replace("⟩", "")


def test_strip_leaves_clean_strings_alone():
    s = "all good ⟨A⟩ [b] here"
    assert kf.strip_orphan_brackets(s) == s


def test_strip_gives_up_beyond_deletion_budget():
    garbage = "⟨" * 40
    out = kf.strip_orphan_brackets(garbage)
    with pytest.raises(kf.ParseError):
        kf.parse(out)
