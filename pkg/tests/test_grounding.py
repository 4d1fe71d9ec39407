import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from groundmed.errors import MalformedResponseError, ProtocolError, SpanLayoutError
from groundmed.grounding import (
    Special,
    Tokenizer,
    count_brackets,
    extract_prompt_embeddings,
    insert_mode_token,
    parse_response,
    render_grounded,
    strip_tags,
)

TOK = Tokenizer.from_texts(["opacity is seen in right lower lobe", "the heart is normal ."])
OPEN, CLOSE = int(Special.OPEN_P), int(Special.CLOSE_P)


def enc(text):
    return TOK.encode(text)


def bracketed():
    return [OPEN] + enc("opacity") + [CLOSE] + enc("is seen in") + [OPEN] + enc("right lower lobe") + [CLOSE]


def test_mode_token():
    toks = enc("the heart")
    assert insert_mode_token(toks, True) == [int(Special.GRD)] + toks
    assert insert_mode_token(toks, False) == [int(Special.NGRD)] + toks
    with pytest.raises(ProtocolError):
        insert_mode_token([int(Special.GRD)] + toks, False)


def test_parse_example():
    toks = bracketed()
    resp = parse_response(toks, TOK)
    assert [s.phrase for s in resp.spans] == ["opacity", "right lower lobe"]
    assert [s.close_index for s in resp.spans] == [2, len(toks) - 1]
    assert all(toks[s.close_index] == CLOSE for s in resp.spans)
    assert resp.text == "opacity is seen in right lower lobe"


def test_parse_without_brackets():
    resp = parse_response(enc("the heart is normal ."), TOK)
    assert resp.spans == () and resp.text == "the heart is normal."


@pytest.mark.parametrize("toks,index", [
    ([OPEN] + enc("opacity is seen"), 4),
    ([OPEN, OPEN] + enc("opacity") + [CLOSE, CLOSE], 1),
    (enc("opacity") + [CLOSE], 1),
])
def test_parse_malformed(toks, index):
    with pytest.raises(MalformedResponseError) as err:
        parse_response(toks, TOK)
    assert err.value.index == index
    assert "<p>" not in err.value.plain_text


def test_strip_tags():
    assert strip_tags(bracketed()) == enc("opacity is seen in right lower lobe")
    plain = enc("the heart is normal")
    assert strip_tags(plain) == plain


def test_render_layouts():
    words = enc("opacity is seen in right lower lobe")
    assert render_grounded(words, [(0, 1)])[:3] == [OPEN, words[0], CLOSE]
    adjacent = parse_response(render_grounded(words, [(0, 1), (1, 3)]), TOK)
    assert [s.phrase for s in adjacent.spans] == ["opacity", "is seen"]
    with pytest.raises(SpanLayoutError):
        render_grounded(words, [(0, 3), (2, 4)])
    with pytest.raises(SpanLayoutError):
        render_grounded(words, [(2, 2)])


@st.composite
def layouts(draw):
    n = draw(st.integers(1, 20))
    words = draw(st.lists(st.integers(8, len(TOK) - 1), min_size=n, max_size=n))
    cuts = sorted(set(draw(st.lists(st.integers(0, n), max_size=8))))
    spans = [(a, b) for a, b in zip(cuts[0::2], cuts[1::2]) if a < b]
    return words, spans


@given(layouts())
def test_roundtrip(layout):
    words, spans = layout
    toks = render_grounded(words, spans)
    assert strip_tags(toks) == words
    resp = parse_response(toks, TOK)
    assert resp.text == TOK.decode(words)
    assert [s.phrase for s in resp.spans] == [TOK.decode(words[a:b]) for a, b in spans]
    assert count_brackets(toks) == 2 * len(resp.spans)


def test_extract_embeddings():
    toks = bracketed()
    resp = parse_response(toks, TOK)
    gen = torch.Generator().manual_seed(0)
    hidden = torch.randn(len(toks) + 3, 5, generator=gen)
    vecs = extract_prompt_embeddings(hidden, resp, offset=3)
    assert len(vecs) == 2
    assert torch.equal(vecs[0], hidden[3 + resp.spans[0].close_index])
    assert extract_prompt_embeddings(hidden, parse_response(enc("the heart"), TOK)) == []
    # locality: shuffling rows that are not </p> positions leaves the result alone
    keep = {3 + s.close_index for s in resp.spans}
    others = [i for i in range(len(hidden)) if i not in keep]
    shuffled = hidden.clone()
    shuffled[others] = hidden[np.random.default_rng(0).permutation(others)]
    assert all(torch.equal(a, b) for a, b in zip(vecs, extract_prompt_embeddings(shuffled, resp, offset=3)))
    with pytest.raises(ProtocolError):
        extract_prompt_embeddings(hidden[:4], resp, offset=3)


def test_tokenizer_layout_is_stable():
    a = Tokenizer(["b", "a", "c"])
    b = Tokenizer(["c", "a", "b", "a"])
    assert a.itos == b.itos and a.itos[:4] == ["<pad>", "<unk>", "<bos>", "<eos>"]
    assert a.encode("zzz") == [1]
