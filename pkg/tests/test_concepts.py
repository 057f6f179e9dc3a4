import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptfuse.concepts import (
    BASE_WORDS, ConceptError, ConceptRegistry, Vocabulary, extract_concept_tokens, make_reference_prompt,
    merge_registries,
)


@pytest.fixture
def reg():
    vocab = Vocabulary()
    return ConceptRegistry(torch.randn(vocab.base_size, 8, generator=torch.Generator().manual_seed(0)), vocab)


def test_register_grows_vocab_by_two(reg):
    n = len(reg.vocab)
    pair = reg.register_concept("dogA", "dog")
    assert len(reg.vocab) == n + 2
    assert pair.rand_id >= reg.vocab.base_size and pair.class_id >= reg.vocab.base_size
    assert pair.rand_id != pair.class_id


def test_class_copy_and_rand_noise(reg):
    pair = reg.register_concept("dogA", "dog", seed=1)
    dog = reg.base_embeddings[reg.vocab.id("dog")]
    assert torch.equal(pair.v_class.detach(), dog)
    noise = pair.v_rand.detach() - dog
    assert 0 < float(noise.abs().max()) < 0.06
    assert pair.v_rand.shape == pair.v_class.shape == (reg.width,)


def test_register_errors(reg):
    reg.register_concept("dogA", "dog")
    with pytest.raises(ConceptError, match="already"):
        reg.register_concept("dogA", "dog")
    with pytest.raises(ConceptError, match="vocabulary"):
        reg.register_concept("zebraQ", "zebra")


def test_placeholder_expansion(reg):
    reg.register_concept("dogA", "dog")
    spec = reg.bind("a photo of <dogA>")
    assert spec.tokens[:6] == ["<bos>", "a", "photo", "of", "<dogA_rand>", "<dogA_class>"]
    assert spec.tokens[6] == "<eos>"
    assert len(spec.ids) == reg.max_len
    assert [c.name for c in spec.bound_concepts] == ["dogA"]


def test_extract_examples(reg):
    reg.register_concept("dogA", "dog")
    reg.register_concept("man", "man")
    reg.register_concept("clock", "clock")
    assert len(extract_concept_tokens(reg.bind("a photo of <dogA>"), reg)) == 1
    refs = extract_concept_tokens(reg.bind("<man> advertising <clock>"), reg)
    assert [r.name for r in refs] == ["man", "clock"]
    assert refs[0].positions == (1, 2) and refs[1].positions == (4, 5)
    assert extract_concept_tokens(reg.bind("a photo of a beach"), reg) == []


def test_unknown_placeholder_raises(reg):
    with pytest.raises(ConceptError, match="unknown concept"):
        reg.bind("a photo of <catZ>")


def test_reference_prompt(reg):
    reg.register_concept("dogA", "dog")
    reg.register_concept("man", "man")
    assert make_reference_prompt("dogA", reg).text == "a photo of <dogA_rand> <dogA_class>"
    assert make_reference_prompt("man", reg).text == "a photo of <man_rand> <man_class>"
    with pytest.raises(ConceptError):
        make_reference_prompt("ghost", reg)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["dog", "cat", "clock", "man", "toy", "ball", "cup"]), min_size=1, max_size=5))
def test_reference_roundtrip_and_id_stability(classes):
    vocab = Vocabulary()
    reg = ConceptRegistry(torch.zeros(vocab.base_size, 4), vocab)
    before = {w: vocab.id(w) for w in BASE_WORDS}
    names = [f"c{i}{c}" for i, c in enumerate(classes)]
    ids = {}
    for n, c in zip(names, classes):
        p = reg.register_concept(n, c)
        ids[n] = (p.rand_id, p.class_id)
        for prev, pid in ids.items():
            assert (reg.get(prev).rand_id, reg.get(prev).class_id) == pid
    assert {w: vocab.id(w) for w in BASE_WORDS} == before
    for n in names:
        assert [r.name for r in extract_concept_tokens(make_reference_prompt(n, reg), reg)] == [n]


def test_embed_is_differentiable_for_concepts_only(reg):
    pair = reg.register_concept("dogA", "dog")
    ids, _ = reg.encode(["a photo of <dogA>"])
    emb = reg.embed(ids)
    emb.sum().backward()
    assert pair.v_rand.grad is not None and torch.all(pair.v_rand.grad == 1)
    assert torch.equal(emb[0, 1], reg.base_embeddings[reg.vocab.id("a")])


def test_truncation_and_unknown_words(reg, caplog):
    spec = reg.bind(" ".join(["dog"] * 40))
    assert len(spec.tokens) == reg.max_len and spec.tokens[-1] == "<eos>"
    spec = reg.bind("a photo of a platypus")
    assert "<unk>" in spec.tokens


def test_merge_keeps_tokens_distinct(reg):
    other = ConceptRegistry(reg.base_embeddings, Vocabulary())
    reg.register_concept("dogA", "dog", seed=1)
    other.register_concept("clockB", "clock", seed=2)
    merged = merge_registries([reg, other])
    assert set(merged.concepts) == {"dogA", "clockB"}
    assert torch.equal(merged.get("dogA").v_rand, reg.get("dogA").v_rand)
    assert torch.equal(merged.get("clockB").v_rand, other.get("clockB").v_rand)
    with pytest.raises(ConceptError):
        merge_registries([reg, reg])
