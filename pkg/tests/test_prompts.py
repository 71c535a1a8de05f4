"""Prompt templates and tokenization."""

import pytest

from scenefuse import prompts
from scenefuse.prompts import PromptTemplate, PromptError, Vocabulary


def test_instance_text():
    assert prompts.instance_text(PromptTemplate("sks", "dog")) == ["a", "sks", "dog"]
    assert prompts.instance_text(PromptTemplate("qzx", "circle")) == ["a", "qzx", "circle"]
    with pytest.raises(PromptError):
        prompts.instance_text(PromptTemplate(None, "dog"))


def test_class_scene_text():
    tpl = PromptTemplate("sks", "dog", "in the rain")
    assert prompts.class_scene_text(tpl) == ["a", "dog", "in", "the", "rain"]
    assert prompts.class_scene_text(PromptTemplate(None, "circle", "on the grass")) == \
        ["a", "circle", "on", "the", "grass"]
    with pytest.raises(PromptError):
        prompts.class_scene_text(PromptTemplate("sks", "dog", None))


def test_instance_scene_text():
    tpl = PromptTemplate("sks", "dog", "in the rain")
    assert prompts.instance_scene_text(tpl) == ["a", "sks", "dog", "in", "the", "rain"]
    assert prompts.instance_scene_text(PromptTemplate("qzx", "circle", "in the snow")) == \
        ["a", "qzx", "circle", "in", "the", "snow"]
    assert prompts.instance_text(tpl.without_scene()) == ["a", "sks", "dog"]
    with pytest.raises(PromptError):
        prompts.instance_scene_text(PromptTemplate("sks", "dog", None))


def test_identifier_insertion_relation():
    """Instance-scene text is class-scene text with the identifier inserted
    at position 1."""
    for scene in prompts.SCENE_PHRASES:
        tpl = PromptTemplate("sks", "dog", scene)
        cs = prompts.class_scene_text(tpl)
        is_ = prompts.instance_scene_text(tpl)
        assert is_ == cs[:1] + ["sks"] + cs[1:]


def test_templates_injective():
    seen = {}
    for ident in ("sks", "qzx"):
        for cls in ("dog", "cat"):
            for scene in ("in the rain", "on the grass"):
                tpl = PromptTemplate(ident, cls, scene)
                key = tuple(prompts.instance_scene_text(tpl))
                assert key not in seen, f"collision: {tpl} vs {seen[key]}"
                seen[key] = tpl


def test_tokenize_roundtrip_and_errors():
    v = Vocabulary(["a", "dog", "cat"])
    assert v.tokenize("a dog") == [0, 1]
    assert v.tokenize(["a", "cat", "cat"]) == [0, 2, 2]
    ids = [2, 0, 1]
    assert v.tokenize(v.detokenize(ids)) == ids
    with pytest.raises(PromptError) as exc:
        v.tokenize("a horse")
    assert "horse" in str(exc.value)
    with pytest.raises(PromptError):
        v.detokenize([5])
    with pytest.raises(PromptError):
        Vocabulary(["a", "a"])


def test_vocabulary_file_roundtrip(tmp_path):
    v = Vocabulary(["a", "dog", "sks"])
    p = tmp_path / "vocab.txt"
    v.save(p)
    v2 = Vocabulary.load(p)
    assert v2.tokens == v.tokens
    assert v2.tokenize("sks dog") == v.tokenize("sks dog")


def test_build_vocabulary_identifier_rules():
    v = prompts.build_vocabulary(["dog"], ["in the rain"], identifiers=("sks",))
    for w in ["a", "dog", "in", "the", "rain", "sks"]:
        assert w in v
    with pytest.raises(PromptError):
        prompts.build_vocabulary(["dog"], ["in the rain"], identifiers=("dog",))
    with pytest.raises(PromptError):
        prompts.build_vocabulary(["dog"], ["in the rain"], identifiers=("two words",))


def test_scene_vocabulary_has_fifteen_phrases():
    assert len(prompts.SCENE_PHRASES) == 15
    assert "in the rain" in prompts.SCENE_PHRASES
    assert "on the grass" in prompts.SCENE_PHRASES


def test_validate_template():
    classes, scenes, idents = ("dog",), ("in the rain",), ("sks",)
    tpl = PromptTemplate("sks", "dog", "in the rain")
    assert prompts.validate_template(tpl, classes, scenes, idents) is tpl
    with pytest.raises(PromptError):
        prompts.validate_template(PromptTemplate("sks", "cat", None), classes, scenes, idents)
    with pytest.raises(PromptError):
        prompts.validate_template(PromptTemplate("sks", "dog", "on the moon"), classes, scenes, idents)
