"""Prompt templates and whitespace tokenization.

Four text roles are realized from one (identifier, class noun, scene)
triple: instance text "a <id> <class>", class text "a <class>",
class-scene text "a <class> <scene>", and instance-scene text
"a <id> <class> <scene>".
"""

from dataclasses import dataclass

# full scene phrase list; a world renders a subset of these
SCENE_PHRASES = (
    "in the rain",
    "in the river",
    "in the sky",
    "in the room",
    "in the basket",
    "in the TV",
    "in the snow",
    "on the sofa",
    "on the bed",
    "on the table",
    "on the stage",
    "on the top of mountain",
    "on the playground",
    "on the floor",
    "on the grass",
)

DEFAULT_IDENTIFIER = "sks"


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    identifier: str = None
    class_noun: str = None
    scene: str = None

    def with_scene(self, scene):
        return PromptTemplate(self.identifier, self.class_noun, scene)

    def without_scene(self):
        return PromptTemplate(self.identifier, self.class_noun, None)


def _require(tpl, **fields):
    for name, value in fields.items():
        if value is None:
            raise PromptError(f"prompt template is missing field {name!r}: {tpl}")


def instance_text(tpl):
    """"a <identifier> <class noun>" as a token list."""
    _require(tpl, identifier=tpl.identifier, class_noun=tpl.class_noun)
    return ["a", tpl.identifier, tpl.class_noun]


def class_text(tpl):
    """"a <class noun>" as a token list (scene-free prior text)."""
    _require(tpl, class_noun=tpl.class_noun)
    return ["a", tpl.class_noun]


def class_scene_text(tpl):
    """"a <class noun> <scene>" as a token list."""
    _require(tpl, class_noun=tpl.class_noun, scene=tpl.scene)
    return ["a", tpl.class_noun] + tpl.scene.split()


def instance_scene_text(tpl):
    """"a <identifier> <class noun> <scene>" as a token list."""
    _require(tpl, identifier=tpl.identifier, class_noun=tpl.class_noun, scene=tpl.scene)
    return ["a", tpl.identifier, tpl.class_noun] + tpl.scene.split()


class Vocabulary:
    """Fixed token table; id = position in the token list."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise PromptError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.ids

    def tokenize(self, words):
        """Map a token list (or whitespace string) to ids; OOV is an error."""
        if isinstance(words, str):
            words = words.split()
        out = []
        for w in words:
            if w not in self.ids:
                raise PromptError(f"word {w!r} is not in the vocabulary")
            out.append(self.ids[w])
        return out

    def detokenize(self, ids):
        try:
            return [self.tokens[i] for i in ids]
        except IndexError:
            raise PromptError(f"token id outside vocabulary of size {len(self)}") from None

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(tokens)


def build_vocabulary(class_nouns, scene_phrases, identifiers=(DEFAULT_IDENTIFIER,)):
    """Assemble the vocabulary: "a", classes, scene words, identifiers.

    Identifiers must be single tokens that collide with no class or scene
    word, so an identifier stays a rare token with no prior meaning.
    """
    tokens = ["a"]
    for noun in class_nouns:
        if noun not in tokens:
            tokens.append(noun)
    for phrase in scene_phrases:
        for w in phrase.split():
            if w not in tokens:
                tokens.append(w)
    for ident in identifiers:
        if " " in ident:
            raise PromptError(f"identifier {ident!r} must be a single token")
        if ident in tokens:
            raise PromptError(f"identifier {ident!r} collides with a class or scene word")
        tokens.append(ident)
    return Vocabulary(tokens)


def validate_template(tpl, class_nouns, scene_phrases, identifiers):
    """Check a template against the world's vocabularies."""
    if tpl.class_noun is not None and tpl.class_noun not in class_nouns:
        raise PromptError(f"unknown class noun {tpl.class_noun!r}")
    if tpl.scene is not None and tpl.scene not in scene_phrases:
        raise PromptError(f"unknown scene {tpl.scene!r}")
    if tpl.identifier is not None and tpl.identifier not in identifiers:
        raise PromptError(f"unknown identifier {tpl.identifier!r}")
    return tpl
