"""Closed toy vocabulary for driving captions and generic template sentences."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
COMMANDS = ("left", "straight", "right")

COUNT_WORDS = ("two", "three", "four", "five", "six")
CLASS_WORDS = {"car": ("car", "cars"), "truck": ("truck", "trucks"),
               "pedestrian": ("pedestrian", "pedestrians")}
REGION_WORDS = ("ahead", "left", "right", "behind")
DRIVING_EXTRA = ("and",)

DETERMINERS = ("the", "a")
ADJECTIVES = ("red", "blue", "green", "small", "big", "old", "new", "happy",
              "quiet", "bright", "dark", "tall", "warm", "cold", "soft", "young")
NOUNS = ("cat", "dog", "bird", "house", "tree", "book", "river", "garden", "child",
         "teacher", "table", "window", "city", "song", "boat", "apple", "chair",
         "letter", "flower", "mountain", "door", "lamp", "horse", "cup", "bridge",
         "forest", "painting", "kitchen", "student", "farmer", "market", "cloud",
         "stone", "shirt", "clock", "field", "island", "moon", "basket", "story")
VERBS = ("sees", "likes", "finds", "paints", "reads", "follows", "watches", "holds",
         "carries", "builds", "opens", "cleans", "draws", "visits", "remembers",
         "keeps", "sells", "wants", "moves", "shows")
PREPOSITIONS = ("near", "under", "beside", "above", "inside", "across", "behind",
                "around", "through", "past")


def driving_tokens() -> list[str]:
    """Specials, commands and every word a driving caption can render."""
    words: list[str] = list(SPECIALS) + list(COMMANDS)
    for w in (*REGION_WORDS, *DRIVING_EXTRA, *COUNT_WORDS, *(w for pair in CLASS_WORDS.values() for w in pair)):
        if w not in words:
            words.append(w)
    return words


def default_tokens() -> list[str]:
    words: list[str] = list(SPECIALS) + list(COMMANDS)
    pool = [*REGION_WORDS, *DRIVING_EXTRA, *COUNT_WORDS,
            *(w for pair in CLASS_WORDS.values() for w in pair),
            *DETERMINERS, *ADJECTIVES, *NOUNS, *VERBS, *PREPOSITIONS]
    for w in pool:
        if w not in words:
            words.append(w)
    return words


class VocabularyError(KeyError):
    pass


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=default_tokens)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for sp in SPECIALS:
            if sp not in self.index:
                raise ValueError(f"vocabulary lacks special token {sp}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, words) -> list[int]:
        out = []
        for w in words:
            try:
                out.append(self.index[w])
            except KeyError:
                raise VocabularyError(f"word {w!r} not in vocabulary") from None
        return out

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])
