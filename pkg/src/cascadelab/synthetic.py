"""Synthetic grade-school style text and matching task suites.

Everything here is generated from templates and a seed; none of it reproduces
any published corpus or case list. Text is plain ASCII so the byte tokenizer
(id = byte value) applies directly.
"""

from __future__ import annotations

import numpy as np

BOYS = ["Tom", "Ben", "Sam", "Jack", "Max", "Leo", "Owen", "Ryan", "Carl", "Dan", "Eli", "Gus", "Hank", "Ivan", "Kyle"]
GIRLS = ["Anna", "Mia", "Zoe", "Lily", "Emma", "Ruby", "Nora", "Pia", "Quinn", "Uma", "Vera", "Wendy", "Fay", "Jill", "Kate"]
PETS = ["Pepper", "Cookie", "Sunny", "Lucky", "Button", "Pickle", "Biscuit", "Muffin", "Rocket", "Ziggy", "Waffle", "Noodle"]
ANIMALS = ["dog", "cat", "bird", "fish", "frog", "rabbit", "turtle", "hamster"]
PLACES = ["park", "school", "garden", "library", "market", "farm", "beach", "kitchen", "yard", "zoo"]
OBJECTS = ["ball", "book", "coin", "kite", "hat", "cup", "map", "key", "shell", "apple"]
ADJS = ["small", "big", "happy", "quiet", "fast", "little", "brown", "old", "young", "funny"]
PET_VERBS = ["runs", "sleeps", "plays", "jumps", "sits", "eats", "hides", "swims"]
FILLER = [
    "The sun is warm today.",
    "We read a story in class.",
    "It was a good day to learn.",
    "The bus came late again.",
    "Some birds sing in the morning.",
    "Water is good for plants.",
    "The class went outside to play.",
    "We can count to one hundred.",
    "The rain fell on the roof.",
    "Books help us learn new words.",
]
# (verb phrase, which participant the "because" clause is about, reason)
WINOGRAD = [
    ("thanked", "object", "was kind"),
    ("praised", "object", "worked hard"),
    ("helped", "object", "was tired"),
    ("comforted", "object", "was sad"),
    ("called", "subject", "was lonely"),
    ("visited", "subject", "was bored"),
    ("apologized to", "subject", "was rude"),
    ("followed", "subject", "was lost"),
]


def _pick(rng: np.random.Generator, items: list):
    return items[int(rng.integers(len(items)))]


def _person(rng: np.random.Generator) -> tuple[str, str]:
    if rng.random() < 0.5:
        return _pick(rng, BOYS), "m"
    return _pick(rng, GIRLS), "f"


def _two_people(rng: np.random.Generator) -> tuple[tuple[str, str], tuple[str, str]]:
    a = _person(rng)
    while True:
        b = _person(rng)
        if b[0][0] != a[0][0]:
            return a, b


def pet_sentence(rng: np.random.Generator) -> tuple[str, str]:
    """Returns (full text, prefix that ends right before the repeated pet name)."""
    name, _ = _person(rng)
    pet = _pick(rng, PETS)
    animal = _pick(rng, ANIMALS)
    adj = _pick(rng, ADJS)
    head = f"{name} has a {adj} {animal} named {pet}. Every day "
    return head + f"{pet} {_pick(rng, PET_VERBS)} in the {_pick(rng, PLACES)}.", head


def pronoun_sentence(rng: np.random.Generator) -> tuple[str, str, str]:
    """Returns (full text, prefix before the pronoun, gender)."""
    name, gender = _person(rng)
    obj = _pick(rng, OBJECTS)
    place = _pick(rng, PLACES)
    pron = "he" if gender == "m" else "she"
    head = f"{name} found a {obj} at the {place}, and then "
    return head + f"{pron} took it home.", head, gender


def winograd_sentence(rng: np.random.Generator) -> tuple[str, str, str, str]:
    """Returns (full text, prefix before the referent, referent, other participant)."""
    (a, _), (b, _) = _two_people(rng)
    verb, who, reason = _pick(rng, WINOGRAD)
    ref, other = (b, a) if who == "object" else (a, b)
    head = f"{a} {verb} {b} because "
    return head + f"{ref} {reason}.", head, ref, other


def generate_text(n_bytes: int, seed: int) -> str:
    rng = np.random.default_rng(seed)
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        r = rng.random()
        if r < 0.3:
            s = pet_sentence(rng)[0]
        elif r < 0.55:
            s = pronoun_sentence(rng)[0]
        elif r < 0.85:
            s = winograd_sentence(rng)[0]
        else:
            s = _pick(rng, FILLER)
        parts.append(s)
        size += len(s) + 1
    return " ".join(parts)[:n_bytes]


def encode(text: str) -> list[int]:
    return list(text.encode("ascii"))


def _lead(rng: np.random.Generator) -> str:
    return _pick(rng, FILLER) + " "


def suite_lines(seed: int, n_cap: int = 8, n_gender: int = 16, n_winograd: int = 50) -> list[str]:
    """Task-suite lines in the ``task<TAB>ids<TAB>correct<TAB>incorrect`` format.

    Capitalization asks for the capital first letter of a pet name seen
    earlier; gender asks for the first letter of the pronoun; Winograd-style
    cases ask for the first letter of the referent's name.
    """
    rng = np.random.default_rng(seed)
    lines = []

    def emit(task, prefix, correct, incorrect):
        ids = ",".join(str(i) for i in encode(prefix))
        lines.append(f"{task}\t{ids}\t{ord(correct)}\t{ord(incorrect)}")

    for _ in range(n_cap):
        _, head = pet_sentence(rng)
        pet = head.split(" named ")[1].split(".")[0]
        emit("capitalization", _lead(rng) + head, pet[0], pet[0].lower())
    for _ in range(n_gender):
        _, head, gender = pronoun_sentence(rng)
        emit("gender", _lead(rng) + head, "h" if gender == "m" else "s", "s" if gender == "m" else "h")
    for _ in range(n_winograd):
        _, head, ref, other = winograd_sentence(rng)
        emit("winograd", _lead(rng) + head, ref[0], other[0])
    return lines
