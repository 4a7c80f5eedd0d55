"""Seed-fixed synthetic compositional knowledge graph used for desk-scale experiments.

Items carry most of their attributes in their description text.  Two relations
are only reachable by composition: an item's use follows from its shape, and
its region of origin follows from the region its maker is based in.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

BUNDLED_SEED = 7
BUNDLED_ITEMS = 70

COLORS = ("crimson", "azure", "amber", "olive", "ivory", "violet")
SHAPES = ("round", "square", "oval", "triangular")
MATERIALS = ("oak", "iron", "glass", "clay")
SIZES = ("tiny", "medium", "huge")
REGIONS = ("northland", "southmarch", "eastvale", "westreach")
USE_OF_SHAPE = {"round": "rolling", "square": "stacking", "oval": "holding", "triangular": "cutting"}
N_MAKERS = 6

RELATIONS = (
    "has_color",
    "has_shape",
    "made_of",
    "has_size",
    "made_by",
    "used_for",
    "comes_from",
    "based_in",
)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u")
_CODAS = ("", "n", "r", "l", "k", "s", "m")


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
        for _ in range(syllables)
    )


def _unique_words(rng: np.random.Generator, n: int, syllables: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        w = _word(rng, syllables)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate(seed: int = BUNDLED_SEED, n_items: int = BUNDLED_ITEMS, holdout: float = 0.1):
    """Return (splits, descriptions) with splits mapping name -> list of (h, r, t) keys."""
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    entities: dict[str, dict[str, str]] = {}

    def add(key: str, name: str, description: str) -> str:
        entities[key] = {"name": name, "description": description}
        return key

    for c in COLORS:
        add(f"color_{c}", c, "a color")
    for s in SHAPES:
        add(f"shape_{s}", s, "a shape")
    for m in MATERIALS:
        add(f"material_{m}", m, "a material")
    for z in SIZES:
        add(f"size_{z}", z, "a size")
    for g in REGIONS:
        add(f"region_{g}", g, "a region")
    for u in USE_OF_SHAPE.values():
        add(f"use_{u}", u, "a purpose")

    facts: list[tuple[str, str, str]] = []
    makers = []
    for name in _unique_words(rng, N_MAKERS, 2, taken):
        region = REGIONS[rng.integers(len(REGIONS))]
        key = add(f"maker_{name}", name, f"a workshop located in {region}")
        makers.append((key, name, region))
        facts.append((key, "based_in", f"region_{region}"))
    fixed = list(facts)

    for name in _unique_words(rng, n_items, 2, taken):
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        material = MATERIALS[rng.integers(len(MATERIALS))]
        size = SIZES[rng.integers(len(SIZES))]
        maker_key, maker_name, region = makers[rng.integers(len(makers))]
        key = add(
            f"item_{name}",
            name,
            f"a {size} {color} {shape} object made of {material} by {maker_name}",
        )
        facts.extend(
            [
                (key, "has_color", f"color_{color}"),
                (key, "has_shape", f"shape_{shape}"),
                (key, "made_of", f"material_{material}"),
                (key, "has_size", f"size_{size}"),
                (key, "made_by", maker_key),
                (key, "used_for", f"use_{USE_OF_SHAPE[shape]}"),
                (key, "comes_from", f"region_{region}"),
            ]
        )

    item_facts = facts[len(fixed):]
    order = rng.permutation(len(item_facts))
    n_hold = int(round(holdout * len(item_facts)))
    test = [item_facts[i] for i in order[:n_hold]]
    valid = [item_facts[i] for i in order[n_hold : 2 * n_hold]]
    train = fixed + [item_facts[i] for i in order[2 * n_hold :]]
    relations = {r: r.replace("_", " ") for r in RELATIONS}
    return {"train": train, "valid": valid, "test": test}, {"entities": entities, "relations": relations}


def write(directory, seed: int = BUNDLED_SEED, n_items: int = BUNDLED_ITEMS) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits, descriptions = generate(seed, n_items)
    paths = {}
    for split, rows in splits.items():
        path = directory / f"{split}.tsv"
        path.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows), encoding="utf-8")
        paths[split] = path
    desc_path = directory / "descriptions.json"
    desc_path.write_text(json.dumps(descriptions, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["descriptions"] = desc_path
    return paths


def bundled_paths() -> dict[str, Path]:
    """Paths of the synthetic graph shipped with the package."""
    root = Path(str(resources.files("pmdkg") / "data" / "synthetic"))
    return {
        "train": root / "train.tsv",
        "valid": root / "valid.tsv",
        "test": root / "test.tsv",
        "descriptions": root / "descriptions.json",
    }
