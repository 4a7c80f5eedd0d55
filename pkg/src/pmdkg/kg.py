"""Knowledge-graph loading, inverse-triple augmentation and the filter index."""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, NamedTuple

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Entity:
    id: int
    key: str
    name: str
    description: str
    test_only: bool = False


@dataclass(frozen=True)
class Relation:
    id: int
    key: str
    name: str
    inverse: bool = False


@dataclass(frozen=True)
class KnowledgeGraph:
    entities: tuple[Entity, ...]
    relations: tuple[Relation, ...]
    splits: Mapping[str, tuple[Triple, ...]]
    augmented: bool = False
    num_base_relations: int = field(default=-1)

    def __post_init__(self):
        if self.num_base_relations < 0:
            object.__setattr__(self, "num_base_relations", len(self.relations))

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def counts(self) -> dict[str, int]:
        return {s: len(self.splits.get(s, ())) for s in SPLITS}

    def entity_index(self) -> dict[str, int]:
        return {e.key: e.id for e in self.entities}

    def relation_index(self) -> dict[str, int]:
        return {r.key: r.id for r in self.relations if not r.inverse}

    def stats(self) -> dict:
        c = self.counts()
        return {
            "entities": self.num_entities,
            "relations": self.num_base_relations,
            "relations_with_inverse": self.num_relations,
            "train": c["train"],
            "valid": c["valid"],
            "test": c["test"],
            "test_only_entities": sum(e.test_only for e in self.entities),
            "augmented": self.augmented,
        }

    def validate(self) -> None:
        ne, nr = self.num_entities, self.num_relations
        for i, e in enumerate(self.entities):
            if e.id != i:
                raise DataError(f"entity ids are not contiguous at position {i}")
        for split, triples in self.splits.items():
            if len(set(triples)) != len(triples):
                raise DataError(f"duplicate triples in split {split!r}")
            for t in triples:
                if not (0 <= t.head < ne and 0 <= t.tail < ne and 0 <= t.relation < nr):
                    raise DataError(f"triple {t} in {split!r} references unknown ids")

    # -- (de)serialization of prepared artifacts --------------------------------

    def to_json(self) -> dict:
        return {
            "augmented": self.augmented,
            "num_base_relations": self.num_base_relations,
            "entities": [[e.key, e.name, e.description, e.test_only] for e in self.entities],
            "relations": [[r.key, r.name, r.inverse] for r in self.relations],
            "splits": {s: [list(t) for t in ts] for s, ts in self.splits.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> KnowledgeGraph:
        entities = tuple(
            Entity(i, k, n, d, bool(flag)) for i, (k, n, d, flag) in enumerate(obj["entities"])
        )
        relations = tuple(
            Relation(i, k, n, bool(inv)) for i, (k, n, inv) in enumerate(obj["relations"])
        )
        splits = {s: tuple(Triple(*t) for t in ts) for s, ts in obj["splits"].items()}
        graph = cls(entities, relations, splits, obj["augmented"], obj["num_base_relations"])
        graph.validate()
        return graph


def _read_triples(path: Path) -> list[tuple[int, str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {line!r}")
            rows.append((lineno, parts[0].strip(), parts[1].strip(), parts[2].strip()))
    return rows


def _default_relation_text(key: str) -> str:
    return key.replace("_", " ").strip()


_WORDNET_NAME = re.compile(r"^_*(.+?)_[A-Z]{2}_\d+$")


def clean_name(name: str) -> str:
    """WordNet-style ``__land_reform_NN_1`` becomes ``land reform``; other names pass through."""
    m = _WORDNET_NAME.match(name)
    return m.group(1).replace("_", " ") if m else name


def read_descriptions(path: Path) -> tuple[dict[str, tuple[str, str]], dict[str, str]]:
    """Read entity and relation texts.

    JSON form: ``{"entities": {id: {"name", "description"}}, "relations": {id: text}}``
    or a flat ``{id: {"name", "description"}}``.  TSV form: ``id<TAB>name<TAB>description``;
    relation rows may be given as ``@relation<TAB>id<TAB>text``.
    """
    path = Path(path)
    entities: dict[str, tuple[str, str]] = {}
    relations: dict[str, str] = {}
    if path.suffix.lower() == ".json":
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        ents = obj.get("entities", obj) if isinstance(obj, dict) else None
        if not isinstance(ents, dict):
            raise DataError(f"{path}: expected a JSON object")
        for key, val in ents.items():
            if key == "relations" and "entities" not in obj:
                continue
            if isinstance(val, str):
                entities[key] = (clean_name(val), "")
            elif isinstance(val, dict):
                entities[key] = (clean_name(str(val.get("name", key))), str(val.get("description", "")))
            else:
                raise DataError(f"{path}: entry for {key!r} must be a string or object")
        for key, val in obj.get("relations", {}).items():
            relations[key] = val if isinstance(val, str) else str(val.get("name", key))
        return entities, relations

    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
            if not row or not any(c.strip() for c in row):
                continue
            if row[0] == "@relation":
                if len(row) < 3:
                    raise DataError(f"{path}:{lineno}: relation row needs id and text")
                relations[row[1]] = row[2]
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected id<TAB>name[<TAB>description]")
            entities[row[0]] = (clean_name(row[1]), row[2] if len(row) > 2 else "")
    return entities, relations


def load_graph(
    train_path, valid_path, test_path, descriptions_path=None
) -> KnowledgeGraph:
    """Load tab-separated triple files plus entity texts into a graph with dense ids.

    Ids are assigned in first-seen order over train, valid, test.  Entities seen
    only in valid/test are kept and flagged ``test_only``; with a descriptions
    file they must have an entry there.  A missing description falls back to
    the entity name.
    """
    paths = dict(zip(SPLITS, (train_path, valid_path, test_path)))
    raw = {s: _read_triples(Path(p)) for s, p in paths.items()}
    ent_text: dict[str, tuple[str, str]] = {}
    rel_text: dict[str, str] = {}
    if descriptions_path is not None:
        ent_text, rel_text = read_descriptions(Path(descriptions_path))

    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    train_entities: set[str] = set()
    for _, h, _, t in raw["train"]:
        train_entities.update((h, t))

    splits: dict[str, tuple[Triple, ...]] = {}
    for split in SPLITS:
        seen: set[Triple] = set()
        triples: list[Triple] = []
        for lineno, h, r, t in raw[split]:
            for key in (h, t):
                if key not in ent_ids:
                    if ent_text and key not in ent_text and key not in train_entities:
                        raise DataError(
                            f"{paths[split]}:{lineno}: entity {key!r} has no description "
                            "and does not occur in train"
                        )
                    ent_ids[key] = len(ent_ids)
            if r not in rel_ids:
                rel_ids[r] = len(rel_ids)
            triple = Triple(ent_ids[h], rel_ids[r], ent_ids[t])
            if triple in seen:
                logger.warning("%s: dropping duplicate triple %s\t%s\t%s", paths[split], h, r, t)
                continue
            seen.add(triple)
            triples.append(triple)
        splits[split] = tuple(triples)

    entities = []
    for key, idx in ent_ids.items():
        name, desc = ent_text.get(key, (key, ""))
        name = name.strip() or key
        desc = desc.strip() or name
        entities.append(Entity(idx, key, name, desc, test_only=key not in train_entities))
    relations = [
        Relation(idx, key, rel_text.get(key, _default_relation_text(key)))
        for key, idx in rel_ids.items()
    ]
    graph = KnowledgeGraph(tuple(entities), tuple(relations), splits)
    graph.validate()
    logger.info("loaded graph: %s", graph.stats())
    return graph


def add_inverse_triples(graph: KnowledgeGraph) -> KnowledgeGraph:
    if graph.augmented or any(r.inverse for r in graph.relations):
        raise DataError("graph is already augmented with inverse triples")
    n = graph.num_relations
    inverse_relations = tuple(
        Relation(r.id + n, r.key + "^-1", "inverse " + r.name, inverse=True)
        for r in graph.relations
    )
    splits = {
        s: tuple(ts) + tuple(Triple(t.tail, t.relation + n, t.head) for t in ts)
        for s, ts in graph.splits.items()
    }
    return replace(
        graph,
        relations=graph.relations + inverse_relations,
        splits=splits,
        augmented=True,
        num_base_relations=n,
    )


FilterIndex = Mapping[tuple[int, int], frozenset]


def build_filter_index(graph: KnowledgeGraph) -> dict[tuple[int, int], frozenset]:
    """Map each (head, relation) to every tail known true across all splits."""
    tails: dict[tuple[int, int], set[int]] = defaultdict(set)
    for triples in graph.splits.values():
        for h, r, t in triples:
            tails[(h, r)].add(t)
    return {k: frozenset(v) for k, v in tails.items()}
