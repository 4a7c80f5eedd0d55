import json
from pathlib import Path

import numpy as np
import pytest

from pmdkg import synthetic
from pmdkg.kg import add_inverse_triples, load_graph
from pmdkg.text import build_vocab


def write_dataset(directory: Path, train, valid=(), test=(), descriptions=None):
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, rows in (("train", train), ("valid", valid), ("test", test)):
        p = directory / f"{split}.tsv"
        p.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
        paths[split] = p
    if descriptions is not None:
        p = directory / "descriptions.json"
        p.write_text(json.dumps(descriptions), encoding="utf-8")
        paths["descriptions"] = p
    return paths


def load(paths):
    return load_graph(paths["train"], paths["valid"], paths["test"], paths.get("descriptions"))


@pytest.fixture
def toy_paths(tmp_path):
    descriptions = {
        "entities": {
            "cat": {"name": "cat", "description": "a small furry animal"},
            "dog": {"name": "dog", "description": "a loyal animal that barks"},
            "mammal": {"name": "mammal", "description": "warm blooded animal class"},
            "fish": {"name": "fish", "description": ""},
        },
        "relations": {"is_a": "is a"},
    }
    return write_dataset(
        tmp_path / "toy",
        train=[("cat", "is_a", "mammal"), ("dog", "is_a", "mammal")],
        valid=[("dog", "likes", "cat")],
        test=[("fish", "is_a", "fish")],
        descriptions=descriptions,
    )


@pytest.fixture(scope="session")
def synthetic_graph():
    p = synthetic.bundled_paths()
    return add_inverse_triples(load_graph(p["train"], p["valid"], p["test"], p["descriptions"]))


@pytest.fixture(scope="session")
def synthetic_vocab(synthetic_graph):
    return build_vocab(synthetic_graph)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for the acceptance summary, then assert the outcome."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def criterion_not_run():
    def record(number: int, title: str, reason: str) -> None:
        line = f"[NOT RUN] criterion {number}: {title} ({reason})"
        _CRITERIA.append(line)
        pytest.skip(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
