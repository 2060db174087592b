"""Organ/finding hierarchy: loading, validation, and adjacency construction.

The graph is a three-level hierarchy (one root, organs, findings). Its
adjacency matrix doubles as the visible mask for the graph encoder's
self-attention: node i may attend to node j only where A[i][j] = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("root", "organ", "finding")
DEFAULT_SCHEMA = {"root": 1, "organ": 7, "finding": 20}


class GraphParseError(ValueError):
    """A line of the graph file does not match `kind<TAB>name<TAB>parent`."""


class GraphSchemaError(ValueError):
    """The parsed node set violates the graph schema."""


@dataclass(frozen=True)
class GraphNode:
    name: str
    kind: str
    parent_organ: str | None = None


@dataclass(frozen=True)
class KnowledgeGraph:
    nodes: tuple[GraphNode, ...]
    adjacency: np.ndarray  # n x n, int8, symmetric, unit diagonal

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def kind_index(self, node: GraphNode) -> int:
        return KINDS.index(node.kind)


def validate_nodes(nodes: list[GraphNode], schema: dict[str, int] | None) -> None:
    counts = {k: 0 for k in KINDS}
    names = set()
    organs = set()
    for node in nodes:
        if node.kind not in KINDS:
            raise GraphSchemaError(f"unknown node kind {node.kind!r}")
        if not node.name or node.name != node.name.lower():
            raise GraphSchemaError(f"node name must be nonempty lowercase: {node.name!r}")
        if node.name in names:
            raise GraphSchemaError(f"duplicate node name {node.name!r}")
        names.add(node.name)
        counts[node.kind] += 1
        if node.kind == "organ":
            organs.add(node.name)
        if node.kind == "finding":
            if not node.parent_organ:
                raise GraphSchemaError(f"finding {node.name!r} has no parent organ")
        elif node.parent_organ is not None:
            raise GraphSchemaError(f"{node.kind} node {node.name!r} must not have a parent")
    for node in nodes:
        if node.kind == "finding" and node.parent_organ not in organs:
            raise GraphSchemaError(
                f"finding {node.name!r} names absent organ {node.parent_organ!r}")
    if counts["root"] != 1:
        raise GraphSchemaError(f"expected exactly one root node, got {counts['root']}")
    if schema is not None and counts != schema:
        raise GraphSchemaError(f"node counts {counts} do not match schema {schema}")


def build_adjacency(nodes: list[GraphNode]) -> np.ndarray:
    """Binary adjacency: root to everything, organ to organ, finding to its
    parent organ and to findings sharing that organ. Unit diagonal."""
    n = len(nodes)
    a = np.zeros((n, n), dtype=np.int8)
    for i, ni in enumerate(nodes):
        for j, nj in enumerate(nodes):
            if i == j or ni.kind == "root" or nj.kind == "root":
                a[i, j] = 1
            elif ni.kind == "organ" and nj.kind == "organ":
                a[i, j] = 1
            elif ni.kind == "finding" and nj.kind == "finding":
                a[i, j] = int(ni.parent_organ == nj.parent_organ)
            elif ni.kind == "finding" and nj.kind == "organ":
                a[i, j] = int(ni.parent_organ == nj.name)
            elif ni.kind == "organ" and nj.kind == "finding":
                a[i, j] = int(nj.parent_organ == ni.name)
    return a


def parse_graph_lines(lines: list[str]) -> list[GraphNode]:
    nodes = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphParseError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        kind, name, parent = (p.strip() for p in parts)
        nodes.append(GraphNode(name=name, kind=kind,
                               parent_organ=None if parent == "-" else parent))
    return nodes


def load_graph(path: str | Path, schema: dict[str, int] | None = None) -> KnowledgeGraph:
    """Load and validate a graph file (`kind<TAB>name<TAB>parent_or_dash`).

    `schema` gives required node counts per kind; None accepts any counts
    (at least the single-root rule still holds).
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    nodes = parse_graph_lines(lines)
    validate_nodes(nodes, schema)
    return KnowledgeGraph(nodes=tuple(nodes), adjacency=build_adjacency(nodes))


def write_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    lines = [f"{n.kind}\t{n.name}\t{n.parent_organ or '-'}" for n in graph.nodes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def default_graph_path() -> Path:
    return Path(__file__).parent / "assets" / "chest_graph.tsv"


def load_default_graph() -> KnowledgeGraph:
    return load_graph(default_graph_path(), schema=dict(DEFAULT_SCHEMA))
