"""Process-network DAG: validation, Merkle hashes, startup and diagnosis order.

Manifest schema: ``{"nodes": [{"name": str, "depends_on": [str], "config": {}}]}``.

``hash(n) = sha256(canonical({"name", "config"}) || sorted dependency hashes)``
and the root hash covers the sorted hashes of the nodes nothing depends on.
Ties in every ordering are broken by node name.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Union

from actordb.canonical import canonical_bytes
from actordb.errors import CycleDetected, DuplicateNode, InvalidArgument, UnknownDependency, UnknownNode


@dataclass(frozen=True)
class ProcessNode:
    name: str
    depends_on: tuple = ()
    config: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class DagManifest:
    nodes: dict  # name -> ProcessNode
    node_hashes: dict  # name -> bytes
    root_hash: bytes

    def dependents(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for node in self.nodes.values():
            for dep in node.depends_on:
                out[dep].append(node.name)
        return out


def _find_cycle(nodes: dict[str, ProcessNode]) -> list[str]:
    color = dict.fromkeys(nodes, 0)  # 0 new, 1 on stack, 2 done
    stack: list[str] = []

    def visit(n):
        color[n] = 1
        stack.append(n)
        for d in sorted(nodes[n].depends_on):
            if color[d] == 1:
                return stack[stack.index(d):] + [d]
            if color[d] == 0:
                found = visit(d)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in sorted(nodes):
        if color[n] == 0:
            found = visit(n)
            if found:
                return found
    return []


def load(document: Union[Mapping, str, Path]) -> DagManifest:
    if isinstance(document, (str, Path)):
        document = json.loads(Path(document).read_text())
    try:
        raw_nodes = document["nodes"]
    except (KeyError, TypeError):
        raise InvalidArgument("manifest needs a 'nodes' list") from None
    nodes: dict[str, ProcessNode] = {}
    for raw in raw_nodes:
        name = raw.get("name") if isinstance(raw, Mapping) else None
        if not isinstance(name, str) or not name:
            raise InvalidArgument(f"node without a name: {raw!r}")
        if name in nodes:
            raise DuplicateNode(f"duplicate node {name!r}")
        deps = tuple(sorted(set(raw.get("depends_on", ()))))
        nodes[name] = ProcessNode(name, deps, dict(raw.get("config", {})))
    for node in nodes.values():
        for d in node.depends_on:
            if d not in nodes:
                raise UnknownDependency(f"{node.name!r} depends on unknown node {d!r}")
    cycle = _find_cycle(nodes)
    if cycle:
        raise CycleDetected(cycle)

    hashes: dict[str, bytes] = {}
    for name in _kahn(nodes):
        node = nodes[name]
        h = hashlib.sha256(canonical_bytes({"name": node.name, "config": node.config}))
        for dh in sorted(hashes[d] for d in node.depends_on):
            h.update(dh)
        hashes[name] = h.digest()
    depended_on = {d for n in nodes.values() for d in n.depends_on}
    root = hashlib.sha256(b"".join(sorted(hashes[n] for n in nodes if n not in depended_on))).digest()
    return DagManifest(nodes, hashes, root)


def _kahn(nodes: dict[str, ProcessNode]) -> list[str]:
    indeg = {n: len(node.depends_on) for n, node in nodes.items()}
    dependents: dict[str, list[str]] = {n: [] for n in nodes}
    for node in nodes.values():
        for d in node.depends_on:
            dependents[d].append(node.name)
    heap = [n for n, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in dependents[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    return order


def topo_order(manifest: DagManifest) -> list[str]:
    """Dependencies first; among ready nodes the smallest name goes next."""
    return _kahn(manifest.nodes)


def closure(manifest: DagManifest, name: str) -> set[str]:
    if name not in manifest.nodes:
        raise UnknownNode(f"unknown node {name!r}")
    seen = {name}
    todo = [name]
    while todo:
        for d in manifest.nodes[todo.pop()].depends_on:
            if d not in seen:
                seen.add(d)
                todo.append(d)
    return seen


def diagnose(manifest: DagManifest, failed_node: str) -> list[str]:
    """Dependency closure of ``failed_node``: deepest candidates first, the failed node last."""
    keep = closure(manifest, failed_node)
    return _kahn({n: manifest.nodes[n] for n in keep})


def shutdown_order(manifest: DagManifest) -> list[str]:
    return list(reversed(topo_order(manifest)))


def manifest_json(manifest: DagManifest) -> dict:
    return {
        "nodes": [
            {"name": n.name, "depends_on": list(n.depends_on), "config": dict(n.config)}
            for n in (manifest.nodes[k] for k in topo_order(manifest))
        ],
        "node_hashes": {k: v.hex() for k, v in sorted(manifest.node_hashes.items())},
        "root_hash": manifest.root_hash.hex(),
    }
