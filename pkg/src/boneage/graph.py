"""ROI schema and the two ROI graphs: joint connections and anatomy-group cliques."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GROUPS = ("A", "B", "C", "D")
N_ROIS = 17
LAPLACIAN_MODES = ("symmetric", "literal")


class SchemaError(ValueError):
    pass


def default_schema_document() -> dict:
    """Five finger chains A_i-B_i-C_i, C1..C3 -> D1, C4..C5 -> D2, D1-D2.

    Only B3's neighbourhood is fixed by the method; the rest is a convention.
    """
    rois = [{"name": f"{g}{i}", "group": g} for g in "ABC" for i in range(1, 6)]
    rois += [{"name": "D1", "group": "D"}, {"name": "D2", "group": "D"}]
    edges = []
    for i in range(1, 6):
        edges += [[f"A{i}", f"B{i}"], [f"B{i}", f"C{i}"]]
    edges += [["C1", "D1"], ["C2", "D1"], ["C3", "D1"], ["C4", "D2"], ["C5", "D2"], ["D1", "D2"]]
    return {"rois": rois, "g1_edges": edges}


@dataclass(frozen=True)
class RoiSchema:
    names: tuple[str, ...]
    groups: tuple[str, ...]                 # group label per ROI, schema order
    g1_edges: tuple[tuple[int, int], ...]   # index pairs, i < j, sorted

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def group_labels(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.groups), key=self.groups.index))

    def group_index(self) -> np.ndarray:
        labels = self.group_labels
        return np.array([labels.index(g) for g in self.groups])

    def members(self, group: str) -> list[int]:
        return [i for i, g in enumerate(self.groups) if g == group]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_document(self) -> dict:
        return {
            "rois": [{"name": n, "group": g} for n, g in zip(self.names, self.groups)],
            "g1_edges": [[self.names[a], self.names[b]] for a, b in self.g1_edges],
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def permuted(self, perm) -> "RoiSchema":
        """Schema whose ROI ``k`` is the original ROI ``perm[k]``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        edges = tuple(sorted(tuple(sorted((inv[a], inv[b]))) for a, b in self.g1_edges))
        return RoiSchema(tuple(self.names[p] for p in perm), tuple(self.groups[p] for p in perm), edges)


def load_roi_schema(document=None, expected_count: int | None = N_ROIS,
                    allowed_groups=GROUPS) -> RoiSchema:
    """Validate a schema document (dict, JSON path, or None for the default)."""
    if document is None:
        document = default_schema_document()
    elif isinstance(document, (str, Path)):
        document = json.loads(Path(document).read_text())
    try:
        rois = document["rois"]
        raw_edges = document["g1_edges"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"schema document needs 'rois' and 'g1_edges': {exc}") from exc

    names = [r["name"] for r in rois]
    groups = [r["group"] for r in rois]
    if expected_count is not None and len(names) != expected_count:
        raise SchemaError(f"schema must list exactly {expected_count} ROIs, got {len(names)}")
    if len(set(names)) != len(names):
        raise SchemaError("duplicate ROI names in schema")
    if allowed_groups is not None:
        unknown = sorted(set(groups) - set(allowed_groups))
        if unknown:
            raise SchemaError(f"unknown anatomy group(s) {unknown}; allowed {list(allowed_groups)}")
        if expected_count == N_ROIS and set(groups) != set(allowed_groups):
            raise SchemaError(f"every group in {list(allowed_groups)} must have at least one ROI")

    lookup = {n: i for i, n in enumerate(names)}
    edges = set()
    for edge in raw_edges:
        if len(edge) != 2:
            raise SchemaError(f"edge {edge} must have two endpoints")
        a, b = edge
        if a not in lookup or b not in lookup:
            raise SchemaError(f"edge {edge} references an unknown ROI")
        if a == b:
            raise SchemaError(f"self-loop {edge} must not be listed; self-connections are implicit")
        key = tuple(sorted((lookup[a], lookup[b])))
        if key in edges:
            raise SchemaError(f"duplicate edge {edge} (edges are undirected; list each pair once)")
        edges.add(key)
    return RoiSchema(tuple(names), tuple(groups), tuple(sorted(edges)))


def normalized_propagation(adjacency, mode: str = "symmetric") -> np.ndarray:
    """Self-loop propagation matrix built from ``A + I``.

    ``symmetric``: D^-1/2 (A+I) D^-1/2 with D = diag(rowsum(A+I)).
    ``literal``:   D^-1/2 (A+I) D^+1/2, the non-symmetric form, kept for comparison.
    """
    A = np.asarray(adjacency, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    A_hat = A + np.eye(len(A))
    deg = A_hat.sum(axis=1)
    if mode == "symmetric":
        right = deg ** -0.5
    elif mode == "literal":
        right = deg ** 0.5
    else:
        raise ValueError(f"unknown Laplacian mode {mode!r}; choose from {LAPLACIAN_MODES}")
    return (deg ** -0.5)[:, None] * A_hat * right[None, :]


@dataclass(frozen=True)
class DualGraph:
    adjacency: tuple[np.ndarray, np.ndarray]
    degree: tuple[np.ndarray, np.ndarray]       # diagonal of rowsum(A + I)
    propagation: tuple[np.ndarray, np.ndarray]
    mode: str

    @property
    def L1(self) -> np.ndarray:
        return self.propagation[0]

    @property
    def L2(self) -> np.ndarray:
        return self.propagation[1]


def joint_adjacency(schema: RoiSchema) -> np.ndarray:
    A = np.zeros((schema.n, schema.n))
    for a, b in schema.g1_edges:
        A[a, b] = A[b, a] = 1.0
    return A


def group_adjacency(schema: RoiSchema) -> np.ndarray:
    g = np.array(schema.groups)
    A = (g[:, None] == g[None, :]).astype(np.float64)
    np.fill_diagonal(A, 0.0)
    return A


def build_graphs(schema: RoiSchema, mode: str = "symmetric") -> DualGraph:
    A1, A2 = joint_adjacency(schema), group_adjacency(schema)
    return DualGraph(
        adjacency=(A1, A2),
        degree=(A1.sum(axis=1) + 1.0, A2.sum(axis=1) + 1.0),
        propagation=(normalized_propagation(A1, mode), normalized_propagation(A2, mode)),
        mode=mode,
    )
