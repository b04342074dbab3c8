"""Organ/disease knowledge graph, multi-head graph attention, and prior fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, Projection, cross_attention, project
from .params import glorot, normal
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.2


class GraphError(ValueError):
    """Raised for malformed knowledge-graph input."""


@dataclass
class KnowledgeGraph:
    names: list[str]
    kinds: list[str]
    adjacency: np.ndarray  # G x G, {0,1}, symmetric, unit diagonal
    features: Tensor | None = field(default=None, repr=False)  # F_OD

    def __len__(self) -> int:
        return len(self.names)

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(a), int(b)) for a, b in zip(i, j)]

    def to_json(self) -> dict:
        return {
            "nodes": [{"name": n, "kind": k} for n, k in zip(self.names, self.kinds)],
            "edges": [list(e) for e in self.edges],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def validate_adjacency(adj) -> np.ndarray:
    """Check square / binary / symmetric and force self-loops."""
    a = np.asarray(adj)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {a.shape}")
    bad = np.argwhere((a != 0) & (a != 1))
    if bad.size:
        i, j = bad[0]
        raise GraphError(f"adjacency entry ({i}, {j}) = {a[i, j]!r} is not binary")
    asym = np.argwhere(a != a.T)
    if asym.size:
        i, j = asym[0]
        raise GraphError(f"adjacency entry ({i}, {j}) = {a[i, j]} differs from ({j}, {i}) = {a[j, i]}")
    a = a.astype(np.int64)
    np.fill_diagonal(a, 1)
    return a


def build_graph(names: Sequence[str], kinds: Sequence[str], edges: Sequence[Sequence[int]]) -> KnowledgeGraph:
    g = len(names)
    if g == 0:
        raise GraphError("knowledge graph has no nodes")
    if len(set(names)) != g:
        raise GraphError("duplicate node names")
    for k, kind in enumerate(kinds):
        if kind not in ("organ", "disease"):
            raise GraphError(f"node {k} has kind {kind!r}; expected 'organ' or 'disease'")
    adj = np.zeros((g, g), dtype=np.int64)
    for k, e in enumerate(edges):
        if len(e) != 2 or not all(isinstance(v, int) and 0 <= v < g for v in e):
            raise GraphError(f"edge {k} = {e!r} is not a pair of node indices in [0, {g})")
        i, j = e
        adj[i, j] = adj[j, i] = 1
    return KnowledgeGraph(list(names), list(kinds), validate_adjacency(adj))


def load_knowledge_graph(path, tokenizer=None, table: Tensor | None = None) -> KnowledgeGraph:
    """Read the JSON graph file; embeds node names when a tokenizer and table are given.

    An optional ``"adjacency"`` matrix may accompany (or replace) ``"edges"``;
    it is validated entry by entry.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        nodes = raw["nodes"]
        names = [n["name"] for n in nodes]
        kinds = [n["kind"] for n in nodes]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise GraphError(f"cannot read knowledge graph {path}: {exc}") from exc
    graph = build_graph(names, kinds, raw.get("edges", []))
    if "adjacency" in raw:
        adj = validate_adjacency(raw["adjacency"])
        if adj.shape != graph.adjacency.shape:
            raise GraphError(f"adjacency shape {adj.shape} does not match {len(names)} nodes")
        if raw.get("edges") and not np.array_equal(adj, graph.adjacency):
            raise GraphError("adjacency matrix disagrees with edge list")
        graph.adjacency = adj
    if tokenizer is not None and table is not None:
        from .encoders import embed_phrases

        graph.features = embed_phrases(graph.names, tokenizer, table)
    return graph


@dataclass
class GatParams:
    w: Tensor  # d x d, head h uses columns h*d_h:(h+1)*d_h
    a_src: Tensor  # H x d_h
    a_dst: Tensor  # H x d_h
    heads: int
    slope: float = LEAKY_SLOPE

    @classmethod
    def init(cls, rng, d: int, heads: int) -> "GatParams":
        if heads < 1 or d % heads:
            raise ValueError(f"graph width {d} is not divisible by {heads} heads")
        dh = d // heads
        return cls(glorot(rng, d, d), normal(rng, heads, dh, std=0.1), normal(rng, heads, dh, std=0.1), heads)


def gat_attention(features: Tensor, adjacency: np.ndarray, p: GatParams):
    """Per-head neighbourhood attention; returns (weights [H,G,G] tensor, projected [H,G,d_h])."""
    g, d = features.shape
    h = p.heads
    wh = T.permute(T.reshape(T.matmul(features, p.w), (g, h, d // h)), (1, 0, 2))
    src = T.sum_axis(T.mul(wh, T.reshape(p.a_src, (h, 1, d // h))), -1)
    dst = T.sum_axis(T.mul(wh, T.reshape(p.a_dst, (h, 1, d // h))), -1)
    e = T.leaky_relu(T.reshape(src, (h, g, 1)) + T.reshape(dst, (h, 1, g)), p.slope)
    bias = np.where(np.asarray(adjacency) > 0, 0.0, T.MASK_VALUE)
    return T.softmax_rows(e + bias), wh


def gat_forward(graph: KnowledgeGraph, p: GatParams, features: Tensor | None = None) -> Tensor:
    """One multi-head GAT layer over the graph's node features, heads concatenated, ELU output."""
    feats = graph.features if features is None else features
    if feats is None:
        raise ValueError("knowledge graph has no node features")
    if feats.shape[0] != len(graph):
        raise ShapeError(f"{feats.shape[0]} feature rows for {len(graph)} nodes")
    g, d = feats.shape
    weights, wh = gat_attention(feats, graph.adjacency, p)
    out = T.reshape(T.permute(T.matmul(weights, wh), (1, 0, 2)), (g, d))
    return T.elu(out)


@dataclass
class PriorFusionParams:
    attn: AttentionParams
    proj: Projection

    @classmethod
    def init(cls, rng, d: int, heads: int) -> "PriorFusionParams":
        return cls(AttentionParams.init(rng, d, heads), Projection.init(rng, d))


def prior_fuse(x_tilde_ii: Tensor, f_g: Tensor, x_lp: Tensor, p: PriorFusionParams) -> Tensor:
    """Graph features query the latent prompt; the projected result is stacked under X~_II."""
    if not (x_tilde_ii.shape[-1] == f_g.shape[-1] == x_lp.shape[-1]):
        raise ShapeError(f"widths disagree: {x_tilde_ii.shape}, {f_g.shape}, {x_lp.shape}")
    knowledge = project(cross_attention(f_g, x_lp, p.attn), p.proj)
    return T.concat([x_tilde_ii, knowledge], axis=-2)
