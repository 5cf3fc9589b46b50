"""Lesion semantic graph, relation-aware attention layers and query generation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError
from .params import ParamStore
from .report import ReportDoc

RELATIONS = ("lesion-organ", "lesion-attribute", "intra-organ")
NODE_KINDS = ("lesion", "anatomical", "attribute")
NO_LOCATION = "-"


@dataclass(frozen=True)
class Node:
    node_id: int
    kind: str
    token: str


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation: str


@dataclass(frozen=True)
class SemanticGraph:
    nodes: tuple
    edges: tuple
    lesion_nodes: tuple  # node index of each lesion, in lesion order

    @property
    def n_nodes(self):
        return len(self.nodes)

    def edge_arrays(self):
        src = torch.tensor([e.src for e in self.edges], dtype=torch.long)
        dst = torch.tensor([e.dst for e in self.edges], dtype=torch.long)
        rel = torch.tensor([RELATIONS.index(e.relation) for e in self.edges], dtype=torch.long)
        return src, dst, rel

    def dump(self) -> str:
        lines = [f"node {n.node_id} {n.kind} {n.token}" for n in self.nodes]
        lines += [f"edge {e.src} {e.dst} {e.relation}" for e in self.edges]
        return "\n".join(lines) + "\n"


def size_bucket(volume_mm3):
    return f"size:1e{int(math.floor(math.log10(volume_mm3)))}"


def hu_bucket(hu, width=20):
    return f"hu:{int(math.floor(hu / width) * width)}"


def contrast_token(delta_hu):
    return "contrast:" + ("+" if delta_hu > 0 else "-" if delta_hu < 0 else "0")


def lesion_attribute_tokens(doc: ReportDoc, i: int):
    rec = doc.lesions[i]
    delta = rec.reported_mean_hu - doc.organ_table[rec.organ_id].background_mean_hu
    tokens = []
    if rec.sub_location != NO_LOCATION:
        tokens.append(f"loc:{rec.sub_location}")
    tokens += [size_bucket(rec.reported_volume_mm3), hu_bucket(rec.reported_mean_hu), contrast_token(delta)]
    return tokens


def organ_token(doc: ReportDoc, organ_id):
    return f"organ:{doc.organ_table[organ_id].name}"


def build_graph(doc: ReportDoc) -> SemanticGraph:
    """One lesion node per record, one anatomical node per referenced organ and
    one node per distinct attribute token; all edges point into lesion nodes."""
    n_les = doc.n_lesions
    organ_ids = sorted({r.organ_id for r in doc.lesions})
    attr_lists = [lesion_attribute_tokens(doc, i) for i in range(n_les)]
    attr_tokens = sorted({t for toks in attr_lists for t in toks})

    nodes = [Node(i, "lesion", "lesion") for i in range(n_les)]
    organ_node = {}
    for oid in organ_ids:
        organ_node[oid] = len(nodes)
        nodes.append(Node(len(nodes), "anatomical", organ_token(doc, oid)))
    attr_node = {}
    for tok in attr_tokens:
        attr_node[tok] = len(nodes)
        nodes.append(Node(len(nodes), "attribute", tok))

    edges = []
    for i, rec in enumerate(doc.lesions):
        edges.append(Edge(organ_node[rec.organ_id], i, "lesion-organ"))
        for tok in attr_lists[i]:
            edges.append(Edge(attr_node[tok], i, "lesion-attribute"))
    for i in range(n_les):
        for j in range(i + 1, n_les):
            if doc.lesions[i].organ_id == doc.lesions[j].organ_id:
                edges.append(Edge(i, j, "intra-organ"))
                edges.append(Edge(j, i, "intra-organ"))
    return SemanticGraph(tuple(nodes), tuple(edges), tuple(range(n_les)))


def fnv1a_64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def token_embedding(token: str, d: int, seed: int = 2026) -> np.ndarray:
    """Fixed Gaussian embedding of a token, scale 1/sqrt(d)."""
    h = fnv1a_64(token)
    rng = np.random.default_rng([seed, h & 0xFFFFFFFF, h >> 32])
    return rng.standard_normal(d) / math.sqrt(d)


def init_embeddings(g: SemanticGraph, d: int, seed: int = 2026, dtype=torch.float64) -> torch.Tensor:
    if not g.nodes:
        return torch.zeros((0, d), dtype=dtype)
    rows = np.stack([token_embedding(n.token, d, seed) for n in g.nodes])
    return torch.as_tensor(rows, dtype=dtype)


def init_graph_params(store: ParamStore, rng, d=32, d_r=8, n_layers=2, n_queries=4, channels=8):
    """Add graph, QueryBank and query-projection weights to ``store``."""

    def dense(rows, cols, gain=1.0):
        return rng.standard_normal((rows, cols)) * gain / math.sqrt(cols)

    store.add("graph.relations", rng.standard_normal((len(RELATIONS), d_r)) / math.sqrt(d_r))
    for layer in range(1, n_layers + 1):
        p = f"graph.l{layer}."
        store.add(p + "wq", dense(d, d))
        store.add(p + "wk", dense(d, d))
        store.add(p + "wv", dense(d, d))
        store.add(p + "wr", dense(d, d_r))
        store.add(p + "ffn_w1", dense(2 * d, d))
        store.add(p + "ffn_b1", np.zeros(2 * d))
        store.add(p + "ffn_w2", dense(d, 2 * d, gain=0.5))
        store.add(p + "ffn_b2", np.zeros(d))
    store.add("qb.w1", dense(2 * d, d))
    store.add("qb.b1", np.zeros(2 * d))
    store.add("qb.w2", dense(n_queries * d, 2 * d))
    store.add("qb.b2", np.zeros(n_queries * d))
    store.add("qproj", dense(channels, d))
    return store


def graph_config(store):
    d = store["graph.l1.wq"].shape[0]
    d_r = store["graph.relations"].shape[1]
    n_layers = sum(1 for k in store if k.endswith(".wq") and k.startswith("graph."))
    n_queries = store["qb.w2"].shape[0] // d if "qb.w2" in store else 0
    return d, d_r, n_layers, n_queries


def ffn(h, p):
    """Residual feed-forward block."""
    return h + F.gelu(h @ p["ffn_w1"].T + p["ffn_b1"]) @ p["ffn_w2"].T + p["ffn_b2"]


def graph_layer(h, g: SemanticGraph, store, layer: int, return_attention=False):
    """One relation-aware attention layer over each node's in-neighbours.

    Scores are ``(Wq h_v) . (Wk h_u + Wr r_uv) / sqrt(d)``, normalised over the
    in-edges of ``v``; nodes without in-edges keep only the FFN path.
    """
    p = store.group(f"graph.l{layer}.")
    if not p:
        raise ShapeError(f"no parameters for graph layer {layer}")
    n, d = h.shape
    if p["wq"].shape != (d, d) or n != g.n_nodes:
        raise ShapeError(f"embedding shape {tuple(h.shape)} does not match layer/graph")
    out = ffn(h, p)
    if not g.edges:
        return (out, h.new_zeros(0)) if return_attention else out
    src, dst, rel = g.edge_arrays()
    rel_emb = store["graph.relations"][rel] @ p["wr"].T
    q = h @ p["wq"].T
    k = h @ p["wk"].T
    v = h @ p["wv"].T
    score = (q[dst] * (k[src] + rel_emb)).sum(dim=1) / math.sqrt(d)
    peak = torch.full((n,), -math.inf, dtype=h.dtype).scatter_reduce(0, dst, score.detach(), "amax")
    e = torch.exp(score - peak[dst])
    denom = h.new_zeros(n).index_add(0, dst, e)
    alpha = e / denom[dst]
    out = out + h.new_zeros(n, d).index_add(0, dst, alpha[:, None] * v[src])
    return (out, alpha) if return_attention else out


def encode_graph(g: SemanticGraph, store, seed=2026):
    d, _, n_layers, _ = graph_config(store)
    h = init_embeddings(g, d, seed, dtype=store["graph.l1.wq"].dtype)
    for layer in range(1, n_layers + 1):
        h = graph_layer(h, g, store, layer)
    return h


@dataclass
class LesionQuerySet:
    lesion_id: int
    z: torch.Tensor
    queries: torch.Tensor  # (M, d)


def querybank(z, store):
    d, _, _, m = graph_config(store)
    hidden = F.gelu(z @ store["qb.w1"].T + store["qb.b1"])
    return (hidden @ store["qb.w2"].T + store["qb.b2"]).reshape(*z.shape[:-1], m, d)


def lesion_queries(h_final, g: SemanticGraph, store):
    out = []
    for lesion_id, node in enumerate(g.lesion_nodes):
        z = h_final[node]
        out.append(LesionQuerySet(lesion_id, z, querybank(z, store)))
    return out


def direct_text_summary(doc: ReportDoc, i: int, d: int, seed=2026, dtype=torch.float64):
    """Graph-free lesion summary: mean embedding of the lesion's field tokens."""
    tokens = ["lesion", organ_token(doc, doc.lesions[i].organ_id)] + lesion_attribute_tokens(doc, i)
    return torch.as_tensor(np.mean([token_embedding(t, d, seed) for t in tokens], axis=0), dtype=dtype)
