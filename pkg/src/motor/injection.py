"""Knowledge injection pipeline.

Order is fixed: graph knowledge is fused into the image features first;
the graph-fused feature drives report retrieval for triplet knowledge,
which is fused second. The label-alignment (MLC) objective reads the
graph-fused feature, the remaining objectives read the fully fused one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .model import Trunk
from .queues import FeatureQueue
from .tokenizer import Tokenizer
from .triplets import EntityLexicon, Triplet, TripletStore, extract_entities, linearize, query_triplets

VARIANTS = ("plain", "graph", "triplet", "both", "full")


@dataclass
class InjectionOutput:
    image_feats: torch.Tensor                 # [B, 1+n_patches, d] raw encoder output
    graph_fused: torch.Tensor                 # after graph cross-attention
    full_fused: torch.Tensor                  # after triplet cross-attention
    retrieved_ids: list[list[str]] = field(default_factory=list)
    triplets: list[list[Triplet]] = field(default_factory=list)
    triplet_token_ids: torch.Tensor | None = None   # [B, L_k] padded
    graph_attention: torch.Tensor | None = None     # [B, H, 1+n_patches, n_nodes]
    triplet_attention: torch.Tensor | None = None   # [B, H, 1+n_patches, L_k]


def inject_graph(trunk: Trunk, image_feats: torch.Tensor, graph_feats: torch.Tensor,
                 need_weights: bool = False):
    """Cross-attend image features (query) against graph features (key/value)."""
    kv = graph_feats.unsqueeze(0).expand(image_feats.shape[0], -1, -1)
    return trunk.graph_fuser(image_feats, kv, need_weights=need_weights)


def inject_triplets(trunk: Trunk, fused: torch.Tensor, triplet_token_ids: torch.Tensor,
                    need_weights: bool = False):
    """Encode linearized triplets and cross-attend the fused image features
    against them. An empty triplet list degenerates to a [CLS]-only kv."""
    kv = trunk.encode_triplet_tokens(triplet_token_ids)
    kv_valid = triplet_token_ids != trunk.pad_id
    return trunk.triplet_fuser(fused, kv, kv_padding_mask=kv_valid,
                               need_weights=need_weights)


def retrieve_reports(queue: FeatureQueue, query: torch.Tensor, k: int,
                     exclude_id: str | None = None) -> list[str]:
    """Top-k report ids from the queue by cosine similarity, optionally
    excluding the query image's own paired report."""
    ids, _ = queue.rank_all(query)
    if exclude_id is not None:
        ids = [i for i in ids if i != exclude_id]
    return ids[:k]


def gather_triplets(texts: list[str], lexicon: EntityLexicon, store: TripletStore,
                    cap: int) -> list[Triplet]:
    """Entities from each text in retrieval-rank order, concatenated, then
    one deduplicated store query."""
    entities: list[str] = []
    for text in texts:
        entities.extend(extract_entities(text, lexicon))
    return query_triplets(store, entities, cap)


def batch_triplet_tokens(per_image: list[list[Triplet]], tokenizer: Tokenizer,
                         max_len: int) -> torch.Tensor:
    """Linearize each image's triplets and pad to a common length."""
    seqs = [linearize(ts, tokenizer, max_len) for ts in per_image]
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), tokenizer.pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.tensor(s)
    return out


def knowledge_forward(
    trunk: Trunk,
    images: torch.Tensor,
    tokenizer: Tokenizer,
    *,
    variant: str = "full",
    graph_feats: torch.Tensor | None = None,
    queue: FeatureQueue | None = None,
    report_lookup=None,
    lexicon: EntityLexicon | None = None,
    store: TripletStore | None = None,
    k: int = 3,
    cap: int = 32,
    max_triplet_len: int = 90,
    exclude_ids: list[str] | None = None,
    allow_retrieval: bool = True,
    fixed_triplet_tokens: torch.Tensor | None = None,
    need_weights: bool = False,
) -> InjectionOutput:
    """Run the full injection pipeline for a batch of images.

    `fixed_triplet_tokens` bypasses retrieval with caller-provided token
    sequences (used by the momentum pass to re-encode the online pass's
    knowledge). Retrieval is skipped while the queue holds fewer than `k`
    entries or `allow_retrieval` is False; injection then degenerates to
    the empty-triplet case.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    use_graph = variant in ("graph", "both", "full")
    use_triplets = variant in ("triplet", "both", "full")
    B = images.shape[0]

    image_feats = trunk.encode_image(images)
    out = InjectionOutput(image_feats=image_feats, graph_fused=image_feats,
                          full_fused=image_feats,
                          retrieved_ids=[[] for _ in range(B)],
                          triplets=[[] for _ in range(B)])

    if use_graph:
        if graph_feats is None:
            graph_feats = trunk.encode_graph()
        out.graph_fused, out.graph_attention = inject_graph(
            trunk, image_feats, graph_feats, need_weights)
        out.full_fused = out.graph_fused

    if not use_triplets:
        return out

    if fixed_triplet_tokens is not None:
        out.triplet_token_ids = fixed_triplet_tokens
    else:
        per_image: list[list[Triplet]] = [[] for _ in range(B)]
        can_retrieve = (allow_retrieval and queue is not None and len(queue) >= k
                        and report_lookup is not None and lexicon is not None
                        and store is not None)
        if can_retrieve:
            query_vecs = trunk.project(out.graph_fused[:, 0], "image").detach()
            for i in range(B):
                exclude = exclude_ids[i] if exclude_ids else None
                ids = retrieve_reports(queue, query_vecs[i], k, exclude)
                out.retrieved_ids[i] = ids
                texts = [report_lookup[r] for r in ids]
                per_image[i] = gather_triplets(texts, lexicon, store, cap)
        out.triplets = per_image
        out.triplet_token_ids = batch_triplet_tokens(per_image, tokenizer, max_triplet_len)

    out.full_fused, out.triplet_attention = inject_triplets(
        trunk, out.graph_fused, out.triplet_token_ids, need_weights)
    return out


def mlc_scores(trunk: Trunk, graph_fused: torch.Tensor, label_feats: torch.Tensor,
               normalized: bool = True) -> torch.Tensor:
    """Per-label similarity between the graph-fused image feature and the
    textual label features. Unit-norm projections by default, raw [CLS]
    features otherwise."""
    if normalized:
        img = trunk.project(graph_fused[:, 0], "image")
    else:
        img = graph_fused[:, 0]
    return img @ label_feats.t()                                    # [B, n_labels]


def mlc_loss(scores: torch.Tensor, labels: torch.Tensor, tau) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid(score/tau) against 0/1 labels."""
    return F.binary_cross_entropy_with_logits(scores / tau, labels.to(scores.dtype))
