"""Model assembly: image/text/graph/triplet encoders, cross-modal fusers,
report decoder, projection heads, and momentum copies.

The three text-side encoders (report, graph, triplet) share one token
embedding table but keep separate attention stacks by default; a config
flag ties them fully. Graph nodes are embedded as the mean of their name's
word embeddings plus a per-kind structure embedding, then encoded with the
graph adjacency as the self-attention visible mask.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .graph import KnowledgeGraph
from .layers import CrossBlock, EncoderBlock, causal_mask, trunc_normal_init
from .tokenizer import Tokenizer

NORM_EPS = 1e-12  # zero-vector guard in projection heads
TAU_MIN, TAU_MAX = 0.001, 0.5


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    image_size: int = 64
    patch_size: int = 8
    proj_dim: int = 32
    max_text_len: int = 64
    dropout: float = 0.0
    tie_knowledge_encoders: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class ImageEncoder(nn.Module):
    """ViT-style encoder: non-overlapping patches, class token, positions."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        d, p = dims.d_model, dims.patch_size
        self.patch_embed = nn.Linear(p * p, d)
        self.cls_token = nn.Parameter(nn.init.trunc_normal_(
            torch.empty(1, 1, d), std=0.02))
        self.pos_embed = nn.Parameter(nn.init.trunc_normal_(
            torch.empty(1, 1 + dims.n_patches, d), std=0.02))
        self.blocks = nn.ModuleList(
            EncoderBlock(d, dims.n_heads, dims.ffn_mult, dims.dropout)
            for _ in range(dims.n_layers))
        self.norm = nn.LayerNorm(d)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """[B,H,W] -> [B, n_patches, patch*patch], row-major patch order."""
        B, H, W = images.shape
        p = self.dims.patch_size
        x = images.reshape(B, H // p, p, W // p, p)
        return x.permute(0, 1, 3, 2, 4).reshape(B, -1, p * p)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != self.dims.image_size or images.shape[-2] != self.dims.image_size:
            raise ValueError(f"expected {self.dims.image_size}px square images, "
                             f"got {tuple(images.shape)}")
        x = self.patch_embed(self.patchify(images))                 # [B,N,d]
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)                                         # [B,1+N,d]


class TextEncoder(nn.Module):
    """Bidirectional self-attention encoder over a shared token embedding.

    `forward` embeds token ids (positions added, pad keys masked);
    `forward_embedded` runs the blocks on caller-provided vectors, which is
    how graph-node embeddings are encoded under their visible mask.
    """

    def __init__(self, dims: ModelDims, token_embed: nn.Embedding):
        super().__init__()
        self.token_embed = token_embed
        self.pos_embed = nn.Parameter(nn.init.trunc_normal_(
            torch.empty(1, dims.max_text_len, dims.d_model), std=0.02))
        self.blocks = nn.ModuleList(
            EncoderBlock(dims.d_model, dims.n_heads, dims.ffn_mult, dims.dropout)
            for _ in range(dims.n_layers))
        self.norm = nn.LayerNorm(dims.d_model)

    def forward_embedded(self, x: torch.Tensor, attn_mask=None,
                         key_padding_mask=None) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x, attn_mask, key_padding_mask)
        return self.norm(x)

    def forward(self, token_ids: torch.Tensor, visible_mask=None,
                pad_id: int = 0) -> torch.Tensor:
        L = token_ids.shape[1]
        if visible_mask is not None and visible_mask.shape[-2:] != (L, L):
            raise ValueError("visible mask must be (len, len)")
        x = self.token_embed(token_ids) + self.pos_embed[:, :L]
        valid = token_ids != pad_id
        return self.forward_embedded(x, visible_mask, valid)


class CrossModalEncoder(nn.Module):
    """Stacked blocks of self-attention over the query sequence plus
    cross-attention against a key/value sequence."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossBlock(dims.d_model, dims.n_heads, dims.ffn_mult, dims.dropout)
            for _ in range(dims.n_layers))
        self.norm = nn.LayerNorm(dims.d_model)

    def forward(self, query_seq, kv_seq, self_mask=None, q_padding_mask=None,
                kv_padding_mask=None, need_weights: bool = False):
        """Returns (features [B,Lq,d], last block's cross-attention or None)."""
        x, attn = query_seq, None
        for blk in self.blocks:
            want = need_weights and blk is self.blocks[-1]
            x, attn = blk(x, kv_seq, self_mask, q_padding_mask,
                          kv_padding_mask, need_weights=want)
        return self.norm(x), attn


class ReportDecoder(nn.Module):
    """Causally masked decoder cross-attending to image features."""

    def __init__(self, dims: ModelDims, vocab_size: int):
        super().__init__()
        self.token_embed = nn.Embedding(vocab_size, dims.d_model)
        self.pos_embed = nn.Parameter(nn.init.trunc_normal_(
            torch.empty(1, dims.max_text_len, dims.d_model), std=0.02))
        self.blocks = nn.ModuleList(
            CrossBlock(dims.d_model, dims.n_heads, dims.ffn_mult, dims.dropout)
            for _ in range(dims.n_layers))
        self.norm = nn.LayerNorm(dims.d_model)
        self.lm_head = nn.Linear(dims.d_model, vocab_size)

    def forward(self, prefix_ids: torch.Tensor, image_feats: torch.Tensor) -> torch.Tensor:
        """Next-token logits [B,L,V]; position i sees prefix[0..i] only."""
        L = prefix_ids.shape[1]
        x = self.token_embed(prefix_ids) + self.pos_embed[:, :L]
        mask = causal_mask(L).to(prefix_ids.device)
        for blk in self.blocks:
            x, _ = blk(x, image_feats, self_mask=mask)
        return self.lm_head(self.norm(x))


class ProjectionHead(nn.Module):
    """Linear map to the shared contrastive space, L2-normalized."""

    def __init__(self, d_model: int, proj_dim: int, bias: bool = True):
        super().__init__()
        self.linear = nn.Linear(d_model, proj_dim, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.linear(x)
        return z / (z.norm(dim=-1, keepdim=True) + NORM_EPS)


class Trunk(nn.Module):
    """Everything needed to produce contrastive candidate features; the
    momentum model is a deep copy of this module."""

    def __init__(self, dims: ModelDims, tokenizer: Tokenizer, graph: KnowledgeGraph):
        super().__init__()
        self.dims = dims
        self.pad_id = tokenizer.pad_id
        self.token_embed = nn.Embedding(tokenizer.vocab_size, dims.d_model)
        self.image_encoder = ImageEncoder(dims)
        self.report_encoder = TextEncoder(dims, self.token_embed)
        if dims.tie_knowledge_encoders:
            self.graph_encoder = self.report_encoder
            self.triplet_encoder = self.report_encoder
        else:
            self.graph_encoder = TextEncoder(dims, self.token_embed)
            self.triplet_encoder = TextEncoder(dims, self.token_embed)
        self.structure_embed = nn.Embedding(3, dims.d_model)  # root/organ/finding
        self.graph_fuser = CrossModalEncoder(dims)
        self.triplet_fuser = CrossModalEncoder(dims)
        self.proj_image = ProjectionHead(dims.d_model, dims.proj_dim)
        self.proj_text = ProjectionHead(dims.d_model, dims.proj_dim)
        self._register_graph(tokenizer, graph)

    def _register_graph(self, tokenizer: Tokenizer, graph: KnowledgeGraph) -> None:
        words_per_node = [n.name.split() for n in graph.nodes]
        width = max(len(w) for w in words_per_node)
        ids = torch.full((graph.n_nodes, width), tokenizer.pad_id, dtype=torch.long)
        counts = torch.zeros(graph.n_nodes, dtype=torch.long)
        for i, words in enumerate(words_per_node):
            wid = tokenizer.word_ids(words)
            ids[i, :len(wid)] = torch.tensor(wid)
            counts[i] = len(wid)
        kinds = torch.tensor([graph.kind_index(n) for n in graph.nodes])
        self.register_buffer("node_word_ids", ids)
        self.register_buffer("node_word_counts", counts)
        self.register_buffer("node_kinds", kinds)
        self.register_buffer("visible_mask", torch.from_numpy(graph.adjacency).bool())

    def embed_graph_nodes(self) -> torch.Tensor:
        """Node embedding = mean of name-word embeddings + kind embedding."""
        emb = self.token_embed(self.node_word_ids)                  # [n,w,d]
        mask = (torch.arange(emb.shape[1], device=emb.device)[None, :]
                < self.node_word_counts[:, None]).unsqueeze(-1)
        word_mean = (emb * mask).sum(1) / self.node_word_counts[:, None]
        return word_mean + self.structure_embed(self.node_kinds)    # [n,d]

    def encode_graph(self) -> torch.Tensor:
        """Graph features [n_nodes, d] under the adjacency visible mask."""
        x = self.embed_graph_nodes().unsqueeze(0)
        return self.graph_encoder.forward_embedded(x, attn_mask=self.visible_mask)[0]

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(images)

    def encode_report(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.report_encoder(token_ids, pad_id=self.pad_id)

    def encode_triplet_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.triplet_encoder(token_ids, pad_id=self.pad_id)

    def project(self, features_row0: torch.Tensor, head: str) -> torch.Tensor:
        if head == "image":
            return self.proj_image(features_row0)
        if head == "text":
            return self.proj_text(features_row0)
        raise ValueError(f"unknown projection head {head!r}")


class MotorModel(nn.Module):
    """Full pretraining model: online trunk, momentum trunk, report decoder,
    image-report match encoder, and the learnable temperatures."""

    def __init__(self, dims: ModelDims, tokenizer: Tokenizer, graph: KnowledgeGraph,
                 label_token_ids: torch.Tensor):
        super().__init__()
        self.dims = dims
        self.pad_id = tokenizer.pad_id
        self.vocab_size = tokenizer.vocab_size
        self.trunk = Trunk(dims, tokenizer, graph)
        self.decoder = ReportDecoder(dims, tokenizer.vocab_size)
        self.match_encoder = CrossModalEncoder(dims)
        self.match_head = nn.Linear(dims.d_model, 2)
        self.itc_tau_raw = nn.Parameter(torch.tensor(0.07))
        self.mlc_tau_raw = nn.Parameter(torch.tensor(0.07))
        self.register_buffer("label_token_ids", label_token_ids)   # [n_labels, L]
        trunc_normal_init(self)
        self.momentum_trunk = copy.deepcopy(self.trunk)
        self.momentum_trunk.requires_grad_(False)

    @property
    def itc_tau(self) -> torch.Tensor:
        return self.itc_tau_raw.clamp(TAU_MIN, TAU_MAX)

    @property
    def mlc_tau(self) -> torch.Tensor:
        return self.mlc_tau_raw.clamp(TAU_MIN, TAU_MAX)

    def match_logits(self, match_token_ids: torch.Tensor,
                     image_feats: torch.Tensor) -> torch.Tensor:
        """Two-class match logits for ([Encode]-led report tokens, image)."""
        L = match_token_ids.shape[1]
        x = (self.trunk.token_embed(match_token_ids)
             + self.trunk.report_encoder.pos_embed[:, :L])
        valid = match_token_ids != self.pad_id
        fused, _ = self.match_encoder(x, image_feats, q_padding_mask=valid)
        return self.match_head(fused[:, 0])

    def encode_labels(self, normalized: bool = True) -> torch.Tensor:
        """Projected [CLS] features of the textual label names, [n_labels, p]."""
        feats = self.trunk.encode_report(self.label_token_ids)
        if normalized:
            return self.trunk.project(feats[:, 0], "text")
        return feats[:, 0]

    @torch.no_grad()
    def greedy_decode(self, image_feats: torch.Tensor, bos_id: int, eos_id: int,
                      max_len: int, beam_width: int = 1) -> list[list[int]]:
        """Greedy (beam_width=1) or beam-search token generation per image."""
        if beam_width <= 1:
            return self._greedy(image_feats, bos_id, eos_id, max_len)
        return [self._beam(image_feats[i:i + 1], bos_id, eos_id, max_len, beam_width)
                for i in range(image_feats.shape[0])]

    def _greedy(self, image_feats, bos_id, eos_id, max_len):
        B = image_feats.shape[0]
        seqs = torch.full((B, 1), bos_id, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        for _ in range(max_len - 1):
            logits = self.decoder(seqs, image_feats)[:, -1]
            nxt = logits.argmax(dim=-1)
            nxt[done] = eos_id
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            done |= nxt == eos_id
            if done.all():
                break
        return [self._strip(row.tolist(), eos_id) for row in seqs]

    def _beam(self, image_feats, bos_id, eos_id, max_len, width):
        beams = [([bos_id], 0.0, False)]
        for _ in range(max_len - 1):
            if all(b[2] for b in beams):
                break
            candidates = []
            for tokens, score, done in beams:
                if done:
                    candidates.append((tokens, score, True))
                    continue
                logits = self.decoder(torch.tensor([tokens]), image_feats)[0, -1]
                logp = logits.log_softmax(dim=-1)
                top = torch.topk(logp, width)
                for lp, tid in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((tokens + [tid], score + lp, tid == eos_id))
            candidates.sort(key=lambda b: (-b[1], b[0]))
            beams = candidates[:width]
        return self._strip(beams[0][0], eos_id)

    @staticmethod
    def _strip(tokens: list[int], eos_id: int) -> list[int]:
        if eos_id in tokens:
            tokens = tokens[: tokens.index(eos_id) + 1]
        return tokens
