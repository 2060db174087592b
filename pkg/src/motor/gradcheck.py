"""Finite-difference verification of every objective's analytic gradients.

A micro model (d=8, 1 layer, batch 2, queue 2) is run in float64. Each
loss is a deterministic closure over the model parameters: retrieval
results, matching negatives, and all inputs are frozen, so the only thing
that varies between evaluations is the perturbed parameter. Central
differences on sampled coordinates of every parameter tensor are compared
against autograd at a relative tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .corpus import LABEL_NAMES
from .graph import KnowledgeGraph, build_adjacency, parse_graph_lines, validate_nodes
from .injection import batch_triplet_tokens, knowledge_forward, mlc_loss, mlc_scores
from .model import MotorModel
from .objectives import (LossWeights, itc_loss, itc_similarities, itc_targets,
                         itm_loss, lm_loss, sample_match_negatives, total_loss)
from .tokenizer import Tokenizer
from .train import label_token_ids
from .triplets import Triplet

TINY_GRAPH_LINES = [
    "root\tnormal\t-",
    "organ\tlung\t-",
    "organ\tpleural\t-",
    "finding\tpneumonia\tlung",
    "finding\tedema\tlung",
    "finding\teffusion\tpleural",
]

FIXTURE_REPORTS = [
    "there is a small effusion seen at the pleural base",
    "pneumonia with edema in the lung is present",
]

FIXTURE_TRIPLETS = [
    [Triplet("effusion", "located at", "pleural")],
    [Triplet("pneumonia", "suggestive of", "effusion"),
     Triplet("edema", "located at", "lung")],
]


def tiny_graph() -> KnowledgeGraph:
    nodes = parse_graph_lines(TINY_GRAPH_LINES)
    validate_nodes(nodes, schema=None)
    return KnowledgeGraph(nodes=tuple(nodes), adjacency=build_adjacency(nodes))


def tiny_config() -> RunConfig:
    return RunConfig(
        d_model=8, n_layers=1, n_heads=2, ffn_mult=2, image_size=16, patch_size=8,
        proj_dim=4, max_text_len=12, batch_size=2, itc_queue_size=2,
        report_queue_size=4, steps=1, warmup_steps=0).validate()


@dataclass
class GradFixture:
    model: MotorModel
    tokenizer: Tokenizer
    losses: dict = field(default_factory=dict)


def build_fixture(seed: int = 0) -> GradFixture:
    """Micro model in float64 with frozen inputs and one closure per loss."""
    torch.manual_seed(seed)
    cfg = tiny_config()
    graph = tiny_graph()
    extra = list(graph.names) + list(LABEL_NAMES)
    extra += [w for ts in FIXTURE_TRIPLETS for t in ts for w in t.words()]
    tokenizer = Tokenizer.build(FIXTURE_REPORTS, extra_words=extra,
                                max_text_len=cfg.max_text_len)
    model = MotorModel(cfg.dims(), tokenizer, graph,
                       label_token_ids(tokenizer, LABEL_NAMES)).double()

    gen = torch.Generator().manual_seed(seed + 1)
    B, M, p = 2, 2, cfg.proj_dim
    images = torch.rand(B, cfg.image_size, cfg.image_size,
                        generator=gen, dtype=torch.float64)
    cls_tokens = torch.tensor([tokenizer.encode(t, "encode_cls") for t in FIXTURE_REPORTS])
    match_tokens = torch.tensor([tokenizer.encode(t, "encode_match") for t in FIXTURE_REPORTS])
    decode_tokens = torch.tensor([tokenizer.encode(t, "decode") for t in FIXTURE_REPORTS])
    labels = (torch.rand(B, len(LABEL_NAMES), generator=gen) < 0.3).double()
    triplet_tokens = batch_triplet_tokens(FIXTURE_TRIPLETS, tokenizer,
                                          cfg.triplet_text_len)

    def unit(n):
        v = torch.randn(n, p, generator=gen, dtype=torch.float64)
        return v / v.norm(dim=1, keepdim=True)

    image_queue, text_queue = unit(M), unit(M)

    def fused():
        out = knowledge_forward(model.trunk, images, tokenizer, variant="full",
                                fixed_triplet_tokens=triplet_tokens)
        return out

    def candidates():
        with torch.no_grad():
            m_out = knowledge_forward(model.momentum_trunk, images, tokenizer,
                                      variant="full", fixed_triplet_tokens=triplet_tokens)
            z_img_m = model.momentum_trunk.project(m_out.full_fused[:, 0], "image")
            m_text = model.momentum_trunk.encode_report(cls_tokens)
            z_txt_m = model.momentum_trunk.project(m_text[:, 0], "text")
        return (torch.cat([z_img_m, image_queue]), torch.cat([z_txt_m, text_queue]))

    image_cands, text_cands = candidates()

    def loss_itc():
        out = fused()
        z_img = model.trunk.project(out.full_fused[:, 0], "image")
        text_feats = model.trunk.encode_report(cls_tokens)
        z_txt = model.trunk.project(text_feats[:, 0], "text")
        f_i2t, f_t2i = itc_similarities(z_img, z_txt, image_cands, text_cands,
                                        model.itc_tau)
        return itc_loss(f_i2t, f_t2i, itc_targets(B, B + M).double(),
                        itc_targets(B, B + M).double())

    with torch.no_grad():
        z0_img = model.trunk.project(fused().full_fused[:, 0], "image")
        z0_txt = model.trunk.project(model.trunk.encode_report(cls_tokens)[:, 0], "text")
        f0_i2t, f0_t2i = itc_similarities(z0_img, z0_txt, image_cands, text_cands,
                                          model.itc_tau)
        neg_text, neg_image = sample_match_negatives(
            f0_i2t, f0_t2i, generator=torch.Generator().manual_seed(seed + 2))

    def loss_itm():
        out = fused()
        return itm_loss(model, match_tokens, out.full_fused, neg_text, neg_image)

    def loss_lm():
        out = fused()
        return lm_loss(model.decoder, decode_tokens, out.full_fused,
                       tokenizer.pad_id, label_smoothing=0.1)

    def loss_mlc():
        out = fused()
        label_feats = model.encode_labels(normalized=True)
        scores = mlc_scores(model.trunk, out.graph_fused, label_feats, normalized=True)
        return mlc_loss(scores, labels, model.mlc_tau)

    def loss_total():
        return total_loss(loss_itc(), loss_itm(), loss_lm(), loss_mlc(), LossWeights())

    return GradFixture(model=model, tokenizer=tokenizer, losses={
        "itc": loss_itc, "itm": loss_itm, "lm": loss_lm, "mlc": loss_mlc,
        "total": loss_total})


@dataclass
class GradCheckRow:
    loss: str
    param: str
    coord: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tolerance: float
    rows: list[GradCheckRow]

    @property
    def worst(self) -> GradCheckRow:
        return max(self.rows, key=lambda r: r.rel_err)

    @property
    def passed(self) -> bool:
        return all(r.rel_err <= self.tolerance for r in self.rows)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def run_gradcheck(seed: int = 0, samples_per_tensor: int = 4, h: float = 1e-5,
                  tolerance: float = 1e-4,
                  losses: tuple[str, ...] = ("itc", "itm", "lm", "mlc", "total")
                  ) -> GradCheckReport:
    """Compare autograd against central differences on every trainable
    parameter tensor, at `samples_per_tensor` coordinates each."""
    fixture = build_fixture(seed)
    params = {name: p for name, p in fixture.model.named_parameters() if p.requires_grad}
    coord_rng = np.random.default_rng(seed)
    rows: list[GradCheckRow] = []
    for loss_name in losses:
        fn = fixture.losses[loss_name]
        loss = fn()
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        analytic = {name: (g if g is not None else torch.zeros_like(p))
                    for (name, p), g in zip(params.items(), grads)}
        for name, p in params.items():
            n_coords = min(samples_per_tensor, p.numel())
            coords = coord_rng.choice(p.numel(), size=n_coords, replace=False)
            flat = p.data.view(-1)
            for c in coords:
                c = int(c)
                old = flat[c].item()
                step = h * max(1.0, abs(old))
                with torch.no_grad():
                    flat[c] = old + step
                    plus = fn().item()
                    flat[c] = old - step
                    minus = fn().item()
                    flat[c] = old
                numeric = (plus - minus) / (2.0 * step)
                a = analytic[name].view(-1)[c].item()
                rows.append(GradCheckRow(loss=loss_name, param=name, coord=c,
                                         analytic=a, numeric=numeric,
                                         rel_err=relative_error(a, numeric)))
    return GradCheckReport(tolerance=tolerance, rows=rows)
