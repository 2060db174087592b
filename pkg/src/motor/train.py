"""Pretraining loop: assembles the model, queues, and objectives, and
drives deterministic single-process training with per-step CSV logging.

Step layout: momentum EMA update, online injection pass, momentum candidate
pass (re-encoding the online pass's retrieved knowledge), the four losses,
one optimizer step, then queue updates. Queues are snapshotted before the
loss, so enqueueing never affects the step that produced the features.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .checkpoint import capture_rng, save_checkpoint
from .config import RunConfig, echo_config
from .corpus import Corpus
from .graph import DEFAULT_SCHEMA, KnowledgeGraph, default_graph_path, load_graph
from .injection import knowledge_forward, mlc_loss, mlc_scores
from .model import MotorModel
from .objectives import (LossWeights, itc_loss, itc_similarities, itc_targets,
                         itm_loss, lm_loss, sample_match_negatives, total_loss)
from .queues import FeatureQueue, momentum_update
from .tokenizer import Tokenizer

LOG_COLUMNS = ("step", "loss", "loss_itc", "loss_itm", "loss_lm", "loss_mlc", "tau")

QUESTION_STEM_WORDS = ("is", "there", "which", "organ", "abnormal",
                       "what", "finding", "present", "yes", "no")


def load_graph_for(cfg: RunConfig) -> KnowledgeGraph:
    if cfg.graph_file:
        return load_graph(cfg.graph_file, schema=None)
    return load_graph(default_graph_path(), schema=dict(DEFAULT_SCHEMA))


def build_tokenizer(cfg: RunConfig, corpus: Corpus, graph: KnowledgeGraph) -> Tokenizer:
    """Deterministic vocabulary over reports, knowledge, labels, and the
    question stems."""
    store = corpus.load_store()
    extra = list(graph.names) + list(cfg.label_names) + list(QUESTION_STEM_WORDS)
    extra += [w for t in store.triplets for w in t.words()]
    extra += sorted(corpus.load_lexicon().entries)
    texts = [r.report for r in corpus.records]
    return Tokenizer.build(texts, extra_words=extra, max_text_len=cfg.max_text_len)


def label_token_ids(tokenizer: Tokenizer, label_names) -> torch.Tensor:
    width = 1 + max(len(name.split()) for name in label_names)
    rows = [tokenizer.encode(name, "encode_cls", length=width) for name in label_names]
    return torch.tensor(rows, dtype=torch.long)


def build_model(cfg: RunConfig, tokenizer: Tokenizer, graph: KnowledgeGraph) -> MotorModel:
    return MotorModel(cfg.dims(), tokenizer, graph,
                      label_token_ids(tokenizer, cfg.label_names))


def images_to_tensor(corpus: Corpus, records) -> torch.Tensor:
    arrs = [corpus.load_image(r) for r in records]
    return (torch.from_numpy(np.stack(arrs)) - 0.5) / 0.5


def reports_to_tokens(tokenizer: Tokenizer, records, mode: str) -> torch.Tensor:
    return torch.tensor([tokenizer.encode(r.report, mode) for r in records],
                        dtype=torch.long)


class Pretrainer:
    def __init__(self, cfg: RunConfig, corpus: Corpus, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.corpus = corpus
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.graph = load_graph_for(cfg)
        self.tokenizer = build_tokenizer(cfg, corpus, self.graph)
        self.model = build_model(cfg, self.tokenizer, self.graph)
        self.lexicon = corpus.load_lexicon()
        self.store = corpus.load_store()
        self.report_lookup = corpus.report_lookup
        self.train_records = corpus.split("train")
        if len(self.train_records) < cfg.batch_size:
            raise ValueError("train split smaller than one batch")
        p = cfg.proj_dim
        self.itc_image_queue = FeatureQueue(cfg.itc_queue_size, p)
        self.itc_text_queue = FeatureQueue(cfg.itc_queue_size, p)
        self.report_queue = FeatureQueue(cfg.report_queue_size, p)
        self.optimizer = torch.optim.AdamW(
            [q for q in self.model.parameters() if q.requires_grad],
            lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.weights = LossWeights(itm=cfg.weight_itm, lm=cfg.weight_lm, mlc=cfg.weight_mlc)
        self.sampler = torch.Generator().manual_seed(cfg.seed + 1)
        self.order_rng = np.random.default_rng((cfg.seed, 2))
        self.step = 0
        self._epoch_order: list[int] = []

    def _next_batch(self):
        batch = []
        while len(batch) < self.cfg.batch_size:
            if not self._epoch_order:
                self._epoch_order = list(self.order_rng.permutation(len(self.train_records)))
            batch.append(self.train_records[self._epoch_order.pop()])
        return batch

    def train_step(self, records) -> dict:
        cfg, model, tok = self.cfg, self.model, self.tokenizer
        model.train()
        images = images_to_tensor(self.corpus, records)
        cls_tokens = reports_to_tokens(tok, records, "encode_cls")
        match_tokens = reports_to_tokens(tok, records, "encode_match")
        decode_tokens = reports_to_tokens(tok, records, "decode")
        labels = torch.tensor([r.labels for r in records], dtype=torch.float)
        ids = [r.id for r in records]
        B = len(records)

        momentum_update(model.trunk, model.momentum_trunk, cfg.momentum)

        out = knowledge_forward(
            model.trunk, images, tok, variant=cfg.variant,
            queue=self.report_queue, report_lookup=self.report_lookup,
            lexicon=self.lexicon, store=self.store, k=cfg.k_retrieve,
            cap=cfg.triplet_cap, max_triplet_len=cfg.triplet_text_len,
            exclude_ids=ids if cfg.exclude_self_retrieval else None,
            allow_retrieval=self.step >= cfg.warmup_steps)
        text_feats = model.trunk.encode_report(cls_tokens)
        z_img = model.trunk.project(out.full_fused[:, 0], "image")
        z_txt = model.trunk.project(text_feats[:, 0], "text")

        with torch.no_grad():
            m_out = knowledge_forward(
                model.momentum_trunk, images, tok, variant=cfg.variant,
                fixed_triplet_tokens=out.triplet_token_ids)
            z_img_m = model.momentum_trunk.project(m_out.full_fused[:, 0], "image")
            m_text = model.momentum_trunk.encode_report(cls_tokens)
            z_txt_m = model.momentum_trunk.project(m_text[:, 0], "text")
            image_q, _ = self.itc_image_queue.snapshot()
            text_q, _ = self.itc_text_queue.snapshot()
        image_cands = torch.cat([z_img_m, image_q])
        text_cands = torch.cat([z_txt_m, text_q])

        tau = model.itc_tau
        f_i2t, f_t2i = itc_similarities(z_img, z_txt, image_cands, text_cands, tau)
        soft_i2t = soft_t2i = None
        if cfg.itc_soft_targets:
            with torch.no_grad():
                soft_i2t = ((z_img_m @ text_cands.t()) / tau).softmax(dim=-1)
                soft_t2i = ((z_txt_m @ image_cands.t()) / tau).softmax(dim=-1)
        g_i2t = itc_targets(B, text_cands.shape[0], soft_i2t)
        g_t2i = itc_targets(B, image_cands.shape[0], soft_t2i)
        loss_itc = itc_loss(f_i2t, f_t2i, g_i2t, g_t2i)

        neg_text, neg_image = sample_match_negatives(
            f_i2t.detach(), f_t2i.detach(), generator=self.sampler)
        loss_itm = itm_loss(model, match_tokens, out.full_fused, neg_text, neg_image)
        loss_lm = lm_loss(model.decoder, decode_tokens, out.full_fused,
                          tok.pad_id, cfg.label_smoothing)
        if cfg.variant == "full":
            label_feats = model.encode_labels(cfg.mlc_normalized)
            scores = mlc_scores(model.trunk, out.graph_fused, label_feats,
                                cfg.mlc_normalized)
            loss_mlc = mlc_loss(scores, labels, model.mlc_tau)
        else:
            loss_mlc = torch.zeros(())
        loss = total_loss(loss_itc, loss_itm, loss_lm, loss_mlc, self.weights)

        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()

        self.itc_image_queue.enqueue(z_img_m, ids)
        self.itc_text_queue.enqueue(z_txt_m, ids)
        self.report_queue.enqueue(z_txt_m, ids)
        self.step += 1
        return {
            "step": self.step,
            "loss": loss.detach().item(),
            "loss_itc": loss_itc.detach().item(),
            "loss_itm": loss_itm.detach().item(),
            "loss_lm": loss_lm.detach().item(),
            "loss_mlc": loss_mlc.detach().item(),
            "tau": tau.detach().item(),
        }

    def queue_states(self) -> dict:
        return {
            "itc_image": self.itc_image_queue.state_dict(),
            "itc_text": self.itc_text_queue.state_dict(),
            "report": self.report_queue.state_dict(),
        }

    def save(self, path: str | Path, kind: str = "pretrain") -> None:
        save_checkpoint(
            path, kind=kind, config=self.cfg.to_dict(), vocab=list(self.tokenizer.vocab),
            model_state=self.model.state_dict(), queues=self.queue_states(),
            optimizer_state=self.optimizer.state_dict(), rng_state=capture_rng(),
            extra={"step": self.step})

    def run(self, steps: int | None = None) -> list[dict]:
        """Train for `steps` (default: cfg.steps); returns the per-step log."""
        steps = self.cfg.steps if steps is None else steps
        writer = None
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            echo_config(self.cfg, self.out_dir / "config.toml")
            log_fh = (self.out_dir / "log.csv").open("w", newline="")
            writer = csv.DictWriter(log_fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
        history = []
        try:
            for _ in range(steps):
                row = self.train_step(self._next_batch())
                history.append(row)
                if writer is not None:
                    writer.writerow(row)
                    log_fh.flush()
                if (self.out_dir is not None and self.cfg.checkpoint_every > 0
                        and self.step % self.cfg.checkpoint_every == 0):
                    self.save(self.out_dir / f"ck_{self.step:06d}.pt")
            if self.out_dir is not None:
                self.save(self.out_dir / "ck_final.pt")
        finally:
            if log_fh is not None:
                log_fh.close()
        return history
