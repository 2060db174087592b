"""Task adaptation of the pretrained model: image-report retrieval, report
generation, diagnosis classification, and visual question answering, plus
the attention-matrix export used to inspect the knowledge pipeline."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import capture_rng, load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import Corpus, CorpusRecord, VqaRecord
from .injection import InjectionOutput, knowledge_forward
from .metrics import auroc, bleu4, cider_d, f1_suite, recall_at_k, rouge_l
from .model import MotorModel
from .objectives import (LossWeights, itc_loss, itc_similarities, itc_targets,
                         itm_loss, lm_loss, sample_match_negatives)
from .queues import FeatureQueue, momentum_update
from .tokenizer import Tokenizer
from .train import (build_model, images_to_tensor, label_token_ids, load_graph_for,
                    reports_to_tokens)

EVAL_BATCH = 32


# ---------------------------------------------------------------------------
# pipeline bundle

@dataclass
class Pipeline:
    """A loaded model plus everything its injection pipeline reads."""
    cfg: RunConfig
    tokenizer: Tokenizer
    model: MotorModel
    report_queue: FeatureQueue
    itc_image_queue: FeatureQueue
    itc_text_queue: FeatureQueue
    lexicon: object
    store: object
    report_lookup: dict[str, str]

    @classmethod
    def from_checkpoint(cls, path: str | Path, corpus: Corpus) -> tuple["Pipeline", dict]:
        payload = load_checkpoint(path)
        cfg = RunConfig(**payload["config"]).validate()
        tokenizer = Tokenizer(payload["vocab"], cfg.max_text_len)
        graph = load_graph_for(cfg)
        model = build_model(cfg, tokenizer, graph)
        model.load_state_dict(payload["model"])
        queues = payload["queues"]
        pipe = cls(
            cfg=cfg, tokenizer=tokenizer, model=model,
            report_queue=FeatureQueue.from_state_dict(queues["report"]),
            itc_image_queue=FeatureQueue.from_state_dict(queues["itc_image"]),
            itc_text_queue=FeatureQueue.from_state_dict(queues["itc_text"]),
            lexicon=corpus.load_lexicon(), store=corpus.load_store(),
            report_lookup=corpus.report_lookup)
        return pipe, payload

    def inject(self, images: torch.Tensor, exclude_ids=None,
               need_weights: bool = False, variant: str | None = None) -> InjectionOutput:
        return knowledge_forward(
            self.model.trunk, images, self.tokenizer,
            variant=self.cfg.variant if variant is None else variant,
            queue=self.report_queue, report_lookup=self.report_lookup,
            lexicon=self.lexicon, store=self.store, k=self.cfg.k_retrieve,
            cap=self.cfg.triplet_cap, max_triplet_len=self.cfg.triplet_text_len,
            exclude_ids=exclude_ids, need_weights=need_weights)

    def queue_states(self) -> dict:
        return {"itc_image": self.itc_image_queue.state_dict(),
                "itc_text": self.itc_text_queue.state_dict(),
                "report": self.report_queue.state_dict()}

    def save(self, path: str | Path, kind: str, extra: dict | None = None) -> None:
        save_checkpoint(path, kind=kind, config=self.cfg.to_dict(),
                        vocab=list(self.tokenizer.vocab),
                        model_state=self.model.state_dict(),
                        queues=self.queue_states(), rng_state=capture_rng(),
                        extra=extra or {})


# ---------------------------------------------------------------------------
# retrieval

@dataclass
class RetrievalIndex:
    image_proj: torch.Tensor   # [N, p] unit rows
    text_proj: torch.Tensor    # [N, p] unit rows
    ids: list[str]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        for side in (self.image_proj, self.text_proj):
            if side.shape[0] and (side.norm(dim=1) - 1).abs().max() > 1e-4:
                raise ValueError("index rows must be unit-norm")


@torch.no_grad()
def build_index(pipe: Pipeline, corpus: Corpus, records: list[CorpusRecord]
                ) -> tuple[RetrievalIndex, torch.Tensor]:
    """Projected gallery features plus the fused image features (kept for
    match-head reranking)."""
    pipe.model.eval()
    img_chunks, txt_chunks, fused_chunks = [], [], []
    for i in range(0, len(records), EVAL_BATCH):
        chunk = records[i:i + EVAL_BATCH]
        images = images_to_tensor(corpus, chunk)
        out = pipe.inject(images)
        img_chunks.append(pipe.model.trunk.project(out.full_fused[:, 0], "image"))
        fused_chunks.append(out.full_fused)
        tokens = reports_to_tokens(pipe.tokenizer, chunk, "encode_cls")
        feats = pipe.model.trunk.encode_report(tokens)
        txt_chunks.append(pipe.model.trunk.project(feats[:, 0], "text"))
    index = RetrievalIndex(image_proj=torch.cat(img_chunks),
                           text_proj=torch.cat(txt_chunks),
                           ids=[r.id for r in records])
    return index, torch.cat(fused_chunks)


def rank_gallery(query_proj: torch.Tensor, index: RetrievalIndex, direction: str,
                 rerank_top_m: int | None = None, match_prob_fn=None) -> list[str]:
    """Gallery ids by descending cosine similarity; optionally the top m are
    re-scored by the match head and stably re-sorted."""
    if direction == "i2t":
        gallery = index.text_proj
    elif direction == "t2i":
        gallery = index.image_proj
    else:
        raise ValueError(f"direction must be i2t or t2i, got {direction!r}")
    sims = (gallery @ query_proj).numpy()
    order = np.argsort(-sims, kind="stable")
    ids = [index.ids[i] for i in order]
    if rerank_top_m and match_prob_fn is not None:
        m = min(rerank_top_m, len(ids))
        top = ids[:m]
        probs = match_prob_fn(top)
        resorted = sorted(range(m), key=lambda i: -probs[i])
        ids = [top[i] for i in resorted] + ids[m:]
    return ids


@torch.no_grad()
def match_probabilities(model: MotorModel, match_tokens: torch.Tensor,
                        image_feats: torch.Tensor) -> torch.Tensor:
    """P(match) from the two-class match head."""
    logits = model.match_logits(match_tokens, image_feats)
    return logits.softmax(dim=-1)[:, 1]


@torch.no_grad()
def eval_retrieval(pipe: Pipeline, corpus: Corpus, split: str = "test",
                   rerank: bool = False, predictions_path=None) -> dict:
    """R@K both directions over the split gallery (reports-from-image = rr,
    images-from-report = ir)."""
    records = corpus.split(split)
    index, fused = build_index(pipe, corpus, records)
    pos = {r.id: i for i, r in enumerate(records)}
    match_tokens = reports_to_tokens(pipe.tokenizer, records, "encode_match")
    top_m = pipe.cfg.rerank_top_m if rerank else None
    rows = []
    rankings_i2t, rankings_t2i = {}, {}
    for i, rec in enumerate(records):
        fn_i2t = fn_t2i = None
        if top_m:
            def fn_i2t(cands, _i=i):
                toks = match_tokens[[pos[c] for c in cands]]
                feats = fused[_i].unsqueeze(0).expand(len(cands), -1, -1)
                return match_probabilities(pipe.model, toks, feats).tolist()

            def fn_t2i(cands, _i=i):
                toks = match_tokens[_i].unsqueeze(0).expand(len(cands), -1)
                feats = fused[[pos[c] for c in cands]]
                return match_probabilities(pipe.model, toks, feats).tolist()
        rankings_i2t[rec.id] = rank_gallery(index.image_proj[i], index, "i2t",
                                            top_m, fn_i2t)
        rankings_t2i[rec.id] = rank_gallery(index.text_proj[i], index, "t2i",
                                            top_m, fn_t2i)
        rows.append({"id": rec.id, "reports_from_image": rankings_i2t[rec.id][:10],
                     "images_from_report": rankings_t2i[rec.id][:10]})
    gt = {r.id: r.id for r in records}
    result = {"rr": recall_at_k(rankings_i2t, gt), "ir": recall_at_k(rankings_t2i, gt),
              "gallery_size": len(records)}
    if predictions_path:
        write_predictions(predictions_path, rows)
    return result


def finetune_retrieval(pipe: Pipeline, corpus: Corpus, steps: int | None = None,
                       seed: int = 0) -> list[dict]:
    """Contrastive + matching finetuning of the image and report encoders
    (with projection and match heads); the decoder and the knowledge
    encoders stay frozen."""
    cfg, model = pipe.cfg, pipe.model
    steps = cfg.finetune_steps if steps is None else steps
    model.requires_grad_(False)
    trainable = [model.trunk.image_encoder, model.trunk.report_encoder,
                 model.trunk.token_embed, model.trunk.proj_image,
                 model.trunk.proj_text, model.match_encoder, model.match_head]
    for mod in trainable:
        mod.requires_grad_(True)
    model.itc_tau_raw.requires_grad_(True)
    model.momentum_trunk.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr_retrieval, weight_decay=cfg.weight_decay)
    sampler = torch.Generator().manual_seed(seed)
    order = np.random.default_rng((seed, 3))
    records = corpus.split("train")
    history = []
    model.train()
    for step in range(steps):
        batch = [records[i] for i in order.choice(len(records), cfg.batch_size, replace=False)]
        images = images_to_tensor(corpus, batch)
        cls_tokens = reports_to_tokens(pipe.tokenizer, batch, "encode_cls")
        match_tokens = reports_to_tokens(pipe.tokenizer, batch, "encode_match")
        ids = [r.id for r in batch]
        momentum_update(model.trunk, model.momentum_trunk, cfg.momentum)
        out = pipe.inject(images, exclude_ids=ids if cfg.exclude_self_retrieval else None)
        text_feats = model.trunk.encode_report(cls_tokens)
        z_img = model.trunk.project(out.full_fused[:, 0], "image")
        z_txt = model.trunk.project(text_feats[:, 0], "text")
        with torch.no_grad():
            m_out = knowledge_forward(model.momentum_trunk, images, pipe.tokenizer,
                                      variant=cfg.variant,
                                      fixed_triplet_tokens=out.triplet_token_ids)
            z_img_m = model.momentum_trunk.project(m_out.full_fused[:, 0], "image")
            m_text = model.momentum_trunk.encode_report(cls_tokens)
            z_txt_m = model.momentum_trunk.project(m_text[:, 0], "text")
            image_q, _ = pipe.itc_image_queue.snapshot()
            text_q, _ = pipe.itc_text_queue.snapshot()
        image_cands = torch.cat([z_img_m, image_q])
        text_cands = torch.cat([z_txt_m, text_q])
        f_i2t, f_t2i = itc_similarities(z_img, z_txt, image_cands, text_cands,
                                        model.itc_tau)
        g_i2t = itc_targets(len(batch), text_cands.shape[0])
        g_t2i = itc_targets(len(batch), image_cands.shape[0])
        loss_itc = itc_loss(f_i2t, f_t2i, g_i2t, g_t2i)
        neg_t, neg_i = sample_match_negatives(f_i2t.detach(), f_t2i.detach(), sampler)
        loss_itm = itm_loss(model, match_tokens, out.full_fused, neg_t, neg_i)
        loss = loss_itc + cfg.weight_itm * loss_itm
        opt.zero_grad()
        loss.backward()
        opt.step()
        pipe.itc_image_queue.enqueue(z_img_m, ids)
        pipe.itc_text_queue.enqueue(z_txt_m, ids)
        pipe.report_queue.enqueue(z_txt_m, ids)
        history.append({"step": step + 1, "loss": loss.detach().item(),
                        "loss_itc": loss_itc.detach().item(),
                        "loss_itm": loss_itm.detach().item()})
    model.requires_grad_(True)
    model.momentum_trunk.requires_grad_(False)
    return history


# ---------------------------------------------------------------------------
# generation

def finetune_generation(pipe: Pipeline, corpus: Corpus, steps: int | None = None,
                        seed: int = 0) -> list[dict]:
    """Language-modeling finetuning of the image encoder and the decoder,
    still driven through the full injection pipeline."""
    cfg, model = pipe.cfg, pipe.model
    steps = cfg.finetune_steps if steps is None else steps
    model.requires_grad_(False)
    model.trunk.image_encoder.requires_grad_(True)
    model.decoder.requires_grad_(True)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr_generation, weight_decay=cfg.weight_decay)
    order = np.random.default_rng((seed, 4))
    records = corpus.split("train")
    history = []
    model.train()
    for step in range(steps):
        batch = [records[i] for i in order.choice(len(records), cfg.batch_size, replace=False)]
        images = images_to_tensor(corpus, batch)
        decode_tokens = reports_to_tokens(pipe.tokenizer, batch, "decode")
        ids = [r.id for r in batch]
        out = pipe.inject(images, exclude_ids=ids if cfg.exclude_self_retrieval else None)
        loss = lm_loss(model.decoder, decode_tokens, out.full_fused,
                       pipe.tokenizer.pad_id, cfg.label_smoothing)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss_lm": loss.detach().item()})
    model.requires_grad_(True)
    model.momentum_trunk.requires_grad_(False)
    return history


@torch.no_grad()
def generate_report(pipe: Pipeline, images: torch.Tensor,
                    beam_width: int | None = None) -> list[str]:
    pipe.model.eval()
    out = pipe.inject(images)
    width = pipe.cfg.beam_width if beam_width is None else beam_width
    seqs = pipe.model.greedy_decode(out.full_fused, pipe.tokenizer.bos_id,
                                    pipe.tokenizer.eos_id,
                                    max_len=pipe.cfg.gen_max_len, beam_width=width)
    return [pipe.tokenizer.decode(s) for s in seqs]


@torch.no_grad()
def eval_generation(pipe: Pipeline, corpus: Corpus, split: str = "test",
                    predictions_path=None) -> dict:
    records = corpus.split(split)
    candidates = []
    for i in range(0, len(records), EVAL_BATCH):
        chunk = records[i:i + EVAL_BATCH]
        candidates.extend(generate_report(pipe, images_to_tensor(corpus, chunk)))
    references = [[r.report] for r in records]
    result = {"bleu4": bleu4(candidates, references),
              "rouge_l": rouge_l(candidates, references),
              "cider_d": cider_d(candidates, references)}
    if predictions_path:
        write_predictions(predictions_path,
                          [{"id": r.id, "report": c} for r, c in zip(records, candidates)])
    return result


# ---------------------------------------------------------------------------
# diagnosis classification

class DiagnosisClassifier(nn.Module):
    """14 linear heads (one weight row per label) over the image encoder's
    class-token feature; optionally over the knowledge-fused feature."""

    def __init__(self, model: MotorModel, n_labels: int, on_fused: bool = False):
        super().__init__()
        self.model = model
        self.on_fused = on_fused
        self.heads = nn.Linear(model.dims.d_model, n_labels)

    def logits(self, images: torch.Tensor, pipe: Pipeline | None = None) -> torch.Tensor:
        if self.on_fused:
            if pipe is None:
                raise ValueError("fused classification needs the pipeline")
            feats = pipe.inject(images).full_fused[:, 0]
        else:
            feats = self.model.trunk.encode_image(images)[:, 0]
        return self.heads(feats)

    def probabilities(self, images: torch.Tensor, pipe: Pipeline | None = None) -> torch.Tensor:
        return torch.sigmoid(self.logits(images, pipe))

    def heads_state(self) -> dict:
        return {"heads": self.heads.state_dict(), "on_fused": self.on_fused}

    def load_heads_state(self, state: dict) -> None:
        self.heads.load_state_dict(state["heads"])
        self.on_fused = state["on_fused"]


def finetune_classification(pipe: Pipeline, corpus: Corpus, steps: int | None = None,
                            seed: int = 0) -> tuple[DiagnosisClassifier, list[dict]]:
    cfg = pipe.cfg
    steps = cfg.finetune_steps if steps is None else steps
    clf = DiagnosisClassifier(pipe.model, len(cfg.label_names), cfg.classify_on_fused)
    pipe.model.requires_grad_(False)
    pipe.model.trunk.image_encoder.requires_grad_(True)
    clf.heads.requires_grad_(True)
    params = [p for p in clf.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr_classification, weight_decay=cfg.weight_decay)
    order = np.random.default_rng((seed, 5))
    records = corpus.split("train")
    history = []
    clf.train()
    for step in range(steps):
        batch = [records[i] for i in order.choice(len(records), cfg.batch_size, replace=False)]
        images = images_to_tensor(corpus, batch)
        labels = torch.tensor([r.labels for r in batch], dtype=torch.float)
        loss = F.binary_cross_entropy_with_logits(clf.logits(images, pipe), labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss_bce": loss.detach().item()})
    pipe.model.requires_grad_(True)
    pipe.model.momentum_trunk.requires_grad_(False)
    return clf, history


@torch.no_grad()
def eval_classification(pipe: Pipeline, clf: DiagnosisClassifier, corpus: Corpus,
                        split: str = "test", predictions_path=None) -> dict:
    records = corpus.split(split)
    clf.eval()
    probs, labels, rows = [], [], []
    for i in range(0, len(records), EVAL_BATCH):
        chunk = records[i:i + EVAL_BATCH]
        p = clf.probabilities(images_to_tensor(corpus, chunk), pipe)
        probs.append(p)
        labels.extend(r.labels for r in chunk)
        rows.extend({"id": r.id, "probabilities": row.tolist()}
                    for r, row in zip(chunk, p))
    probs = torch.cat(probs).numpy()
    labels = np.array(labels)
    per_class, mean_auroc = auroc(probs, labels)
    result = {"auroc_mean": mean_auroc,
              "auroc_per_class": per_class.tolist(),
              **{k: v for k, v in f1_suite(probs, labels).items() if k != "per_class"}}
    if predictions_path:
        write_predictions(predictions_path, rows)
    return result


# ---------------------------------------------------------------------------
# visual question answering

class VqaModel(nn.Module):
    """Question-type router plus one cross-modal encoder and answer head per
    question type (open / closed), over disjoint answer vocabularies."""

    def __init__(self, model: MotorModel, open_vocab: list[str], closed_vocab: list[str]):
        super().__init__()
        if not open_vocab or not closed_vocab:
            raise ValueError("answer vocabularies must be nonempty")
        if set(open_vocab) & set(closed_vocab):
            raise ValueError("open/closed answer vocabularies must be disjoint")
        self.model = model
        self.open_vocab = list(open_vocab)
        self.closed_vocab = list(closed_vocab)
        self.type_head = nn.Linear(model.dims.d_model, 2)   # 0 = closed, 1 = open
        self.encoders = nn.ModuleDict({
            "open": copy.deepcopy(model.match_encoder),
            "closed": copy.deepcopy(model.match_encoder)})
        self.answer_heads = nn.ModuleDict({
            "open": nn.Linear(model.dims.d_model, len(open_vocab)),
            "closed": nn.Linear(model.dims.d_model, len(closed_vocab))})

    def vocab(self, qtype: str) -> list[str]:
        return self.open_vocab if qtype == "open" else self.closed_vocab

    def heads_state(self) -> dict:
        return {"type_head": self.type_head.state_dict(),
                "encoders": self.encoders.state_dict(),
                "answer_heads": self.answer_heads.state_dict(),
                "open_vocab": list(self.open_vocab),
                "closed_vocab": list(self.closed_vocab)}

    def load_heads_state(self, state: dict) -> None:
        if state["open_vocab"] != self.open_vocab or state["closed_vocab"] != self.closed_vocab:
            raise ValueError("checkpointed answer vocabularies do not match")
        self.type_head.load_state_dict(state["type_head"])
        self.encoders.load_state_dict(state["encoders"])
        self.answer_heads.load_state_dict(state["answer_heads"])

    def type_logits(self, question_tokens: torch.Tensor) -> torch.Tensor:
        feats = self.model.trunk.encode_report(question_tokens)
        return self.type_head(feats[:, 0])

    def answer_logits(self, question_tokens: torch.Tensor, image_feats: torch.Tensor,
                      qtype: str) -> torch.Tensor:
        trunk = self.model.trunk
        L = question_tokens.shape[1]
        x = trunk.token_embed(question_tokens) + trunk.report_encoder.pos_embed[:, :L]
        valid = question_tokens != self.model.pad_id
        fused, _ = self.encoders[qtype](x, image_feats, q_padding_mask=valid)
        return self.answer_heads[qtype](fused[:, 0])

    def answer(self, question_tokens: torch.Tensor, image_feats: torch.Tensor,
               force_type: str | None = None) -> list[str]:
        if force_type is None:
            p_open = self.type_logits(question_tokens).softmax(dim=-1)[:, 1]
            types = ["open" if p > 0.5 else "closed" for p in p_open]
        else:
            types = [force_type] * question_tokens.shape[0]
        out = []
        for i, qtype in enumerate(types):
            logits = self.answer_logits(question_tokens[i:i + 1], image_feats[i:i + 1], qtype)
            out.append(self.vocab(qtype)[int(logits.argmax())])
        return out


def _vqa_vocabs(records: list[VqaRecord]) -> tuple[list[str], list[str]]:
    open_vocab = sorted({r.answer for r in records if r.qtype == "open"})
    closed_vocab = sorted({r.answer for r in records if r.qtype == "closed"})
    return open_vocab, closed_vocab


def question_tokens(tokenizer: Tokenizer, questions: list[str]) -> torch.Tensor:
    return torch.tensor([tokenizer.encode(q, "encode_match") for q in questions],
                        dtype=torch.long)


def finetune_vqa(pipe: Pipeline, corpus: Corpus, steps: int | None = None,
                 seed: int = 0) -> tuple[VqaModel, list[dict]]:
    """Trains the type router and both answer branches; the image encoder
    and the two cross-modal encoders are finetuned, knowledge stays frozen."""
    cfg = pipe.cfg
    steps = cfg.finetune_steps if steps is None else steps
    train_records = [r for r in corpus.vqa_records() if r.split == "train"]
    if not train_records:
        raise ValueError("no train-split vqa records; run gen-corpus first")
    open_vocab, closed_vocab = _vqa_vocabs(train_records)
    vqa = VqaModel(pipe.model, open_vocab, closed_vocab)
    pipe.model.requires_grad_(False)
    pipe.model.trunk.image_encoder.requires_grad_(True)
    for mod in (vqa.type_head, vqa.encoders, vqa.answer_heads):
        mod.requires_grad_(True)
    params = [p for p in vqa.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr_vqa, weight_decay=cfg.weight_decay)
    order = np.random.default_rng((seed, 6))
    answer_idx = {"open": {a: i for i, a in enumerate(open_vocab)},
                  "closed": {a: i for i, a in enumerate(closed_vocab)}}
    history = []
    vqa.train()
    variant = pipe.cfg.variant if cfg.vqa_use_knowledge else "plain"
    for step in range(steps):
        batch = [train_records[i]
                 for i in order.choice(len(train_records), cfg.batch_size, replace=False)]
        images = images_to_tensor(corpus, [corpus.by_id[r.image_id] for r in batch])
        image_feats = pipe.inject(images, variant=variant).full_fused
        qtoks = question_tokens(pipe.tokenizer, [r.question for r in batch])
        type_targets = torch.tensor([1 if r.qtype == "open" else 0 for r in batch])
        loss = F.cross_entropy(vqa.type_logits(qtoks), type_targets)
        for qtype in ("open", "closed"):
            rows = [i for i, r in enumerate(batch) if r.qtype == qtype]
            if not rows:
                continue
            logits = vqa.answer_logits(qtoks[rows], image_feats[rows], qtype)
            targets = torch.tensor([answer_idx[qtype][batch[i].answer] for i in rows])
            loss = loss + F.cross_entropy(logits, targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss": loss.detach().item()})
    pipe.model.requires_grad_(True)
    pipe.model.momentum_trunk.requires_grad_(False)
    return vqa, history


@torch.no_grad()
def eval_vqa(pipe: Pipeline, vqa: VqaModel, corpus: Corpus, split: str = "test",
             predictions_path=None) -> dict:
    records = [r for r in corpus.vqa_records() if r.split == split]
    vqa.eval()
    variant = pipe.cfg.variant if pipe.cfg.vqa_use_knowledge else "plain"
    correct = {"open": 0, "closed": 0}
    total = {"open": 0, "closed": 0}
    rows = []
    for i in range(0, len(records), EVAL_BATCH):
        chunk = records[i:i + EVAL_BATCH]
        images = images_to_tensor(corpus, [corpus.by_id[r.image_id] for r in chunk])
        feats = pipe.inject(images, variant=variant).full_fused
        qtoks = question_tokens(pipe.tokenizer, [r.question for r in chunk])
        answers = vqa.answer(qtoks, feats)
        for rec, ans in zip(chunk, answers):
            total[rec.qtype] += 1
            correct[rec.qtype] += int(ans == rec.answer)
            rows.append({"id": rec.id, "answer": ans})
    result = {
        "open_accuracy": correct["open"] / total["open"] if total["open"] else float("nan"),
        "closed_accuracy": correct["closed"] / total["closed"] if total["closed"] else float("nan"),
        "overall_accuracy": (correct["open"] + correct["closed"]) / max(1, len(records)),
    }
    if predictions_path:
        write_predictions(predictions_path, rows)
    return result


# ---------------------------------------------------------------------------
# attention export and misc

@torch.no_grad()
def export_attention(pipe: Pipeline, corpus: Corpus, record_id: str,
                     out_dir: str | Path) -> dict[str, Path]:
    """Write the final-block cross-attention matrices (head-averaged,
    row-major, one query position per row) with key names as the header."""
    pipe.model.eval()
    rec = corpus.by_id[record_id]
    images = images_to_tensor(corpus, [rec])
    out = pipe.inject(images, need_weights=True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    def dump(name: str, attn: torch.Tensor, key_names: list[str]) -> None:
        path = out_dir / f"{record_id}_{name}.txt"
        mat = attn[0].mean(dim=0).numpy()   # head-averaged [Lq, Lk]
        lines = ["# rows: [cls] then image patches in row-major order",
                 "\t".join(key_names)]
        lines += ["\t".join(f"{v:.8f}" for v in row) for row in mat]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written[name] = path

    graph = load_graph_for(pipe.cfg)
    if out.graph_attention is not None:
        dump("graph_attention", out.graph_attention, graph.names)
    if out.triplet_attention is not None:
        token_names = [pipe.tokenizer.vocab[t] for t in out.triplet_token_ids[0].tolist()]
        dump("triplet_attention", out.triplet_attention, token_names)
    return written


def write_predictions(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
