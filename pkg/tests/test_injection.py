import math

import pytest
import torch

from motor.gradcheck import tiny_graph
from motor.injection import (batch_triplet_tokens, gather_triplets, inject_graph,
                             inject_triplets, knowledge_forward, mlc_loss,
                             mlc_scores, retrieve_reports)
from motor.model import ModelDims, MotorModel
from motor.objectives import lm_loss
from motor.queues import FeatureQueue
from motor.tokenizer import Tokenizer
from motor.train import label_token_ids
from motor.triplets import EntityLexicon, Triplet, TripletStore

WORDS = ["normal", "lung", "pleural", "pneumonia", "edema", "effusion",
         "consolidation", "pneumothorax", "located", "suggestive", "of", "at",
         "there", "is", "seen", "with", "and", "clear", "study", "the"]
LABELS = ("edema", "effusion", "pneumonia")


def make_model(seed=0):
    torch.manual_seed(seed)
    tok = Tokenizer(WORDS, max_text_len=16)
    dims = ModelDims(d_model=8, n_layers=1, n_heads=2, ffn_mult=2, image_size=16,
                     patch_size=8, proj_dim=4, max_text_len=16)
    model = MotorModel(dims, tok, tiny_graph(), label_token_ids(tok, LABELS))
    model.eval()
    return model, tok


def test_inject_graph_attention_rows_sum_to_one():
    model, _ = make_model()
    images = torch.rand(2, 16, 16)
    feats = model.trunk.encode_image(images)
    gfeats = model.trunk.encode_graph()
    fused, attn = inject_graph(model.trunk, feats, gfeats, need_weights=True)
    assert fused.shape == feats.shape
    assert attn.shape[-1] == 6
    assert (attn.sum(dim=-1) - 1.0).abs().max().item() <= 1e-5


def test_inject_triplets_empty_is_cls_only_and_defined():
    model, tok = make_model()
    images = torch.rand(2, 16, 16)
    feats = model.trunk.encode_image(images)
    tokens = batch_triplet_tokens([[], []], tok, max_len=16)
    assert tokens.shape == (2, 1)
    assert (tokens == tok.cls_id).all()
    fused, attn = inject_triplets(model.trunk, feats, tokens, need_weights=True)
    assert torch.isfinite(fused).all()
    assert not torch.allclose(fused, feats)     # the cls-only cross branch acts
    assert (attn.sum(dim=-1) - 1.0).abs().max().item() <= 1e-5


def test_duplicate_triplets_dedup_gives_identical_output():
    model, tok = make_model()
    images = torch.rand(1, 16, 16)
    feats = model.trunk.encode_image(images)
    base = [Triplet("effusion", "located at", "pleural"),
            Triplet("pneumonia", "suggestive of", "effusion")]
    store_once = TripletStore.from_triplets(base)
    store_twice = TripletStore.from_triplets(base + base)
    lex = EntityLexicon.from_words(["effusion", "pneumonia"])
    texts = ["effusion and pneumonia seen"]
    t1 = gather_triplets(texts, lex, store_once, cap=8)
    t2 = gather_triplets(texts, lex, store_twice, cap=8)
    assert t1 == t2
    out1, _ = inject_triplets(model.trunk, feats,
                              batch_triplet_tokens([t1], tok, 16))
    out2, _ = inject_triplets(model.trunk, feats,
                              batch_triplet_tokens([t2], tok, 16))
    assert torch.equal(out1, out2)


def test_mlc_scores_self_orthogonal_and_bruteforce():
    model, _ = make_model()
    images = torch.rand(2, 16, 16)
    fused = model.trunk.encode_image(images)
    z = model.trunk.project(fused[:, 0], "image")
    label_feats = torch.stack([z[0], torch.zeros_like(z[0])])
    # make an orthogonal unit vector to z[0]
    v = torch.randn(4)
    v = v - (v @ z[0]) * z[0]
    label_feats[1] = v / v.norm()
    scores = mlc_scores(model.trunk, fused, label_feats)
    assert scores[0, 0].item() == pytest.approx(1.0, abs=1e-6)
    assert scores[0, 1].item() == pytest.approx(0.0, abs=1e-6)
    # brute-force dot product loop
    for b in range(2):
        for c in range(2):
            manual = sum(z[b, k].item() * label_feats[c, k].item() for k in range(4))
            assert scores[b, c].item() == pytest.approx(manual, abs=1e-6)


def test_mlc_loss_fixtures():
    tau = torch.tensor(0.07)
    scores = torch.zeros(3, 14)
    y = (torch.rand(3, 14) < 0.5).float()
    assert mlc_loss(scores, y, tau).item() == pytest.approx(math.log(2.0), abs=1e-6)
    confident = (y * 2 - 1) * 1e4
    assert mlc_loss(confident, y, tau).item() == pytest.approx(0.0, abs=1e-6)
    # random fixture against the scalar formula
    torch.manual_seed(1)
    s = torch.randn(2, 5)
    yy = (torch.rand(2, 5) < 0.5).float()
    manual = 0.0
    for b in range(2):
        for c in range(5):
            p = 1.0 / (1.0 + math.exp(-s[b, c].item() / 0.07))
            p = min(max(p, 1e-12), 1 - 1e-12)
            manual += -(yy[b, c].item() * math.log(p)
                        + (1 - yy[b, c].item()) * math.log(1 - p))
    manual /= 10.0
    assert mlc_loss(s, yy, tau).item() == pytest.approx(manual, abs=1e-5)


def test_retrieve_reports_self_first_and_exclusion():
    q = FeatureQueue(capacity=8, dim=4)
    g = torch.Generator().manual_seed(0)
    vecs = torch.randn(5, 4, generator=g)
    vecs = vecs / vecs.norm(dim=1, keepdim=True)
    q.enqueue(vecs, [f"r{i}" for i in range(5)])
    assert retrieve_reports(q, vecs[3], k=2)[0] == "r3"
    excluded = retrieve_reports(q, vecs[3], k=2, exclude_id="r3")
    assert "r3" not in excluded and len(excluded) == 2


def test_knowledge_forward_hand_trace_retrieval():
    """Two retrieved reports mentioning consolidation and effusion pull both
    store triplets, ordered by retrieval rank."""
    model, tok = make_model()
    store = TripletStore.from_triplets([
        Triplet("consolidation", "suggestive of", "pneumothorax"),
        Triplet("effusion", "located at", "pleural")])
    lex = EntityLexicon.from_words(["consolidation", "effusion"])
    lookup = {"a": "consolidation seen", "b": "effusion at the pleural", "c": "clear study"}
    queue = FeatureQueue(capacity=8, dim=4)
    images = torch.rand(1, 16, 16)
    with torch.no_grad():
        gf = model.trunk.encode_graph()
        feats = model.trunk.encode_image(images)
        fused, _ = inject_graph(model.trunk, feats, gf)
        qv = model.trunk.project(fused[:, 0], "image")
    # stock the queue so "a" is the best match, "b" second, "c" far away
    far = torch.randn(4)
    far = far - (far @ qv[0]) * qv[0]
    queue.enqueue(qv, ["a"])
    mid = 0.9 * qv[0] + 0.1 * far / far.norm()
    queue.enqueue((mid / mid.norm()).unsqueeze(0), ["b"])
    queue.enqueue((far / far.norm()).unsqueeze(0), ["c"])
    out = knowledge_forward(model.trunk, images, tok, variant="full",
                            queue=queue, report_lookup=lookup, lexicon=lex,
                            store=store, k=2, cap=8, max_triplet_len=16)
    assert out.retrieved_ids[0] == ["a", "b"]
    assert [t.head for t in out.triplets[0]] == ["consolidation", "effusion"]


def test_retrieval_skipped_until_queue_holds_k():
    model, tok = make_model()
    queue = FeatureQueue(capacity=8, dim=4)
    lex = EntityLexicon.from_words(["effusion"])
    store = TripletStore.from_triplets([Triplet("effusion", "located at", "pleural")])
    out = knowledge_forward(model.trunk, torch.rand(1, 16, 16), tok, variant="full",
                            queue=queue, report_lookup={}, lexicon=lex, store=store,
                            k=3, cap=8, max_triplet_len=16)
    assert out.retrieved_ids == [[]]
    assert out.triplet_token_ids.shape == (1, 1)


def test_pipeline_order_graph_feats_change_retrieval():
    """Retrieval queries the graph-fused feature, not the raw image feature,
    so changing the graph features must change what is retrieved."""
    model, tok = make_model(seed=3)
    lex = EntityLexicon.from_words(["effusion"])
    store = TripletStore.from_triplets([Triplet("effusion", "located at", "pleural")])
    images = torch.rand(1, 16, 16)
    corrupt_graph = torch.randn(6, 8, generator=torch.Generator().manual_seed(40))
    with torch.no_grad():
        feats = model.trunk.encode_image(images)
        q_normal = model.trunk.project(
            inject_graph(model.trunk, feats, model.trunk.encode_graph())[0][:, 0],
            "image")[0]
        q_corrupt = model.trunk.project(
            inject_graph(model.trunk, feats, corrupt_graph)[0][:, 0], "image")[0]
    assert not torch.allclose(q_normal, q_corrupt, atol=1e-4)
    # a queue holding exactly the two query directions: each run must
    # retrieve its own (self-similarity 1 beats any other unit vector)
    queue = FeatureQueue(capacity=4, dim=4)
    queue.enqueue(torch.stack([q_normal, q_corrupt]), ["n", "c"])
    lookup = {"n": "effusion seen", "c": "effusion seen"}
    normal = knowledge_forward(model.trunk, images, tok, variant="full",
                               queue=queue, report_lookup=lookup, lexicon=lex,
                               store=store, k=1, cap=4, max_triplet_len=16)
    corrupted = knowledge_forward(model.trunk, images, tok, variant="full",
                                  graph_feats=corrupt_graph, queue=queue,
                                  report_lookup=lookup, lexicon=lex,
                                  store=store, k=1, cap=4, max_triplet_len=16)
    assert normal.retrieved_ids == [["n"]]
    assert corrupted.retrieved_ids == [["c"]]


def test_variant_plain_passes_image_features_through():
    model, tok = make_model()
    images = torch.rand(2, 16, 16)
    out = knowledge_forward(model.trunk, images, tok, variant="plain")
    assert torch.equal(out.image_feats, out.full_fused)
    assert torch.equal(out.image_feats, out.graph_fused)
    assert out.triplets == [[], []]
    with pytest.raises(ValueError):
        knowledge_forward(model.trunk, images, tok, variant="nope")


def _loss_grads(model, loss, modules):
    params = [p for m in modules for p in m.parameters()]
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    total = 0.0
    for gr in grads:
        if gr is not None:
            total += gr.abs().sum().item()
    return total


def test_gradient_paths():
    """The label loss flows into the graph-injection parameters; the
    generation loss never touches the report/label encoder stack, and the
    label loss never touches the triplet-injection side."""
    model, tok = make_model(seed=1)
    model.train()
    images = torch.rand(2, 16, 16)
    triplets = [[Triplet("effusion", "located at", "pleural")], []]
    tokens = batch_triplet_tokens(triplets, tok, 16)
    out = knowledge_forward(model.trunk, images, tok, variant="full",
                            fixed_triplet_tokens=tokens)
    label_feats = model.encode_labels()
    loss_mlc = mlc_loss(mlc_scores(model.trunk, out.graph_fused, label_feats),
                        torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
                        model.mlc_tau)
    assert _loss_grads(model, loss_mlc, [model.trunk.graph_fuser]) > 0
    assert _loss_grads(model, loss_mlc, [model.trunk.triplet_fuser]) == 0
    assert _loss_grads(model, loss_mlc, [model.decoder]) == 0

    decode = torch.tensor([tok.encode("effusion is seen", "decode")] * 2)
    out2 = knowledge_forward(model.trunk, images, tok, variant="full",
                             fixed_triplet_tokens=tokens)
    loss_lm = lm_loss(model.decoder, decode, out2.full_fused, tok.pad_id)
    assert _loss_grads(model, loss_lm, [model.decoder]) > 0
    assert _loss_grads(model, loss_lm, [model.trunk.triplet_fuser]) > 0
    # report-encoder attention stack serves only the label/report/itc side
    assert _loss_grads(model, loss_lm,
                       [model.trunk.report_encoder.blocks, model.trunk.report_encoder.norm]) == 0
