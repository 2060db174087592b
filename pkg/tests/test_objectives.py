import math

import pytest
import torch

from motor.gradcheck import tiny_graph
from motor.model import ModelDims, MotorModel, ReportDecoder
from motor.objectives import (LossWeights, NumericsError, itc_loss,
                              itc_similarities, itc_targets, itm_loss, lm_loss,
                              sample_match_negatives, total_loss)
from motor.tokenizer import Tokenizer
from motor.train import label_token_ids


def unit(v):
    t = torch.tensor(v, dtype=torch.float)
    return t / t.norm(dim=-1, keepdim=True)


def test_itc_similarities_scalar_softmax():
    # B=1, M=1: query equals positive, orthogonal negative, tau=1
    img = unit([[1.0, 0.0]])
    txt_cands = torch.stack([unit([1.0, 0.0]), unit([0.0, 1.0])])
    f_i2t, _ = itc_similarities(img, img, txt_cands, txt_cands, tau=1.0)
    expect = math.exp(1.0) / (math.exp(1.0) + 1.0)
    assert f_i2t[0, 0].item() == pytest.approx(expect, abs=1e-4)
    assert f_i2t[0, 1].item() == pytest.approx(1 - expect, abs=1e-4)


def test_itc_rows_sum_to_one_and_uniform_limit():
    g = torch.Generator().manual_seed(0)
    img = torch.randn(3, 8, generator=g)
    img = img / img.norm(dim=1, keepdim=True)
    cands = torch.randn(7, 8, generator=g)
    cands = cands / cands.norm(dim=1, keepdim=True)
    f_i2t, f_t2i = itc_similarities(img, img, cands, cands, tau=0.07)
    assert (f_i2t.sum(dim=1) - 1.0).abs().max().item() <= 1e-6
    hot, _ = itc_similarities(img, img, cands, cands, tau=1e6)
    assert (hot - 1.0 / 7).abs().max().item() <= 1e-6


def test_itc_loss_perfect_and_uniform():
    perfect = torch.zeros(2, 4)
    perfect[0, 0] = perfect[1, 1] = 1.0
    g = itc_targets(2, 4)
    assert itc_loss(perfect, perfect, g, g).item() == pytest.approx(0.0, abs=1e-9)
    uniform = torch.full((2, 4), 0.25)
    assert itc_loss(uniform, uniform, g, g).item() == pytest.approx(math.log(4.0), abs=1e-6)


def test_itc_loss_matches_bruteforce_double_sum():
    torch.manual_seed(0)
    B, M = 2, 2
    f_i2t = torch.rand(B, B + M).softmax(dim=1)
    f_t2i = torch.rand(B, B + M).softmax(dim=1)
    g = itc_targets(B, B + M)
    got = itc_loss(f_i2t, f_t2i, g, g).item()
    manual = 0.0
    for b in range(B):
        for c in range(B + M):
            if g[b, c] > 0:
                manual += -g[b, c].item() * (math.log(f_i2t[b, c].item())
                                             + math.log(f_t2i[b, c].item()))
    manual /= 2 * B
    assert got == pytest.approx(manual, abs=1e-6)


def test_itc_loss_symmetric_in_directions():
    torch.manual_seed(1)
    f_a = torch.rand(3, 5).softmax(dim=1)
    f_b = torch.rand(3, 5).softmax(dim=1)
    g = itc_targets(3, 5)
    assert itc_loss(f_a, f_b, g, g).item() == pytest.approx(
        itc_loss(f_b, f_a, g, g).item(), abs=1e-7)


def test_itc_soft_targets_blend():
    soft = torch.full((2, 4), 0.25)
    g = itc_targets(2, 4, soft=soft, soft_weight=0.4)
    assert g[0, 0].item() == pytest.approx(0.6 + 0.4 * 0.25)
    assert g[0, 1].item() == pytest.approx(0.4 * 0.25)
    assert g.sum(dim=1).allclose(torch.ones(2))


WORDS = ["edema", "effusion", "is", "seen", "there", "clear", "lung", "normal",
         "pleural", "pneumonia"]
LABELS = ("edema", "effusion", "pneumonia")


def make_model(seed=0):
    torch.manual_seed(seed)
    tok = Tokenizer(WORDS, max_text_len=10)
    dims = ModelDims(d_model=8, n_layers=1, n_heads=2, ffn_mult=2, image_size=16,
                     patch_size=8, proj_dim=4, max_text_len=10)
    return MotorModel(dims, tok, tiny_graph(), label_token_ids(tok, LABELS)), tok


def test_itm_uniform_head_gives_ln2():
    model, tok = make_model()
    with torch.no_grad():
        model.match_head.weight.zero_()
        model.match_head.bias.zero_()
    tokens = torch.tensor([tok.encode("edema is seen", "encode_match")] * 2)
    feats = torch.randn(2, 5, 8)
    neg = torch.tensor([1, 0])
    loss = itm_loss(model, tokens, feats, neg, neg)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_itm_matches_six_term_enumeration():
    model, tok = make_model(seed=2)
    tokens = torch.tensor([tok.encode("edema is seen", "encode_match"),
                           tok.encode("effusion there", "encode_match")])
    feats = torch.randn(2, 5, 8)
    neg_text = torch.tensor([1, 0])
    neg_image = torch.tensor([1, 0])
    got = itm_loss(model, tokens, feats, neg_text, neg_image).item()
    with torch.no_grad():
        manual_terms = []
        # positives
        for i in range(2):
            logits = model.match_logits(tokens[i:i + 1], feats[i:i + 1])
            manual_terms.append(-logits.log_softmax(-1)[0, 1].item())
        # image with mismatched text
        for i in range(2):
            logits = model.match_logits(tokens[neg_text[i]:neg_text[i] + 1],
                                        feats[i:i + 1])
            manual_terms.append(-logits.log_softmax(-1)[0, 0].item())
        # text with mismatched image
        for i in range(2):
            logits = model.match_logits(tokens[i:i + 1],
                                        feats[neg_image[i]:neg_image[i] + 1])
            manual_terms.append(-logits.log_softmax(-1)[0, 0].item())
    assert len(manual_terms) == 6
    assert got == pytest.approx(sum(manual_terms) / 6.0, abs=1e-6)


def test_itm_perfect_head_loss_vanishes():
    model, tok = make_model()
    tokens = torch.tensor([tok.encode("edema is seen", "encode_match")] * 2)
    feats = torch.zeros(2, 5, 8)
    neg = torch.tensor([1, 0])

    class Oracle(torch.nn.Module):
        def match_logits(self, t, f):
            # declare "match" iff the pairing is the positive one (first block)
            n = t.shape[0]
            out = torch.full((n, 2), -1e4)
            out[: n // 3, 1] = 1e4
            out[n // 3:, 0] = 1e4
            return out
    assert itm_loss(Oracle(), tokens, feats, neg, neg).item() == pytest.approx(0.0, abs=1e-8)


def test_itm_rejects_singleton_batch():
    f = torch.full((1, 3), 1 / 3)
    with pytest.raises(ValueError):
        sample_match_negatives(f, f)


def test_sample_match_negatives_never_picks_positive():
    torch.manual_seed(0)
    B = 4
    f = torch.rand(B, B + 2).softmax(dim=1)
    for seed in range(10):
        gen = torch.Generator().manual_seed(seed)
        neg_t, neg_i = sample_match_negatives(f, f, generator=gen)
        assert (neg_t != torch.arange(B)).all()
        assert (neg_i != torch.arange(B)).all()


def test_lm_uniform_logits_give_ln_vocab():
    model, tok = make_model()
    with torch.no_grad():
        model.decoder.lm_head.weight.zero_()
        model.decoder.lm_head.bias.zero_()
    tokens = torch.tensor([tok.encode("edema is seen", "decode")] * 2)
    feats = torch.randn(2, 5, 8)
    v = tok.vocab_size
    for smoothing in (0.0, 0.1):
        loss = lm_loss(model.decoder, tokens, feats, tok.pad_id, smoothing)
        assert loss.item() == pytest.approx(math.log(v), abs=1e-6)


def test_lm_forced_single_token_loss_zero():
    model, tok = make_model()
    tokens = torch.tensor([tok.encode("edema", "decode")])
    feats = torch.randn(1, 5, 8)

    class Forcing(torch.nn.Module):
        def forward(self, prefix, image_feats):
            out = torch.full((1, prefix.shape[1], tok.vocab_size), -1e4)
            for pos in range(prefix.shape[1]):
                target = tokens[0, pos + 1] if pos + 1 < tokens.shape[1] else tok.pad_id
                out[0, pos, target] = 1e4
            return out
    assert lm_loss(Forcing(), tokens, feats, tok.pad_id).item() == pytest.approx(0.0, abs=1e-8)


def test_lm_teacher_forcing_equals_stepwise():
    model, tok = make_model(seed=4)
    tokens = torch.tensor([tok.encode("edema is seen there", "decode")])
    feats = torch.randn(1, 5, 8)
    got = lm_loss(model.decoder, tokens, feats, tok.pad_id, label_smoothing=0.0).item()
    with torch.no_grad():
        nll = []
        length = int((tokens != tok.pad_id).sum())
        for i in range(1, length):
            logits = model.decoder(tokens[:, :i], feats)
            nll.append(-logits[0, -1].log_softmax(-1)[tokens[0, i]].item())
    assert got == pytest.approx(sum(nll) / len(nll), abs=1e-5)


def test_total_loss_weighting_and_guard():
    one = torch.tensor(1.0)
    parts = (one, 2 * one, 3 * one, 4 * one)
    assert total_loss(*parts, LossWeights()).item() == pytest.approx(10.0)
    assert total_loss(*parts, LossWeights(0, 0, 0)).item() == pytest.approx(1.0)
    with pytest.raises(NumericsError):
        total_loss(one / 0.0, one, one, one, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(itm=-1.0)


def test_queue_snapshot_isolated_from_later_enqueues():
    from motor.queues import FeatureQueue
    q = FeatureQueue(capacity=4, dim=3)
    g = torch.Generator().manual_seed(0)
    v = torch.randn(4, 3, generator=g)
    v = v / v.norm(dim=1, keepdim=True)
    q.enqueue(v[:2], ["a", "b"])
    snap, ids = q.snapshot()
    before = snap.clone()
    q.enqueue(v[2:], ["c", "d"])
    assert torch.equal(snap, before)
    assert ids == ["a", "b"]
