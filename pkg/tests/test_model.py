import numpy as np
import pytest
import torch

from motor.gradcheck import tiny_graph
from motor.layers import MultiHeadAttention, causal_mask
from motor.model import (ImageEncoder, ModelDims, MotorModel, ProjectionHead,
                         ReportDecoder, Trunk)
from motor.tokenizer import Tokenizer
from motor.train import label_token_ids

WORDS = ["normal", "lung", "pleural", "pneumonia", "edema", "effusion",
         "there", "is", "a", "small", "seen", "at", "the", "base", "in",
         "with", "present", "located", "suggestive", "of"]
LABELS = ("edema", "effusion", "pneumonia")


def dims(**kw):
    base = dict(d_model=8, n_layers=1, n_heads=2, ffn_mult=2, image_size=16,
                patch_size=8, proj_dim=4, max_text_len=12)
    base.update(kw)
    return ModelDims(**base)


@pytest.fixture()
def setup():
    torch.manual_seed(0)
    tok = Tokenizer(WORDS, max_text_len=12)
    model = MotorModel(dims(), tok, tiny_graph(), label_token_ids(tok, LABELS))
    model.eval()
    return model, tok


def test_dims_validation():
    with pytest.raises(ValueError):
        dims(d_model=9)
    with pytest.raises(ValueError):
        dims(image_size=17)


def test_vit_output_rows():
    torch.manual_seed(0)
    enc = ImageEncoder(dims(image_size=64, patch_size=8, d_model=16, n_heads=2))
    out = enc(torch.rand(2, 64, 64))
    assert out.shape == (2, 65, 16)    # 64/8 squared + class token


def test_vit_rejects_wrong_size():
    enc = ImageEncoder(dims())
    with pytest.raises(ValueError):
        enc(torch.rand(1, 32, 32))


def test_vit_deterministic_in_eval(setup):
    model, _ = setup
    img = torch.rand(2, 16, 16)
    a = model.trunk.encode_image(img)
    b = model.trunk.encode_image(img)
    assert torch.equal(a, b)


def test_vit_patch_permutation():
    torch.manual_seed(1)
    enc = ImageEncoder(dims()).eval()
    img = torch.rand(1, 16, 16)
    swapped = img.clone()
    swapped[:, :8, :8], swapped[:, :8, 8:] = img[:, :8, 8:], img[:, :8, :8]
    assert not torch.allclose(enc(img)[:, 0], enc(swapped)[:, 0], atol=1e-5)
    with torch.no_grad():
        enc.pos_embed.zero_()
    # without positions the class token cannot tell the patch orders apart
    assert torch.allclose(enc(img)[:, 0], enc(swapped)[:, 0], atol=1e-5)


def test_text_no_mask_equals_all_ones(setup):
    model, tok = setup
    ids = torch.tensor([tok.encode("pneumonia is present", "encode_cls")])
    enc = model.trunk.report_encoder
    a = enc(ids, pad_id=tok.pad_id)
    b = enc(ids, visible_mask=torch.ones(12, 12).bool(), pad_id=tok.pad_id)
    # all-ones visible mask still intersects the pad mask, so compare against
    # an explicitly pad-masked run
    assert torch.allclose(a, b, atol=1e-7)


def test_identity_mask_isolates_positions(setup):
    model, _ = setup
    enc = model.trunk.report_encoder
    x = torch.randn(1, 6, 8)
    eye = torch.eye(6).bool()
    base = enc.forward_embedded(x, attn_mask=eye)
    x2 = x.clone()
    x2[0, 3, 1] += 1.0     # single-coordinate bump; a uniform shift would be
    moved = enc.forward_embedded(x2, attn_mask=eye)  # erased by layer norm
    others = [i for i in range(6) if i != 3]
    assert (base[0, others] - moved[0, others]).abs().max().item() <= 1e-9
    assert not torch.allclose(base[0, 3], moved[0, 3])


def test_padding_invariance(setup):
    model, tok = setup
    text = "edema seen at the base"
    short = torch.tensor([tok.encode(text, "encode_cls", length=6)])
    padded = torch.tensor([tok.encode(text, "encode_cls", length=12)])
    enc = model.trunk.report_encoder
    a = enc(short, pad_id=tok.pad_id)
    b = enc(padded, pad_id=tok.pad_id)
    assert (a[0] - b[0, :6]).abs().max().item() <= 1e-6


def test_attention_mask_requires_one_allowed_key():
    attn = MultiHeadAttention(8, 2)
    x = torch.randn(1, 3, 8)
    bad = torch.zeros(3, 3).bool()
    with pytest.raises(ValueError):
        attn(x, x, x, attn_mask=bad)


def test_cross_attention_kv_duplication_invariance(setup):
    model, _ = setup
    fuser = model.trunk.graph_fuser
    q = torch.randn(2, 5, 8)
    kv = torch.randn(2, 4, 8)
    a, _ = fuser(q, kv)
    b, _ = fuser(q, torch.cat([kv, kv], dim=1))
    assert torch.allclose(a, b, atol=1e-6)


def test_cross_attention_zero_kv_reduces_to_self_branch(setup):
    model, _ = setup
    fuser = model.trunk.graph_fuser
    blk = fuser.blocks[0]
    with torch.no_grad():
        blk.cross_attn.v_proj.bias.zero_()
        blk.cross_attn.out_proj.bias.zero_()
    q = torch.randn(1, 5, 8)
    kv = torch.zeros(1, 3, 8)
    got, _ = fuser(q, kv)
    # replicate the block without its cross branch
    h = blk.norm_self(q)
    x = q + blk.self_attn(h, h, h)[0]
    x = x + blk.ffn(blk.norm_ffn(x))
    expected = fuser.norm(x)
    assert torch.allclose(got, expected, atol=1e-6)


def test_cross_attention_sensitive_to_kv_content(setup):
    model, _ = setup
    fuser = model.trunk.graph_fuser
    q = torch.randn(1, 5, 8)
    kv = torch.randn(1, 4, 8)
    a, _ = fuser(q, kv)
    kv2 = kv.clone()
    kv2[0, 2] += 0.25
    b, _ = fuser(q, kv2)
    assert (a - b).abs().max().item() > 1e-6


def test_cross_attention_weights_rows_sum_to_one(setup):
    model, _ = setup
    q = torch.randn(2, 5, 8)
    kv = torch.randn(2, 4, 8)
    _, attn = model.trunk.graph_fuser(q, kv, need_weights=True)
    assert attn.shape == (2, 2, 5, 4)
    assert (attn.sum(dim=-1) - 1.0).abs().max().item() <= 1e-5


def test_decoder_causality(setup):
    model, tok = setup
    img_feats = torch.randn(1, 5, 8)
    prefix = torch.tensor([[tok.bos_id] + tok.word_ids(["there", "is", "edema", "seen"])])
    logits = model.decoder(prefix, img_feats)
    changed = prefix.clone()
    changed[0, 4] = tok.word_ids(["lung"])[0]
    logits2 = model.decoder(changed, img_feats)
    assert torch.equal(logits[0, :4], logits2[0, :4])
    assert not torch.allclose(logits[0, 4], logits2[0, 4])


def test_causal_mask_shape():
    m = causal_mask(4)
    assert m.tolist() == [[1, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]]


def test_greedy_generation_deterministic(setup):
    model, tok = setup
    img_feats = torch.randn(2, 5, 8)
    a = model.greedy_decode(img_feats, tok.bos_id, tok.eos_id, max_len=8)
    b = model.greedy_decode(img_feats, tok.bos_id, tok.eos_id, max_len=8)
    assert a == b
    assert all(seq[0] == tok.bos_id for seq in a)


def test_beam_width_one_equals_greedy(setup):
    model, tok = setup
    img_feats = torch.randn(2, 5, 8)
    greedy = model.greedy_decode(img_feats, tok.bos_id, tok.eos_id, max_len=8)
    beam = model.greedy_decode(img_feats, tok.bos_id, tok.eos_id, max_len=8,
                               beam_width=2)
    # beam search with width 1 must equal greedy; width 2 may differ
    beam1 = model.greedy_decode(img_feats, tok.bos_id, tok.eos_id, max_len=8,
                                beam_width=1)
    assert beam1 == greedy
    assert all(isinstance(s, list) for s in beam)


def test_projection_unit_norm():
    torch.manual_seed(0)
    head = ProjectionHead(8, 4)
    z = head(torch.randn(16, 8))
    assert (z.norm(dim=1) - 1.0).abs().max().item() <= 1e-6


def test_projection_homogeneity_without_bias():
    torch.manual_seed(0)
    head = ProjectionHead(8, 4, bias=False)
    x = torch.randn(4, 8)
    assert torch.allclose(head(x), head(10.0 * x), atol=1e-6)


def test_projection_zero_input_guard():
    head = ProjectionHead(8, 4)
    with torch.no_grad():
        head.linear.bias.zero_()
    z = head(torch.zeros(2, 8))
    assert torch.isfinite(z).all()
    assert torch.equal(z, torch.zeros(2, 4))


def test_match_logits_shape(setup):
    model, tok = setup
    tokens = torch.tensor([tok.encode("edema is present", "encode_match")] * 3)
    feats = torch.randn(3, 5, 8)
    assert model.match_logits(tokens, feats).shape == (3, 2)


def test_fixed_seed_build_is_bit_stable():
    tok = Tokenizer(WORDS, max_text_len=12)
    torch.manual_seed(5)
    m1 = MotorModel(dims(), tok, tiny_graph(), label_token_ids(tok, LABELS))
    torch.manual_seed(5)
    m2 = MotorModel(dims(), tok, tiny_graph(), label_token_ids(tok, LABELS))
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    img = torch.rand(1, 16, 16)
    assert torch.equal(m1.trunk.encode_image(img), m2.trunk.encode_image(img))


def test_momentum_trunk_starts_equal_and_frozen(setup):
    model, _ = setup
    online = dict(model.trunk.named_parameters())
    for name, p in model.momentum_trunk.named_parameters():
        assert not p.requires_grad
        assert torch.equal(p, online[name])
