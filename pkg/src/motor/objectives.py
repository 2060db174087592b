"""Pretraining objectives: contrastive (ITC), matching (ITM), language
modeling (LM), and their weighted combination. The label-alignment (MLC)
loss lives with the injection pipeline it is attached to."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12  # log-domain guard


class NumericsError(RuntimeError):
    """A loss component became non-finite; the step must abort."""


@dataclass(frozen=True)
class LossWeights:
    itm: float = 1.0
    lm: float = 1.0
    mlc: float = 1.0

    def __post_init__(self):
        for v in (self.itm, self.lm, self.mlc):
            if not (v >= 0.0 and v == v):
                raise ValueError("loss weights must be finite and nonnegative")


def itc_similarities(img_proj: torch.Tensor, txt_proj: torch.Tensor,
                     img_candidates: torch.Tensor, txt_candidates: torch.Tensor,
                     tau) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-normalized similarity rows for both directions.

    Candidate sets are the batch momentum projections concatenated with the
    queue snapshot, so each row has B + M entries summing to 1.
    """
    f_i2t = ((img_proj @ txt_candidates.t()) / tau).softmax(dim=-1)
    f_t2i = ((txt_proj @ img_candidates.t()) / tau).softmax(dim=-1)
    return f_i2t, f_t2i


def itc_targets(batch_size: int, n_candidates: int, soft: torch.Tensor | None = None,
                soft_weight: float = 0.4) -> torch.Tensor:
    """One-hot targets at the paired in-batch candidate, optionally blended
    with a provided soft distribution."""
    g = torch.zeros(batch_size, n_candidates)
    g[torch.arange(batch_size), torch.arange(batch_size)] = 1.0
    if soft is not None:
        g = (1.0 - soft_weight) * g + soft_weight * soft
    return g


def itc_loss(f_i2t: torch.Tensor, f_t2i: torch.Tensor,
             g_i2t: torch.Tensor, g_t2i: torch.Tensor) -> torch.Tensor:
    """Half the sum of both directions' cross-entropies, batch-averaged."""
    l_i2t = -(g_i2t * f_i2t.clamp_min(PROB_FLOOR).log()).sum(dim=-1)
    l_t2i = -(g_t2i * f_t2i.clamp_min(PROB_FLOOR).log()).sum(dim=-1)
    return 0.5 * (l_i2t + l_t2i).mean()


def sample_match_negatives(f_i2t: torch.Tensor, f_t2i: torch.Tensor,
                           generator: torch.Generator | None = None
                           ) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard in-batch negatives, sampled proportionally to the contrastive
    similarity with the positive pairing excluded.

    Returns (negative text index per image, negative image index per text).
    """
    B = f_i2t.shape[0]
    if B < 2:
        raise ValueError("matching loss needs batch size >= 2 for negatives")
    eye = torch.eye(B, dtype=torch.bool)
    w_text = f_i2t[:, :B].clone().masked_fill_(eye, 0.0) + PROB_FLOOR
    w_image = f_t2i[:, :B].clone().masked_fill_(eye, 0.0) + PROB_FLOOR
    neg_text = torch.multinomial(w_text, 1, generator=generator).squeeze(1)
    neg_image = torch.multinomial(w_image, 1, generator=generator).squeeze(1)
    return neg_text, neg_image


def itm_loss(model, match_token_ids: torch.Tensor, image_feats: torch.Tensor,
             neg_text: torch.Tensor, neg_image: torch.Tensor) -> torch.Tensor:
    """Binary match loss over B positive pairs plus 2B mismatched pairs."""
    B = match_token_ids.shape[0]
    tokens = torch.cat([match_token_ids, match_token_ids[neg_text], match_token_ids])
    feats = torch.cat([image_feats, image_feats, image_feats[neg_image]])
    logits = model.match_logits(tokens, feats)                     # [3B, 2]
    labels = torch.cat([torch.ones(B, dtype=torch.long),
                        torch.zeros(2 * B, dtype=torch.long)])
    return F.cross_entropy(logits, labels)


def lm_loss(decoder, decode_token_ids: torch.Tensor, image_feats: torch.Tensor,
            pad_id: int, label_smoothing: float = 0.0) -> torch.Tensor:
    """Teacher-forced autoregressive loss, averaged over non-pad targets."""
    inputs = decode_token_ids[:, :-1]
    targets = decode_token_ids[:, 1:]
    logits = decoder(inputs, image_feats)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=pad_id, label_smoothing=label_smoothing)


def total_loss(itc: torch.Tensor, itm: torch.Tensor, lm: torch.Tensor,
               mlc: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the four objectives; aborts on non-finite parts."""
    parts = {"itc": itc, "itm": itm, "lm": lm, "mlc": mlc}
    bad = {k: float(v) for k, v in parts.items() if not torch.isfinite(v)}
    if bad:
        raise NumericsError(f"non-finite loss components: {bad}")
    return itc + weights.itm * itm + weights.lm * lm + weights.mlc * mlc
