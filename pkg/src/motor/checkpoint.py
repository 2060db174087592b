"""Versioned checkpoint container.

A checkpoint bundles the resolved configuration, the tokenizer vocabulary,
all model parameters (momentum copies included, by hierarchical name),
queue states, optimizer state, and RNG states, so a run can be resumed or
evaluated bit-identically.
"""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, *, kind: str, config: dict, vocab: list[str],
                    model_state: dict, queues: dict | None = None,
                    optimizer_state: dict | None = None,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "vocab": vocab,
        "model": model_state,
        "queues": queues or {},
        "optimizer": optimizer_state,
        "rng": rng_state,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    return payload


def capture_rng() -> dict:
    return {"torch": torch.get_rng_state()}


def restore_rng(state: dict) -> None:
    torch.set_rng_state(state["torch"])
