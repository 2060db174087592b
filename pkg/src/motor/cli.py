"""Command-line surface: corpus generation, pretraining, finetuning,
evaluation, attention export, and the gradient check.

Exit codes: 0 ok, 2 configuration/input error, 3 numeric failure.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from .config import EXIT_CONFIG, EXIT_NUMERIC, ConfigError, load_config
from .corpus import Corpus, gen_corpus, gen_vqa
from .objectives import NumericsError

TASKS = ("retrieval", "generation", "classification", "vqa")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_cfg(config_path, **overrides):
    try:
        return load_config(config_path, overrides=overrides)
    except (ConfigError, FileNotFoundError) as exc:
        _fail(EXIT_CONFIG, str(exc))


def _load_corpus(corpus_dir) -> Corpus:
    try:
        return Corpus(corpus_dir)
    except FileNotFoundError as exc:
        _fail(EXIT_CONFIG, f"corpus not found: {exc}")


def _print_table(result: dict, indent: str = "") -> None:
    for name, value in result.items():
        if isinstance(value, dict):
            click.echo(f"{indent}{name}:")
            _print_table(value, indent + "  ")
        elif isinstance(value, float):
            click.echo(f"{indent}{name:<20} {value:.4f}")
        else:
            click.echo(f"{indent}{name:<20} {value}")


@click.group()
def main():
    """Knowledge-enhanced multimodal pretraining at desk scale."""


@main.command("gen-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--n-records", default=500, show_default=True)
@click.option("--fractions", default="0.7,0.15,0.15", show_default=True,
              help="train,val,test split fractions")
def cmd_gen_corpus(out_dir, seed, n_records, fractions):
    """Generate a synthetic corpus (images, reports, labels, knowledge files,
    and question/answer records)."""
    try:
        parts = tuple(float(x) for x in fractions.split(","))
        if len(parts) != 3:
            raise ValueError("need three fractions")
        corpus = gen_corpus(out_dir, seed=seed, n_records=n_records, fractions=parts)
        vqa = gen_vqa(out_dir, seed=seed)
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    by_split = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
    click.echo(f"wrote {len(corpus.records)} records {by_split} "
               f"and {len(vqa)} vqa questions to {out_dir}")


@main.command("pretrain")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int)
@click.option("--seed", type=int)
@click.option("--variant", type=str)
@click.option("--batch-size", type=int)
def cmd_pretrain(config_path, corpus_dir, out_dir, steps, seed, variant, batch_size):
    """Pretrain on a generated corpus; writes checkpoints and a per-step
    loss log (columns: step,loss,loss_itc,loss_itm,loss_lm,loss_mlc,tau)."""
    from .train import Pretrainer
    cfg = _load_cfg(config_path, steps=steps, seed=seed, variant=variant,
                    batch_size=batch_size)
    corpus = _load_corpus(corpus_dir)
    start = time.time()
    try:
        trainer = Pretrainer(cfg, corpus, out_dir)
        history = trainer.run()
    except NumericsError as exc:
        _fail(EXIT_NUMERIC, f"step {trainer.step + 1}: {exc}")
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo(f"pretrained {len(history)} steps in {time.time() - start:.1f}s; "
               f"final loss {history[-1]['loss']:.4f}; "
               f"checkpoint {Path(out_dir) / 'ck_final.pt'}")


@main.command("finetune")
@click.argument("task", type=click.Choice(TASKS))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int)
@click.option("--seed", default=0, show_default=True)
def cmd_finetune(task, checkpoint, corpus_dir, out_dir, steps, seed):
    """Adapt a pretrained checkpoint to one downstream task."""
    from . import downstream as ds
    corpus = _load_corpus(corpus_dir)
    try:
        pipe, _ = ds.Pipeline.from_checkpoint(checkpoint, corpus)
    except (ValueError, FileNotFoundError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if task == "retrieval":
            history = ds.finetune_retrieval(pipe, corpus, steps, seed)
            pipe.save(out / "ck_retrieval.pt", kind="retrieval")
        elif task == "generation":
            history = ds.finetune_generation(pipe, corpus, steps, seed)
            pipe.save(out / "ck_generation.pt", kind="generation")
        elif task == "classification":
            clf, history = ds.finetune_classification(pipe, corpus, steps, seed)
            pipe.save(out / "ck_classification.pt", kind="classification",
                      extra={"classifier": clf.heads_state()})
        else:
            vqa, history = ds.finetune_vqa(pipe, corpus, steps, seed)
            pipe.save(out / "ck_vqa.pt", kind="vqa", extra={"vqa": vqa.heads_state()})
    except NumericsError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo(f"finetuned {task} for {len(history)} steps; "
               f"final loss {list(history[-1].values())[-1]:.4f}")


@main.command("eval")
@click.argument("task", type=click.Choice(TASKS))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(("train", "val", "test")))
@click.option("--out", "out_json", type=click.Path(), help="write metrics as JSON")
@click.option("--predictions", type=click.Path(), help="write per-example outputs (JSONL)")
@click.option("--rerank/--no-rerank", default=False,
              help="re-score top retrieval candidates with the match head")
def cmd_eval(task, checkpoint, corpus_dir, split, out_json, predictions, rerank):
    """Evaluate a checkpoint on one task; prints a metric table."""
    from . import downstream as ds
    corpus = _load_corpus(corpus_dir)
    try:
        pipe, payload = ds.Pipeline.from_checkpoint(checkpoint, corpus)
        if task == "retrieval":
            result = ds.eval_retrieval(pipe, corpus, split, rerank=rerank,
                                       predictions_path=predictions)
        elif task == "generation":
            result = ds.eval_generation(pipe, corpus, split, predictions_path=predictions)
        elif task == "classification":
            if "classifier" not in payload["extra"]:
                raise ConfigError("checkpoint has no classifier heads; "
                                  "run `finetune classification` first")
            clf = ds.DiagnosisClassifier(pipe.model, len(pipe.cfg.label_names))
            clf.load_heads_state(payload["extra"]["classifier"])
            result = ds.eval_classification(pipe, clf, corpus, split,
                                            predictions_path=predictions)
        else:
            if "vqa" not in payload["extra"]:
                raise ConfigError("checkpoint has no vqa heads; "
                                  "run `finetune vqa` first")
            state = payload["extra"]["vqa"]
            vqa = ds.VqaModel(pipe.model, state["open_vocab"], state["closed_vocab"])
            vqa.load_heads_state(state)
            result = ds.eval_vqa(pipe, vqa, corpus, split, predictions_path=predictions)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    _print_table(result)
    if out_json:
        Path(out_json).parent.mkdir(parents=True, exist_ok=True)
        Path(out_json).write_text(json.dumps(result, indent=2) + "\n")


@main.command("export-attention")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--record-id", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_export_attention(checkpoint, corpus_dir, record_id, out_dir):
    """Write the image-to-knowledge cross-attention matrices for one record
    as headered text files."""
    from . import downstream as ds
    corpus = _load_corpus(corpus_dir)
    try:
        pipe, _ = ds.Pipeline.from_checkpoint(checkpoint, corpus)
        if record_id not in corpus.by_id:
            raise ConfigError(f"unknown record id {record_id!r}")
        written = ds.export_attention(pipe, corpus, record_id, out_dir)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    for name, path in written.items():
        click.echo(f"{name}: {path}")


@main.command("gradcheck")
@click.option("--seed", default=0, show_default=True)
@click.option("--samples", default=4, show_default=True,
              help="coordinates checked per parameter tensor")
@click.option("--tolerance", default=1e-4, show_default=True)
def cmd_gradcheck(seed, samples, tolerance):
    """Finite-difference check of all objective gradients on a micro model;
    exits nonzero on failure."""
    from .gradcheck import run_gradcheck
    start = time.time()
    report = run_gradcheck(seed=seed, samples_per_tensor=samples, tolerance=tolerance)
    by_loss: dict[str, float] = {}
    for row in report.rows:
        by_loss[row.loss] = max(by_loss.get(row.loss, 0.0), row.rel_err)
    for loss, err in by_loss.items():
        status = "ok" if err <= tolerance else "FAIL"
        click.echo(f"{loss:<6} max rel err {err:.3e}  {status}")
    click.echo(f"checked {len(report.rows)} coordinates in {time.time() - start:.1f}s")
    if not report.passed:
        w = report.worst
        _fail(EXIT_NUMERIC, f"gradient mismatch: {w.loss}/{w.param}[{w.coord}] "
                            f"analytic {w.analytic:.6e} numeric {w.numeric:.6e}")


if __name__ == "__main__":
    main()
