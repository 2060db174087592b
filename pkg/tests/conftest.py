import pytest

from motor.config import RunConfig
from motor.corpus import gen_corpus, gen_vqa
from motor.train import Pretrainer

# Micro profile used by the unit/integration tests: small enough that a
# short pretraining run takes seconds.
MICRO = dict(
    d_model=16, n_layers=1, n_heads=2, ffn_mult=2, image_size=64, patch_size=16,
    proj_dim=8, max_text_len=32, batch_size=8, itc_queue_size=16,
    report_queue_size=64, warmup_steps=2, steps=12, k_retrieve=2, triplet_cap=8,
    triplet_text_len=24, checkpoint_every=0, finetune_steps=30,
)


@pytest.fixture(scope="session")
def micro_cfg():
    return RunConfig(**MICRO).validate()


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    corpus = gen_corpus(root, seed=11, n_records=96)
    gen_vqa(root, seed=11)
    return corpus


@pytest.fixture(scope="session")
def micro_checkpoint(micro_cfg, micro_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrain_run")
    trainer = Pretrainer(micro_cfg, micro_corpus, out)
    trainer.run()
    return out / "ck_final.pt"


@pytest.fixture()
def micro_pipeline(micro_checkpoint, micro_corpus):
    from motor.downstream import Pipeline
    pipe, _ = Pipeline.from_checkpoint(micro_checkpoint, micro_corpus)
    return pipe
