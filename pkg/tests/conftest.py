"""Shared fixtures: tiny configs, synthetic corpora, and manifest writers."""

import json

import numpy as np
import pytest

from fatspeech.config import Config, ModelConfig
from fatspeech.corpus import Example
from fatspeech.model import FATModel
from fatspeech.subword import train_bpe


def tiny_model_config(**overrides):
    base = dict(kind="fat_st", d_model=16, heads=2, acoustic_layers=1,
                shared_layers=1, dec_layers=1, ffn_dim=32, conv_channels=4,
                d_s=8, vocab_size=20, dropout=0.0, mask_ratio=0.3, span_len=3,
                precision="float64")
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config):
    return FATModel(tiny_config, seed=0)


@pytest.fixture(scope="session")
def toy_vocab():
    texts = ["ab ba abc", "cb ca cab", "ba ab cc"]
    return train_bpe(texts, vocab_size=20)


def synthetic_example(rng, uid="ex", t=None, d_s=8, vocab_size=20,
                      n_src=None, n_tgt=None):
    """A random triplet example with ids in the non-reserved range."""
    t = t if t is not None else int(rng.integers(8, 24))
    n_src = n_src if n_src is not None else int(rng.integers(2, 6))
    n_tgt = n_tgt if n_tgt is not None else int(rng.integers(2, 6))
    return Example(
        uid=uid,
        feats=rng.normal(size=(t, d_s)).astype(np.float32),
        src_ids=[int(i) for i in rng.integers(5, vocab_size, size=n_src)],
        tgt_ids=[int(i) for i in rng.integers(5, vocab_size, size=n_tgt)],
    )


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return str(path)


def desk_config(**model_overrides):
    """A full Config tuned for fast desk-scale CLI runs."""
    cfg = Config()
    cfg.model = tiny_model_config(precision="float32", **model_overrides)
    cfg.train.steps = 4
    cfg.train.warmup = 2
    cfg.train.ckpt_interval = 2
    cfg.data.batch_frames = 400
    cfg.data.batch_tokens = 64
    return cfg
