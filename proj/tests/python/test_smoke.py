import math

import pytest

import corefcl


def test_version_and_defaults():
    assert corefcl.__version__
    cfg = corefcl.default_config()
    assert cfg["alpha"] == 0.5
    assert cfg["eta"] == 1.0
    assert cfg["p_omit"] == 0.5


def test_margin_loss():
    assert corefcl.margin_loss([0.0], [0.0], eta=1.0) == pytest.approx(1.0)
    assert corefcl.margin_loss([5.0], [0.0], eta=1.0) == 0.0
    # hinges 1.5 and 0
    assert corefcl.margin_loss([-0.5, 3.0], [0.0, 0.0], eta=1.0) == pytest.approx(0.75)


def test_bleu():
    assert corefcl.corpus_bleu(["a b c d"], ["a b c d"])["bleu"] == 100.0
    report = corefcl.corpus_bleu(["the the the the the the the"], ["the cat is on the mat"])
    assert report["precisions"][0] == pytest.approx(2 / 7)
    assert corefcl.corpus_bleu(["x y z w"], ["a b c d"])["bleu"] == 0.0


def test_generate_and_resolve():
    docs = corefcl.generate_corpus(docs=5, seed=3)
    assert len(docs) == 5
    for doc in docs:
        pairs = doc["pairs"]
        for prev, cur in zip(pairs, pairs[1:]):
            if cur[0].startswith("it "):
                chains = corefcl.resolve([prev[0]], cur[0])
                assert len(chains) == 1
                assert chains[0]["antecedents"][0]["location"] == 0
                assert chains[0]["anaphors"][0]["surface"] == "it"


def test_corrupt_changes_antecedent():
    out = corefcl.corrupt(["the book is new"], "it breaks", strategy="omit-only")
    assert out == ["is new"]


def test_bad_config_key():
    with pytest.raises(corefcl.ConfigError):
        corefcl.ingest({"no_such_key": 1})


def test_tiny_pipeline(tmp_path):
    cfg = {
        "work_dir": str(tmp_path),
        "docs": 40,
        "max_steps": 20,
        "finetune_max_steps": 5,
        "eval_every": 10,
        "d_model": 16,
        "d_ff": 32,
    }
    result = corefcl.run_all(cfg)
    assert 0.0 <= result["bleu"]["bleu"] <= 100.0
    acc = result["contrastive"]["accuracy"]
    assert 0.0 <= acc <= 1.0 and not math.isnan(acc)
    assert (tmp_path / "cl.ckpt").exists()
    lines = corefcl.translate(cfg, str(tmp_path / "cl.ckpt"), str(tmp_path / "test.jsonl"))
    assert len(lines) > 0
