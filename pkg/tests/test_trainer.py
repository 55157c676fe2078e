import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from structdrop.corpus import ByteVocab, CorpusError, load_corpus, make_batches, split_stream
from structdrop.model import ModelConfig, forward_window, init_params, load_checkpoint, zero_state
from structdrop.trainer import (
    ConfigError,
    NonFiniteGradientError,
    TrainConfig,
    evaluate,
    evaluate_stream,
    load_train_config,
    lr_for_epoch,
    sgd_step,
    train,
)


def test_load_corpus_sorted_mapping(tmp_path):
    (tmp_path / "c").write_bytes(b"abab")
    ids, vocab = load_corpus(tmp_path / "c")
    assert ids.tolist() == [0, 1, 0, 1] and len(vocab) == 2
    (tmp_path / "d").write_bytes(b"ba")
    assert load_corpus(tmp_path / "d")[0].tolist() == [1, 0]


def test_load_corpus_errors(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "empty")
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing")


@given(st.binary(min_size=1, max_size=200))
def test_tokenize_roundtrip(data):
    vocab = ByteVocab.from_bytes(data)
    assert vocab.decode(vocab.encode(data)) == data
    assert len(vocab) <= 256


def test_split_stream():
    parts = split_stream(np.arange(100), (0.9, 0.05, 0.05))
    assert [len(p) for p in parts] == [90, 5, 5]
    assert np.array_equal(np.concatenate(parts), np.arange(100))
    with pytest.raises(ValueError):
        split_stream(np.arange(10), (0.5, 0.2, 0.2))


def test_make_batches_shapes():
    batches = make_batches(np.arange(10), 2, 2)
    assert len(batches) == 2  # lanes of 5 tokens, windows advance by 2
    x, y = batches[0]
    assert x.tolist() == [[0, 1], [5, 6]] and y.tolist() == [[1, 2], [6, 7]]
    assert batches[1][0].tolist() == [[2, 3], [7, 8]]


def test_make_batches_single_window():
    s = np.arange(9)
    batches = make_batches(s, 1, 8)
    assert len(batches) == 1
    assert batches[0][0].tolist() == [s[:8].tolist()]


def test_make_batches_shift_and_errors():
    for x, y in make_batches(np.random.default_rng(0).integers(0, 9, 500), 4, 7):
        np.testing.assert_array_equal(x[:, 1:], y[:, :-1])
    with pytest.raises(CorpusError):
        make_batches(np.arange(5), 2, 2)


def test_sgd_step_basics():
    p = [np.ones((2, 2)), np.ones(3)]
    sgd_step(p, [np.zeros((2, 2)), np.zeros(3)], 0.5, 5.0)
    np.testing.assert_array_equal(p[0], 1.0)
    g = [np.full(4, 5.0)]  # norm 10
    q = [np.zeros(4)]
    norm = sgd_step(q, g, 1.0, 5.0)
    assert norm == pytest.approx(10.0)
    np.testing.assert_allclose(q[0], -2.5)  # grads scaled by 0.5
    with pytest.raises(NonFiniteGradientError):
        sgd_step([np.ones(2)], [np.array([1.0, np.nan])], 1.0, 5.0)


def test_sgd_quadratic_monotone():
    w = [np.array([3.0])]
    losses = []
    for _ in range(50):
        losses.append(float(w[0][0] ** 2))
        sgd_step(w, [2 * w[0]], 0.1, 5.0)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_lr_schedule():
    c = TrainConfig(lr=1.0, lr_decay=0.8, lr_decay_start_epoch=2)
    assert [lr_for_epoch(c, e) for e in (1, 2, 3, 4)] == pytest.approx([1.0, 1.0, 0.8, 0.64])


def _config(tmp_path, corpus, **kw):
    model = kw.pop("model", dict(embed_dim=16, hidden=16, layers=2, dropout_nr=0.5, mode_label="nr-rh-st"))
    base = dict(corpus_path=str(corpus), batch_size=4, unroll_steps=10, epochs=2, lr=5.0, seed=1,
                out_dir=str(tmp_path / "run"), model=model)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs(tmp_path, small_corpus):
    c = _config(tmp_path, small_corpus, epochs=0)
    report = train(c)
    assert report.epochs == []
    init = init_params(c.model, c.init_range, seed=[c.seed, 0])
    for a, b in zip(report.params.arrays(), init.arrays()):
        np.testing.assert_array_equal(a, b)


def test_zero_lr_keeps_valid_loss(tmp_path, small_corpus):
    c = _config(tmp_path, small_corpus, lr=0.0, epochs=3, precision="double")
    report = train(c, write=False)
    losses = [r.valid_loss for r in report.epochs]
    assert max(losses) - min(losses) <= 1e-12


def test_train_writes_outputs(tmp_path, small_corpus):
    c = _config(tmp_path, small_corpus)
    report = train(c)
    out = tmp_path / "run"
    rows = list(csv.reader(open(out / "epochs.csv")))
    assert rows[0] == ["epoch", "train_loss", "valid_loss", "valid_ppl", "lr", "wall_seconds"]
    assert len(rows) == 3
    doc = json.loads((out / "report.json").read_text())
    assert len(doc["epochs"]) == 2 and doc["threads"] == 1
    assert doc["config"]["model"]["mask_case"] == "CASE_III"
    params = load_checkpoint(out / "model.sdlm")
    np.testing.assert_array_equal(params.head, report.params.head)
    loss, ppl = evaluate(params, c, "valid")
    assert loss == pytest.approx(report.epochs[-1].valid_loss, rel=1e-6)
    assert ppl == pytest.approx(math.exp(loss))
    assert report.epochs[-1].valid_loss < math.log(c.model.vocab)


def test_evaluate_deterministic(tmp_path, small_corpus):
    c = _config(tmp_path, small_corpus, epochs=1)
    report = train(c, write=False)
    assert evaluate(report.params, c, "test") == evaluate(report.params, c, "test")


def test_evaluate_matches_naive_loop():
    c = ModelConfig(vocab=7, embed_dim=5, hidden=6, layers=2, mode_label="nr-st")
    params = init_params(c, 0.4, 3, np.float64)
    stream = np.random.default_rng(0).integers(0, 7, 203)
    B, T = 3, 8
    loss, _ = evaluate_stream(params, c, stream, B, T)

    # one token at a time per lane, plain numpy, no batching
    lane = len(stream) // B
    n_windows = (lane - 1) // T
    total, count = 0.0, 0
    for b in range(B):
        seq = stream[b * lane:(b + 1) * lane]
        h = [np.zeros(6) for _ in range(2)]
        cc = [np.zeros(6) for _ in range(2)]
        for t in range(n_windows * T):
            x = params.embedding[seq[t]]
            for l, p in enumerate(params.lstm):
                z = x @ p.W + h[l] @ p.U + p.b
                i, f, o = (1 / (1 + np.exp(-z[k * 6:(k + 1) * 6])) for k in range(3))
                g = np.tanh(z[18:])
                cc[l] = f * cc[l] + i * g
                h[l] = o * np.tanh(cc[l])
                x = h[l]
            logits = x @ params.head + params.head_bias
            total += np.log(np.sum(np.exp(logits))) - logits[seq[t + 1]]
            count += 1
    assert abs(loss - total / count) < 1e-10


def test_carried_state_equals_longer_window():
    c = ModelConfig(vocab=9, embed_dim=4, hidden=5, layers=2, mode_label="nr-st")
    params = init_params(c, 0.4, 0, np.float64)
    tokens = np.random.default_rng(1).integers(0, 9, (2, 12))
    full, _, _ = forward_window(params, c, tokens, zero_state(c, 2, np.float64), None)
    a, _, state = forward_window(params, c, tokens[:, :6], zero_state(c, 2, np.float64), None)
    b, _, _ = forward_window(params, c, tokens[:, 6:], state, None)
    for x, y in zip(full, a + b):
        np.testing.assert_array_equal(x, y)


def test_load_train_config(tmp_path, small_corpus):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"corpus_path": str(small_corpus), "batch_size": 4,
                                "model": {"hidden": 32, "mode_label": "nr-st"}}))
    c = load_train_config(path)
    assert c.batch_size == 4 and c.model.hidden == 32 and c.model.dropout_rh is None
    path.write_text(json.dumps({"corpus_path": "x", "bogus": 1}))
    with pytest.raises(ConfigError):
        load_train_config(path)
    path.write_text(json.dumps({"model": {"hidden_size": 3}}))
    with pytest.raises(ConfigError):
        load_train_config(path)
    path.write_text(json.dumps({"splits": [0.5, 0.2, 0.2]}))
    with pytest.raises(ConfigError):
        load_train_config(path)
