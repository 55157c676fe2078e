"""scikit-learn style front end for the byte-level language model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from structdrop.corpus import ByteVocab, split_stream
from structdrop.model import ModelConfig, forward_window, softmax, zero_state
from structdrop.trainer import TrainConfig, evaluate_stream, train_streams


def check_sequence(X, vocab: ByteVocab | None = None) -> np.ndarray:
    """Coerce text, bytes, or a 1-D integer sequence into token ids.

    Text and bytes need ``vocab``; integer input is checked against its size.
    """
    if isinstance(X, str):
        X = X.encode("utf-8")
    if isinstance(X, (bytes, bytearray)):
        if vocab is None:
            raise ValueError("raw text needs a vocabulary")
        return vocab.encode(bytes(X))
    ids = np.asarray(X)
    if ids.ndim != 1:
        raise ValueError(f"expected a 1-D token sequence, got shape {ids.shape}")
    if ids.size == 0:
        raise ValueError("empty token sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if ids.min() < 0 or (vocab is not None and ids.max() >= len(vocab)):
        raise ValueError("token id out of range")
    return ids.astype(np.int64)


class StructuredDropoutLM(BaseEstimator):
    """Stacked-LSTM byte language model trained with structured dropout.

    ``fit`` takes a corpus (``str``, ``bytes``, or 1-D token ids) and holds
    out ``valid_fraction`` of its tail for per-epoch validation. ``predict``
    returns the most likely next token after every position, ``score`` the
    negative mean cross-entropy in nats (higher is better).
    """

    def __init__(self, embed_dim=128, hidden=128, layers=2, dropout_nr=0.5, dropout_rh=None,
                 mode_label="nr-rh-st", batch_size=20, unroll_steps=35, epochs=3, lr=10.0, lr_decay=0.8,
                 lr_decay_start_epoch=2, clip_norm=5.0, init_range=0.05, precision="single",
                 kernel="sparse", valid_fraction=0.05, threads=1, seed=0):
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.layers = layers
        self.dropout_nr = dropout_nr
        self.dropout_rh = dropout_rh
        self.mode_label = mode_label
        self.batch_size = batch_size
        self.unroll_steps = unroll_steps
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_start_epoch = lr_decay_start_epoch
        self.clip_norm = clip_norm
        self.init_range = init_range
        self.precision = precision
        self.kernel = kernel
        self.valid_fraction = valid_fraction
        self.threads = threads
        self.seed = seed

    def _train_config(self, vocab_size: int) -> TrainConfig:
        model = ModelConfig(vocab=vocab_size, embed_dim=self.embed_dim, hidden=self.hidden,
                            layers=self.layers, dropout_nr=self.dropout_nr, dropout_rh=self.dropout_rh,
                            mode_label=self.mode_label)
        return TrainConfig(splits=(1.0 - self.valid_fraction, self.valid_fraction, 0.0),
                           batch_size=self.batch_size, unroll_steps=self.unroll_steps, epochs=self.epochs,
                           lr=self.lr, lr_decay=self.lr_decay, lr_decay_start_epoch=self.lr_decay_start_epoch,
                           clip_norm=self.clip_norm, seed=self.seed, precision=self.precision,
                           init_range=self.init_range, kernel=self.kernel, threads=self.threads,
                           model=model, out_dir="")

    def fit(self, X, y=None):
        if isinstance(X, str):
            X = X.encode("utf-8")
        if isinstance(X, (bytes, bytearray)):
            self.vocab_ = ByteVocab.from_bytes(bytes(X))
            ids = self.vocab_.encode(bytes(X))
            n_tokens = len(self.vocab_)
        else:
            self.vocab_ = None
            ids = check_sequence(X)
            n_tokens = int(ids.max()) + 1
        config = self._train_config(n_tokens)
        train_s, valid_s, _ = split_stream(ids, config.splits)
        self.history_ = train_streams(config, train_s, valid_s)
        self.params_ = self.history_.params
        self.model_config_ = config.model
        self.n_tokens_ = n_tokens
        return self

    def _ids(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        ids = check_sequence(X, self.vocab_)
        if ids.max() >= self.n_tokens_:
            raise ValueError("token id out of range for the fitted vocabulary")
        return ids

    def _logits(self, ids: np.ndarray) -> np.ndarray:
        state = zero_state(self.model_config_, 1, self.params_.dtype)
        out = []
        with threadpool_limits(self.threads):
            for start in range(0, ids.size, self.unroll_steps):
                chunk = ids[None, start:start + self.unroll_steps]
                logits, _, state = forward_window(self.params_, self.model_config_, chunk, state, None, "dense")
                out += [z[0] for z in logits]
        return np.stack(out)

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution after each position, shape ``(n, V)``."""
        return softmax(self._logits(self._ids(X)))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self._logits(self._ids(X)), axis=1)

    def score(self, X, y=None) -> float:
        ids = self._ids(X)
        if ids.size < 2:
            raise ValueError("need at least two tokens to score")
        logp = self._logits(ids[:-1])
        logp = logp - logp.max(axis=1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        return float(np.mean(logp[np.arange(ids.size - 1), ids[1:]]))

    def perplexity(self, X) -> float:
        return float(np.exp(-self.score(X)))

    def validation_perplexity(self, X, batch_size=None) -> float:
        """Batched, state-carrying evaluation as used during training."""
        ids = self._ids(X)
        return evaluate_stream(self.params_, self.model_config_, ids, batch_size or self.batch_size,
                               self.unroll_steps)[1]
