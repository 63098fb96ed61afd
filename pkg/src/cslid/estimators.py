"""scikit-learn style wrappers around the feature frontend and the two LID models.

Classifiers take a list of (frames, 80) log-mel matrices; labels are ``"en"`` /
``"zh"`` (or 0 / 1).  ``score`` is balanced accuracy, the task's headline
metric, rather than plain accuracy.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import LANGUAGES
from .dsp import extract_fbank, resample
from .models import CRNN, MTLModel, CrnnConfig, MtlConfig, joint_loss, lid_logits
from .tensor import Adam, clip_grad_norm, ctc_loss_batch, no_grad, softmax_cross_entropy
from .tensor.core import _softmax
from .validation import check_audio_list, check_feature_list, check_labels, check_positive


class FbankTransformer(TransformerMixin, BaseEstimator):
    """AudioBuffer list -> list of float32 (frames, n_mels) log-mel matrices."""

    def __init__(self, sample_rate_hz=16000, frame_length_ms=25.0, frame_shift_ms=10.0, n_mels=80, low_hz=20.0, high_hz=8000.0):
        self.sample_rate_hz = sample_rate_hz
        self.frame_length_ms = frame_length_ms
        self.frame_shift_ms = frame_shift_ms
        self.n_mels = n_mels
        self.low_hz = low_hz
        self.high_hz = high_hz

    def fit(self, X, y=None):
        check_audio_list(X)
        self.n_features_out_ = self.n_mels
        return self

    def transform(self, X):
        out = []
        for audio in check_audio_list(X):
            audio = resample(audio, self.sample_rate_hz)
            feat = extract_fbank(audio, self.frame_length_ms, self.frame_shift_ms, self.n_mels, self.low_hz, self.high_hz)
            out.append(np.asarray(feat))
        return out


class _LidClassifier(ClassifierMixin, BaseEstimator):
    def _build(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def _trainable(self, model):
        return model.parameters()

    def _batches(self, y, rng):
        idx = rng.permutation(len(y))
        if self.class_balance:
            pools = [idx[y[idx] == k] for k in (0, 1)]
            n = min(len(p) for p in pools)
            if n:
                idx = np.array([pools[k][i] for i in range(n) for k in (0, 1)])
        bs = int(self.batch_size)
        return [idx[i : i + bs] for i in range(0, len(idx), bs)]

    def _loss(self, model, feats, labels, tokens):
        return softmax_cross_entropy(lid_logits(model, feats), labels)

    def fit(self, X, y, tokens=None):
        feats = check_feature_list(X)
        labels = check_labels(y, len(feats))
        check_positive("epochs", self.epochs, integer=True)
        check_positive("lr", self.lr)
        check_positive("batch_size", self.batch_size, integer=True)
        self.classes_ = np.array(LANGUAGES)
        rng = np.random.default_rng(self.seed)
        model = self._build()
        params = self._trainable(model) if tokens is None else model.parameters()
        opt = Adam(params, lr=self.lr)
        self.loss_curve_ = []
        for _ in range(int(self.epochs)):
            model.train()
            for b in self._batches(labels, rng):
                model.zero_grad()
                tb = None if tokens is None else [tokens[i] for i in b]
                loss = self._loss(model, [feats[i] for i in b], labels[b], tb)
                loss.backward()
                clip_grad_norm(params, self.grad_clip)
                opt.step()
                self.loss_curve_.append(loss.item())
        model.eval()
        self.model_ = model
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        feats = check_feature_list(X)
        self.model_.eval()
        out = []
        with no_grad():
            for i in range(0, len(feats), 32):
                out.append(_softmax(lid_logits(self.model_, feats[i : i + 32]).data.astype(np.float64), axis=-1))
        return np.concatenate(out)

    def decision_function(self, X):
        """Probability of ``zh``, the score used for EER."""
        return self.predict_proba(X)[:, 1]

    def predict(self, X):
        proba = self.predict_proba(X)
        # argmax keeps the first index on ties, i.e. en
        return self.classes_[np.argmax(proba, axis=1)]

    def score(self, X, y, sample_weight=None):
        from sklearn.metrics import balanced_accuracy_score

        y_true = self.classes_[check_labels(y, len(y))]
        return float(balanced_accuracy_score(y_true, self.predict(X), sample_weight=sample_weight))


class CRNNClassifier(_LidClassifier):
    def __init__(
        self,
        channels=(16, 32, 64),
        gru_layers=2,
        hidden=64,
        dropout=0.1,
        epochs=10,
        lr=1e-3,
        batch_size=16,
        grad_clip=5.0,
        class_balance=False,
        seed=0,
    ):
        self.channels = channels
        self.gru_layers = gru_layers
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.class_balance = class_balance
        self.seed = seed

    def _build(self):
        n = len(self.channels)
        cfg = CrnnConfig(
            channels=tuple(self.channels),
            strides=((1, 2),) * n,
            gru_layers=self.gru_layers,
            hidden=self.hidden,
            dropout=self.dropout,
        )
        return CRNN(cfg, seed=self.seed)


class MTLClassifier(_LidClassifier):
    """Multitask model used as a language classifier.

    ``fit(X, y)`` trains with the LID loss only; passing ``tokens`` (one list of
    vocabulary indices per sample) switches to the joint CTC + LID loss.
    """

    def __init__(
        self,
        encoder="conformer",
        blocks=2,
        d_model=64,
        heads=4,
        conv_kernel=15,
        lid_hidden=32,
        ctc_vocab_size=2,
        ctc_lambda=0.2,
        lid_alpha=100.0,
        dropout=0.1,
        epochs=10,
        lr=1e-3,
        batch_size=16,
        grad_clip=5.0,
        class_balance=False,
        seed=0,
    ):
        self.encoder = encoder
        self.blocks = blocks
        self.d_model = d_model
        self.heads = heads
        self.conv_kernel = conv_kernel
        self.lid_hidden = lid_hidden
        self.ctc_vocab_size = ctc_vocab_size
        self.ctc_lambda = ctc_lambda
        self.lid_alpha = lid_alpha
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.class_balance = class_balance
        self.seed = seed

    def _build(self):
        cfg = MtlConfig(
            ctc_vocab_size=self.ctc_vocab_size,
            encoder=self.encoder,
            blocks=self.blocks,
            d_model=self.d_model,
            heads=self.heads,
            conv_kernel=self.conv_kernel,
            lid_hidden=self.lid_hidden,
            dropout=self.dropout,
            ctc_lambda=self.ctc_lambda,
            lid_alpha=self.lid_alpha,
        )
        return MTLModel(cfg, seed=self.seed)

    def _trainable(self, model):
        return model.non_ctc_parameters()

    def _loss(self, model, feats, labels, tokens):
        if tokens is None:
            return super()._loss(model, feats, labels, tokens)
        out = model(feats)
        l_lid = softmax_cross_entropy(out.lid_logits, labels)
        l_ctc = ctc_loss_batch(out.ctc_log_probs, tokens, out.lengths)
        return joint_loss(l_ctc, l_lid, self.ctc_lambda, self.lid_alpha)
