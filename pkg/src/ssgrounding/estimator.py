"""scikit-learn style estimator wrapping the grounding model and its training loop."""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .grounding import (
    DEFAULT_RECALL_THRESHOLDS,
    MetricsReport,
    batch_proposal_logits,
    interval_histogram,
    interval_iou_many,
    mean_pair_similarity,
    nms_indices,
    nms_order,
    proposal_bounds,
    rank_n_at_m_rate,
    recall_high_related,
)
from .io import Checkpoint
from .model import ModelSpec, active_keys, encode, init_params, loss_and_grads, pooled_video_embeddings
from .numerics import sigmoid
from .optim import Adam, ReduceLROnPlateau
from .validation import check_positive, check_samples

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """A loss or gradient became NaN/Inf during training."""


class SupportSetGrounder(BaseEstimator):
    """Proposal-scoring video grounder trained with optional cross-supervision.

    ``mode`` picks the auxiliary supervision: ``"baseline"`` (grounding loss
    only), ``"gtc"`` (GT-clip contrastive + caption) or ``"ss"`` (support-set
    contrastive + caption, using ``construction`` and ``pooling``). ``steps``
    is the total number of optimizer steps; with ``warm_start=True`` a second
    call to :meth:`fit` continues from the current step.
    """

    def __init__(self, mode="ss", construction="V-SS", pooling="CA", use_contrast=True,
                 use_caption=True, tau=0.1, lambda1=0.1, lambda2=0.1, D=128, D_l=32,
                 t_max=16, kernel_width=3, normalize_embeddings=True, batch_size=32,
                 steps=2000, learning_rate=1e-3, plateau_factor=0.5, plateau_patience=100,
                 val_every=25, eval_every=0, nms_threshold=0.5, min_iou=0.5, max_iou=1.0,
                 grounder_scale=10.0, vocab_size=None, random_state=0, warm_start=False,
                 verbose=0):
        self.mode = mode
        self.construction = construction
        self.pooling = pooling
        self.use_contrast = use_contrast
        self.use_caption = use_caption
        self.tau = tau
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.D = D
        self.D_l = D_l
        self.t_max = t_max
        self.kernel_width = kernel_width
        self.normalize_embeddings = normalize_embeddings
        self.batch_size = batch_size
        self.steps = steps
        self.learning_rate = learning_rate
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.val_every = val_every
        self.eval_every = eval_every
        self.nms_threshold = nms_threshold
        self.min_iou = min_iou
        self.max_iou = max_iou
        self.grounder_scale = grounder_scale
        self.vocab_size = vocab_size
        self.random_state = random_state
        self.warm_start = warm_start
        self.verbose = verbose

    # -- setup ---------------------------------------------------------------

    def _make_spec(self, D_v: int, vocab_size: int) -> ModelSpec:
        check_positive(self.tau, "tau")
        check_positive(self.lambda1, "lambda1", strict=False)
        check_positive(self.lambda2, "lambda2", strict=False)
        check_positive(self.batch_size, "batch_size")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        return ModelSpec(
            D=self.D, D_v=D_v, D_l=self.D_l, vocab_size=vocab_size, t_max=self.t_max,
            mode=self.mode, construction=self.construction, pooling=self.pooling,
            kernel_width=self.kernel_width, use_contrast=self.use_contrast,
            use_caption=self.use_caption, normalize=self.normalize_embeddings, tau=self.tau,
            lambda1=self.lambda1, lambda2=self.lambda2, min_iou=self.min_iou, max_iou=self.max_iou,
            grounder_scale=self.grounder_scale)

    def _initialize(self, samples: list) -> None:
        D_v = samples[0].features.shape[1]
        vocab = self.vocab_size or int(max(s.tokens.max() for s in samples)) + 1
        self.spec_ = self._make_spec(D_v, vocab)
        self.params_ = init_params(self.spec_, self.random_state)
        self.optimizer_ = Adam(self.learning_rate)
        self.scheduler_ = ReduceLROnPlateau(self.optimizer_, self.plateau_factor, self.plateau_patience)
        self.step_ = 0
        self.history_ = []
        self.batch_rng_ = np.random.default_rng([self.random_state, 11])
        self.perm_ = np.zeros(0, dtype=int)
        self.cursor_ = 0

    def _next_batch(self, n: int) -> np.ndarray:
        B = min(self.batch_size, n)
        if self.cursor_ + B > self.perm_.size:
            self.perm_ = self.batch_rng_.permutation(n)
            self.cursor_ = 0
        idx = self.perm_[self.cursor_:self.cursor_ + B]
        self.cursor_ += B
        return idx

    # -- training ------------------------------------------------------------

    def fit(self, samples, y=None, validation=None,
            callback: Optional[Callable[["SupportSetGrounder", dict], None]] = None):
        """Train for ``steps`` optimizer steps on ``samples``.

        ``validation`` drives the plateau schedule (every ``val_every`` steps)
        and, when ``eval_every > 0``, a Rank1@0.5 trace in ``history_``.
        """
        samples = check_samples(samples)
        if not (self.warm_start and hasattr(self, "params_")):
            self._initialize(samples)
        check_samples(samples, self.spec_.D_v, self.spec_.vocab_size)
        if validation is not None:
            validation = check_samples(validation, self.spec_.D_v, self.spec_.vocab_size, "validation")

        keys = set(active_keys(self.spec_))
        while self.step_ < self.steps:
            batch = [samples[i] for i in self._next_batch(len(samples))]
            bundle, comps = loss_and_grads(self.params_, batch, self.spec_)
            grads = {k: g for k, g in bundle.grads.items() if k in keys}
            if not np.isfinite(bundle.value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(
                    f"non-finite loss at step {self.step_ + 1}: components {comps}, "
                    f"lr {self.optimizer_.lr:g}")
            self.optimizer_.step(self.params_, grads)
            self.step_ += 1
            record = {"step": self.step_, "lr": self.optimizer_.lr, **comps}
            if validation is not None and self.val_every and self.step_ % self.val_every == 0:
                record["val_loss"] = self.validation_loss(validation)
                self.scheduler_.step(record["val_loss"], self.step_)
            if validation is not None and self.eval_every and self.step_ % self.eval_every == 0:
                record["val_rank1@0.5"] = self.rank1_rate(validation, 0.5)
            self.history_.append(record)
            if self.verbose and self.step_ % max(1, self.verbose) == 0:
                logger.info("step %d total %.5f %s", self.step_, comps["total"],
                            {k: round(v, 5) for k, v in record.items() if k.startswith("val")})
            if callback is not None:
                callback(self, record)
        return self

    def validation_loss(self, samples) -> float:
        """Mean total loss over consecutive ``batch_size`` chunks of ``samples``."""
        check_is_fitted(self, "params_")
        values = []
        for start in range(0, len(samples), self.batch_size):
            chunk = samples[start:start + self.batch_size]
            bundle, _ = loss_and_grads(self.params_, chunk, self.spec_, with_grads=False)
            values.append(bundle.value)
        return float(np.mean(values))

    # -- inference -----------------------------------------------------------

    def decision_function(self, samples) -> list:
        """Sigmoid proposal scores per sample, ordered like ``proposal_bounds(T)``."""
        check_is_fitted(self, "params_")
        samples = check_samples(samples, self.spec_.D_v, self.spec_.vocab_size)
        X_list, Y, _ = encode(self.params_, samples, self.spec_.normalize)
        return [sigmoid(l) for l in batch_proposal_logits(X_list, Y, self.params_, self.spec_.grounder_scale)]

    def predict(self, samples, top_k: Optional[int] = None) -> list:
        """Ranked ``(start_s, end_s, score)`` spans per sample after NMS."""
        samples = check_samples(samples)
        out = []
        for s, scores in zip(samples, self.decision_function(samples)):
            starts, ends = proposal_bounds(s.T)
            st = starts * s.clip_duration_s
            en = (ends + 1) * s.clip_duration_s
            keep = nms_indices(st, en, scores, self.nms_threshold, top_k)
            out.append([(float(st[k]), float(en[k]), float(scores[k])) for k in keep])
        return out

    def rank1_rate(self, samples, m: float = 0.5) -> float:
        """Rank1@m without the full NMS pass (the top span survives NMS unchanged)."""
        hits = []
        for s, scores in zip(samples, self.decision_function(samples)):
            starts, ends = proposal_bounds(s.T)
            top = nms_order(starts, ends + 1, scores)[0]
            t_s, t_e = s.gt_seconds
            d = s.clip_duration_s
            iou = interval_iou_many([starts[top] * d], [(ends[top] + 1) * d], t_s, t_e)[0]
            hits.append(iou >= m)
        return float(np.mean(hits))

    def score(self, samples, y=None) -> float:
        """Rank1@0.5 on ``samples``."""
        return self.rank1_rate(check_samples(samples), 0.5)

    def evaluate(self, samples, ns: Sequence[int] = (1, 5), ms: Sequence[float] = (0.5, 0.7),
                 thresholds=DEFAULT_RECALL_THRESHOLDS, bins: int = 10) -> MetricsReport:
        samples = check_samples(samples)
        ranked = self.predict(samples, top_k=max(ns))
        gts = [s.gt_seconds for s in samples]
        rank = {(n, m): rank_n_at_m_rate(ranked, gts, n, m) for n in ns for m in ms}
        X_list, Y, _ = encode(self.params_, samples, self.spec_.normalize)
        video_sims = [mean_pair_similarity(x, y) for x, y in zip(X_list, Y)]
        gt_sims = [mean_pair_similarity(x, y, s.gt) for x, y, s in zip(X_list, Y, samples)]
        recall = {"Video": recall_high_related(video_sims, thresholds),
                  "GT": recall_high_related(gt_sims, thresholds)}
        # histogram of top-1 spans that count as a hit at the loosest m
        hit = [interval_iou_many([r[0][0]], [r[0][1]], *g)[0] >= min(ms) for r, g in zip(ranked, gts)]
        spans = [r[0][:2] for r, h in zip(ranked, hit) if h]
        durs = [s.duration_s for s, h in zip(samples, hit) if h]
        hist, _ = interval_histogram(spans, durs, bins)
        return MetricsReport(rank=rank, recall=recall, histogram=hist)

    # -- embeddings ----------------------------------------------------------

    def transform(self, samples):
        """Support-pooled video embeddings, one row per sample."""
        check_is_fitted(self, "params_")
        samples = check_samples(samples, self.spec_.D_v, self.spec_.vocab_size)
        W, _ = pooled_video_embeddings(self.params_, samples, self.spec_)
        return W

    def similarity_matrix(self, samples) -> np.ndarray:
        """Entry (i, j): pooled video i against text j."""
        check_is_fitted(self, "params_")
        samples = check_samples(samples, self.spec_.D_v, self.spec_.vocab_size)
        W, Y = pooled_video_embeddings(self.params_, samples, self.spec_)
        return W @ Y.T

    def retrieval_accuracy(self, samples) -> float:
        """Text-to-video accuracy: each text should pick its own video by argmax similarity."""
        M = self.similarity_matrix(samples)
        return float(np.mean(np.argmax(M, axis=0) == np.arange(M.shape[1])))

    def clip_text_similarities(self, samples):
        """Per-sample clip cosines to the paired text, as a list of (T,) arrays."""
        check_is_fitted(self, "params_")
        samples = check_samples(samples, self.spec_.D_v, self.spec_.vocab_size)
        X_list, Y, _ = encode(self.params_, samples, self.spec_.normalize)
        out = []
        for x, y in zip(X_list, Y):
            xn = x / np.linalg.norm(x, axis=1, keepdims=True)
            out.append(xn @ (y / np.linalg.norm(y)))
        return out

    # -- persistence ---------------------------------------------------------

    def to_checkpoint(self, config_hash: Optional[str] = None) -> Checkpoint:
        """Everything needed to resume training bit-exactly."""
        check_is_fitted(self, "params_")
        spec = {k: (v.value if hasattr(v, "value") else v) for k, v in self.spec_.__dict__.items()}
        meta = {
            "config_hash": config_hash,
            "estimator": self.get_params(),
            "spec": spec,
            "step": self.step_,
            "cursor": self.cursor_,
            "adam": {"lr": self.optimizer_.lr, "t": self.optimizer_.t},
            "scheduler": self.scheduler_.state_dict(),
            "rng": self.batch_rng_.bit_generator.state,
            "history": self.history_,
        }
        return Checkpoint(
            params={k: v.copy() for k, v in self.params_.items()},
            adam_m={k: v.copy() for k, v in self.optimizer_.m.items()},
            adam_v={k: v.copy() for k, v in self.optimizer_.v.items()},
            meta=meta, perm=self.perm_.copy())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **overrides) -> "SupportSetGrounder":
        """Rebuild a fitted estimator; ``overrides`` (e.g. ``steps``) replace saved hyperparameters."""
        est = cls(**{**ckpt.meta["estimator"], **overrides})
        est.spec_ = ModelSpec(**ckpt.meta["spec"])
        est.params_ = {k: np.array(v) for k, v in ckpt.params.items()}
        est.optimizer_ = Adam(est.learning_rate)
        est.optimizer_.load_state_dict({**ckpt.meta["adam"], "m": ckpt.adam_m, "v": ckpt.adam_v})
        est.scheduler_ = ReduceLROnPlateau(est.optimizer_, est.plateau_factor, est.plateau_patience)
        est.scheduler_.load_state_dict(ckpt.meta["scheduler"])
        est.step_ = int(ckpt.meta["step"])
        est.cursor_ = int(ckpt.meta["cursor"])
        est.perm_ = np.array(ckpt.perm, dtype=np.int64)
        est.batch_rng_ = np.random.default_rng()
        est.batch_rng_.bit_generator.state = ckpt.meta["rng"]
        est.history_ = list(ckpt.meta["history"])
        est.warm_start = True
        return est
