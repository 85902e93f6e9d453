"""Estimator-style wrapper around the training loop and online tracker.

Provides the familiar fit/predict surface (with get_params/set_params via
scikit-learn's BaseEstimator) for notebook use; the CLI and the functional
API in :mod:`training` remain the primary interfaces.
"""

import numpy as np
from sklearn.base import BaseEstimator

from . import tracker, training
from .synthdata import SequenceSample
from .tracker import TrackerConfig
from .training import RunConfig
from .validation import ContractViolation, require


class NeedleTracker(BaseEstimator):
    """Online needle-tip tracker with a scikit-learn-style interface.

    Parameters mirror RunConfig/TrackerConfig fields; `fit` trains on a
    dataset directory (train split) and `predict` streams a sequence from
    its frame-0 annotation.
    """

    def __init__(self, search_size=96, template_size=48, patch=8, channels=64,
                 k=8, capacity=300, depth=1, steps=300, batch=2, clip_len=8,
                 lr=5e-4, seed=0):
        self.search_size = search_size
        self.template_size = template_size
        self.patch = patch
        self.channels = channels
        self.k = k
        self.capacity = capacity
        self.depth = depth
        self.steps = steps
        self.batch = batch
        self.clip_len = clip_len
        self.lr = lr
        self.seed = seed

    def _run_config(self):
        tcfg = TrackerConfig(
            search_size=self.search_size, template_size=self.template_size,
            patch=self.patch, channels=self.channels, k=self.k,
            capacity=self.capacity, depth=self.depth)
        return RunConfig(tracker=tcfg, steps=self.steps, batch=self.batch,
                         clip_len=self.clip_len, lr=self.lr, seed=self.seed)

    def fit(self, dataset_dir, y=None, out_dir=None):
        """Train on the dataset's train split. `out_dir` defaults to
        `<dataset_dir>/_fit`; the checkpoint path lands on checkpoint_."""
        out_dir = out_dir or f"{dataset_dir}/_fit"
        self.checkpoint_ = training.train(self._run_config(), dataset_dir, out_dir)
        self.model_, _, _ = tracker.load_checkpoint(self.checkpoint_)
        return self

    def predict(self, sequence):
        """Track one SequenceSample online; returns (n, 2) tip predictions
        (frame 0 echoes the annotation used for initialization)."""
        if not hasattr(self, "model_"):
            raise ContractViolation("estimator is not fitted; call fit first")
        require(isinstance(sequence, SequenceSample),
                "predict expects a SequenceSample")
        preds, _, _ = training.track_sequence(self.model_, sequence)
        return preds

    def score(self, sequence, y=None):
        """Negative mean pixel error on one sequence (higher is better)."""
        preds = self.predict(sequence)
        return -float(np.mean(np.linalg.norm(preds[1:] - sequence.tips[1:], axis=1)))
