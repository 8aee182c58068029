"""scikit-learn style facade over the world model.

``fit`` takes a TrajectoryDataset rather than an (X, y) pair: the model learns
from whole trajectories, so only the parameter handling, ``transform`` and
``score`` follow the usual estimator contract.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .envs import TrajectoryDataset
from .errors import ContractError
from .model import ModelConfig, WorldModel
from .training import TrainConfig, mean_trajectory_cosine, train


class StraightenedWorldModel(TransformerMixin, BaseEstimator):
    """Train with ``fit(dataset)``; ``transform(observations)`` returns flat latents."""

    def __init__(
        self,
        lam=0.1,
        variant="agg",
        epochs=20,
        batch_size=32,
        encoder_lr=None,
        predictor_lr=5e-4,
        steps_per_epoch=None,
        patch_size=8,
        latent_channels=8,
        history=3,
        mode="spatial",
        encoder_hidden=32,
        predictor_hidden=256,
        head_dim=32,
        seed=0,
    ):
        self.lam = lam
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.encoder_lr = encoder_lr
        self.predictor_lr = predictor_lr
        self.steps_per_epoch = steps_per_epoch
        self.patch_size = patch_size
        self.latent_channels = latent_channels
        self.history = history
        self.mode = mode
        self.encoder_hidden = encoder_hidden
        self.predictor_hidden = predictor_hidden
        self.head_dim = head_dim
        self.seed = seed

    def _model_config(self):
        return ModelConfig(
            patch_size=self.patch_size,
            latent_channels=self.latent_channels,
            history=self.history,
            mode=self.mode,
            encoder_hidden=self.encoder_hidden,
            predictor_hidden=self.predictor_hidden,
            head_dim=self.head_dim,
        )

    def _train_config(self):
        return TrainConfig(
            lam=self.lam,
            variant=self.variant,
            epochs=self.epochs,
            batch_size=self.batch_size,
            encoder_lr=self.encoder_lr,
            predictor_lr=self.predictor_lr,
            steps_per_epoch=self.steps_per_epoch,
            seed=self.seed,
        )

    def fit(self, X: TrajectoryDataset, y=None):
        if not isinstance(X, TrajectoryDataset):
            raise ContractError("fit expects a TrajectoryDataset")
        model = WorldModel(self._model_config(), seed=self.seed)
        self.model_, self.report_ = train(model, X, self._train_config())
        self.n_features_out_ = self.model_.config.latent_size
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        z = self.model_.encode_numpy(np.asarray(X, dtype=np.float64))
        return z.reshape(len(z), -1)

    def score(self, X: TrajectoryDataset, y=None):
        """Mean straightening cosine over every trajectory of ``X`` (higher is straighter)."""
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return mean_trajectory_cosine(self.model_, X, np.arange(X.n_traj), self.variant, cfg.frameskip, cfg.history)
