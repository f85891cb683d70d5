"""scikit-learn style front end for the diffusion model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from . import diffusion
from .unet import DEFAULT_ATTENTION_LAYOUT, HookRegistry, UNetConfig


def check_images(X, channels: int | None = None, image_size: int | None = None) -> np.ndarray:
    """Validate an image batch [N, C, H, W] of finite float32 values."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, C, H, W], got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[2:]}")
    return X


class DiffusionDenoiser(BaseEstimator):
    """Noise-prediction U-Net trained with the DDPM objective.

    ``fit`` learns from clean images in [-1, 1]; ``predict`` returns the noise
    estimate for noisy inputs at given timesteps; ``score`` is the prediction
    accuracy averaged over ``score_timesteps``.
    """

    def __init__(
        self,
        image_size: int = 32,
        channels: int = 3,
        base_channels: int = 32,
        hidden_dim: int = 64,
        attention_layout=DEFAULT_ATTENTION_LAYOUT,
        time_embed_dim: int = 64,
        attn_resolution: int = 8,
        timesteps: int = 1000,
        steps: int = 2000,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        score_timesteps=(100, 300, 600, 900),
        random_state: int = 0,
    ):
        self.image_size = image_size
        self.channels = channels
        self.base_channels = base_channels
        self.hidden_dim = hidden_dim
        self.attention_layout = attention_layout
        self.time_embed_dim = time_embed_dim
        self.attn_resolution = attn_resolution
        self.timesteps = timesteps
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.score_timesteps = score_timesteps
        self.random_state = random_state

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            image_size=self.image_size,
            channels=self.channels,
            base_channels=self.base_channels,
            hidden_dim=self.hidden_dim,
            attention_layout=self.attention_layout,
            time_embed_dim=self.time_embed_dim,
            attn_resolution=self.attn_resolution,
        )

    def fit(self, X, y=None):
        X = check_images(X, self.channels, self.image_size)
        self.schedule_ = diffusion.cosine_schedule(self.timesteps)
        self.model_, self.loss_curve_ = diffusion.train(
            X,
            self.unet_config(),
            self.schedule_,
            steps=self.steps,
            lr=self.learning_rate,
            seed=self.random_state,
            batch_size=self.batch_size,
        )
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X, t, hooks: HookRegistry | None = None, intervention=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.channels, self.image_size)
        t = self.schedule_.check_t(np.broadcast_to(np.asarray(t), (len(X),)))
        return self.model_.predict(X, t, hooks=hooks, intervention=intervention)

    def sample(self, n: int, random_state: int | None = None, hooks: HookRegistry | None = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        seed = self.random_state if random_state is None else random_state
        return diffusion.p_sample_loop(self.model_, self.schedule_, n, seed=seed, hooks=hooks)

    def score(self, X, y=None, n: int = 64) -> float:
        check_is_fitted(self, "model_")
        X = check_images(X, self.channels, self.image_size)
        ts = diffusion.scale_timesteps(self.score_timesteps, self.timesteps)
        return float(
            np.mean(
                [
                    diffusion.prediction_accuracy(self.model_, X, t, n, self.schedule_, seed=self.random_state)
                    for t in ts
                ]
            )
        )
