"""scikit-learn style wrappers around the two training stages.

``SelectiveVideoEncoder`` is a transformer (stage 1 only); ``SelectiveV2A``
runs both stages and predicts target audio latents from mixed videos.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _validation as val
from .errors import InputError
from .evaluate import SelectivePipeline
from .generator import SamplerConfig
from .metrics import selection_accuracy
from .trainer import TrainConfig, train_stage1, train_stage2
from .world import World


class SelectiveVideoEncoder(TransformerMixin, BaseEstimator):
    """Text-conditioned student encoder distilled from the clean-scene teacher.

    ``fit`` takes training scenes; ``transform`` maps mixed samples (or a
    ``(videos, captions)`` pair) to features ``[n, S, t, D]``.
    """

    def __init__(self, world: World | None = None, n_sup: int = 5, steps: int = 2000, batch_size: int = 8,
                 lr: float = 1e-3, mix_prob: float = 0.75, random_state: int | None = None):
        self.world = world
        self.n_sup = n_sup
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.mix_prob = mix_prob
        self.random_state = random_state

    def _config(self, stage: int, steps: int) -> TrainConfig:
        return TrainConfig(stage=stage, steps=steps, batch_size=self.batch_size, lr=self.lr,
                           mix_prob=self.mix_prob, n_sup=self.n_sup, seed=val.check_random_state(self.random_state))

    def fit(self, X, y=None):
        if self.world is None:
            raise InputError("world must be set before fitting")
        scenes = val.check_scenes(X)
        result = train_stage1(self._config(1, self.steps), self.world, scenes)
        self.student_ = result.student
        self.loss_curve_ = np.asarray(result.losses)
        self.n_features_out_ = self.student_.config.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "student_")
        c = self.student_.config
        videos, captions = val.split_inputs(X)
        videos = val.check_video_batch(videos, c.frames, c.patch, c.width, c.d_patch)
        captions = val.check_captions(captions, len(videos))
        out = []
        for i in range(0, len(videos), 8):
            feat, _ = self.student_.encode(videos[i:i + 8], captions[i:i + 8])
            out.append(feat.data)
        return np.concatenate(out)


class SelectiveV2A(BaseEstimator):
    """Both training stages; ``predict`` samples a target latent per mixed input."""

    def __init__(self, world: World | None = None, n_sup: int = 5, stage1_steps: int = 2000,
                 stage2_steps: int = 3000, batch_size: int = 8, lr: float = 1e-3, gamma: float = 4.5,
                 sampling_steps: int = 25, feature_pool: int = 2048, random_state: int | None = None):
        self.world = world
        self.n_sup = n_sup
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.sampling_steps = sampling_steps
        self.feature_pool = feature_pool
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.world is None:
            raise InputError("world must be set before fitting")
        scenes = val.check_scenes(X)
        seed = val.check_random_state(self.random_state)
        common = dict(batch_size=self.batch_size, lr=self.lr, n_sup=self.n_sup, seed=seed)
        r1 = train_stage1(TrainConfig(stage=1, steps=self.stage1_steps, **common), self.world, scenes)
        r2 = train_stage2(TrainConfig(stage=2, steps=self.stage2_steps, feature_pool=self.feature_pool, **common),
                          self.world, r1.student, scenes)
        r2.generator.store.load_state({**r2.generator.store.state(), **r2.ema.shadow})
        self.pipeline_ = SelectivePipeline(r1.student, r2.generator)
        self.stage1_loss_ = np.asarray(r1.losses)
        self.stage2_loss_ = np.asarray(r2.losses)
        return self

    def predict(self, X, seeds=None):
        check_is_fitted(self, "pipeline_")
        c = self.pipeline_.student.config
        videos, captions = val.split_inputs(X)
        videos = val.check_video_batch(videos, c.frames, c.patch, c.width, c.d_patch)
        captions = val.check_captions(captions, len(videos))
        base = val.check_random_state(self.random_state)
        seeds = list(range(base, base + len(videos))) if seeds is None else list(seeds)
        sampler = SamplerConfig(steps=self.sampling_steps, gamma=self.gamma)
        return self.pipeline_.generate_videos(videos, captions, sampler, seeds)

    def score(self, X, y=None):
        """Selection accuracy on mixed samples (target versus pair template energy)."""
        samples = val.check_mixed(X)
        latents = self.predict(samples)
        templates = self.world.templates()
        return float(np.mean([selection_accuracy(a, s.target.class_id, s.pair.class_id, templates)
                              for a, s in zip(latents, samples) if s.pair is not None]))
