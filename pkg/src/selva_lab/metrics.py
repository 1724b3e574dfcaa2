"""Distributional and selective-generation metrics over toy audio latents.

A seeded :class:`ToyEmbedder` stands in for pretrained audio classifiers and
embedders; it is the fixed judge shared by every evaluated model.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist

from . import rng as rngmod
from .errors import InputError, NumericError, ShapeError
from .world import World, resample_nearest

KL_DIRECTION = "sum(ref * log(ref / gen))"


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class ToyEmbedder:
    """Fixed random projection for FAD/KAD plus template correlators for class probabilities."""

    def __init__(self, world: World, d_emb: int = 16, temperature: float = 0.1, seed: int | None = None):
        cfg = world.config
        self.templates = world.templates()  # [K, d_audio]
        self.frames = cfg.frames
        self.temperature = temperature
        gen = rngmod.stream(world.seed if seed is None else seed, "evaluator.embedder")
        d_in = cfg.audio_len * cfg.d_audio
        self.projection = gen.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_emb))

    def embed(self, latents) -> np.ndarray:
        x = np.asarray(latents, dtype=np.float64)
        return x.reshape(x.shape[0], -1) @ self.projection

    def class_energy(self, latents) -> np.ndarray:
        """``[n, K]`` energy of each latent projected on each class template."""
        x = np.asarray(latents, dtype=np.float64)
        return ((x @ self.templates.T) ** 2).sum(axis=-2)

    def class_scores(self, latents) -> np.ndarray:
        x = np.asarray(latents, dtype=np.float64)
        amp = np.sqrt(self.class_energy(x))
        norm = np.sqrt((x ** 2).sum(axis=(-2, -1)))[..., None]
        return np.divide(amp, norm, out=np.zeros_like(amp), where=norm > 0)

    def pseudo_probs(self, latents) -> np.ndarray:
        z = self.class_scores(latents) / self.temperature
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)


# -- distribution distances ---------------------------------------------------------

def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise NumericError("covariance square root failed: matrix is not positive semidefinite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(ref, gen, shrinkage: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets.

    ``Tr((S_r S_g)^(1/2))`` is evaluated as ``Tr((S_r^(1/2) S_g S_r^(1/2))^(1/2))``
    so only symmetric square roots are needed.  ``shrinkage`` adds a multiple of
    the mean variance to each diagonal.
    """
    ref, gen = _as_2d(ref), _as_2d(gen)
    if ref.shape[1] != gen.shape[1]:
        raise ShapeError("embedding sets have different widths")
    d = ref.shape[1]
    if min(len(ref), len(gen)) < d + 1:
        raise InputError(f"need at least {d + 1} samples per set for a {d}-dim covariance")
    mu_r, mu_g = ref.mean(axis=0), gen.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(ref, rowvar=False))
    cov_g = np.atleast_2d(np.cov(gen, rowvar=False))
    if shrinkage:
        cov_r = cov_r + shrinkage * np.trace(cov_r) / d * np.eye(d)
        cov_g = cov_g + shrinkage * np.trace(cov_g) / d * np.eye(d)
    root_r = _sqrtm_psd(cov_r)
    cross = _sqrtm_psd(root_r @ cov_g @ root_r)
    value = float(np.sum((mu_r - mu_g) ** 2) + np.trace(cov_r) + np.trace(cov_g) - 2.0 * np.trace(cross))
    if not np.isfinite(value):
        raise NumericError("non-finite Fréchet distance")
    return max(value, 0.0)


def median_bandwidth(ref, gen) -> float:
    """Median of within-set pairwise distances, pooled over both sets (symmetric in the arguments)."""
    ref, gen = _as_2d(ref), _as_2d(gen)
    dists = np.concatenate([pdist(ref), pdist(gen)])
    med = float(np.median(dists)) if dists.size else 0.0
    return med if med > 0 else 1.0


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kernel_distance(ref, gen, bandwidth: float | None = None, biased: bool = False) -> float:
    """MMD^2 with the RBF kernel ``exp(-|x-y|^2 / (2 sigma^2))``; unbiased unless ``biased``."""
    ref, gen = _as_2d(ref), _as_2d(gen)
    n, m = len(ref), len(gen)
    if n < 2 or m < 2:
        raise InputError("kernel distance needs at least two samples per set")
    sigma = median_bandwidth(ref, gen) if bandwidth is None else float(bandwidth)
    if sigma <= 0:
        raise InputError("bandwidth must be positive")
    scale = -1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(_sq_dists(ref, ref) * scale)
    kyy = np.exp(_sq_dists(gen, gen) * scale)
    kxy = np.exp(_sq_dists(ref, gen) * scale)
    if biased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(xx + yy - 2.0 * kxy.mean())


# -- classifier-based scores -----------------------------------------------------------

def _check_simplex(p: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise InputError("probability rows must be nonnegative and sum to 1")


def inception_score(probs) -> float:
    """``exp(mean_i KL(p_i || mean_j p_j))``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError("inception_score expects an [n, K] array")
    _check_simplex(p)
    # extended precision keeps exp(log K) == K for one-hot rows
    q = p.astype(np.longdouble)
    marginal = q.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(np.where(q > 0, q, 1) / marginal), 0)
    # Gibbs: the mean KL is nonnegative; clamp round-off so IS >= 1 holds
    return float(np.exp(max(terms.sum(axis=1).mean(), 0)))


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    p = p + eps
    return p / p.sum(axis=-1, keepdims=True)


def kl_to_reference(gen_probs, ref_probs, eps: float = 1e-8) -> float:
    """``sum(ref * log(ref / gen))`` after adding ``eps`` to both and renormalizing."""
    g, r = np.asarray(gen_probs, dtype=np.float64), np.asarray(ref_probs, dtype=np.float64)
    if g.shape != r.shape:
        raise ShapeError("probability vectors differ in shape")
    _check_simplex(g)
    _check_simplex(r)
    g, r = _smooth(g, eps), _smooth(r, eps)
    return float(max(np.sum(r * np.log(r / g), axis=-1).mean(), 0.0))


# -- per-sample selective metrics --------------------------------------------------------

def similarity_scores(gen, target_class: int, target_envelope, embedder: ToyEmbedder) -> tuple[float, float]:
    """``(text_sim, video_sim)`` of one generated latent ``[T_a, d_audio]``.

    text: cosine of the per-class amplitude vector with the one-hot of the named class.
    video: cosine of the latent's per-frame norm with the target envelope resampled to ``T_a``.
    """
    gen = np.asarray(gen, dtype=np.float64)
    amp = np.sqrt(embedder.class_energy(gen[None])[0])
    onehot = np.zeros_like(amp)
    onehot[target_class] = 1.0
    env = resample_nearest(np.asarray(target_envelope, dtype=np.float64), gen.shape[0])
    return _cosine(amp, onehot), _cosine(np.linalg.norm(gen, axis=1), env)


def desync_analog(gen, target_envelope, template, max_lag: int | None = None) -> tuple[float, bool]:
    """Lag (in video frames) of the circular cross-correlation peak between envelopes.

    The generated envelope is the projection of ``gen`` on ``template``; both
    envelopes are brought to the latent length.  Ties go to the smaller lag.
    Returns ``(offset, flagged)``; a constant envelope yields ``(max_lag, True)``.
    """
    gen = np.asarray(gen, dtype=np.float64)
    length = gen.shape[0]
    env_t = np.asarray(target_envelope, dtype=np.float64)
    frames_per_step = len(env_t) / length
    env_t = resample_nearest(env_t, length)
    env_g = gen @ np.asarray(template, dtype=np.float64)
    max_lag = length // 4 if max_lag is None else max_lag
    sg, st = env_g.std(), env_t.std()
    if sg < 1e-12 or st < 1e-12:
        return float(max_lag * frames_per_step), True
    zg, zt = (env_g - env_g.mean()) / sg, (env_t - env_t.mean()) / st
    lags = np.arange(-max_lag, max_lag + 1)
    cc = np.array([np.mean(zg * np.roll(zt, int(lag))) for lag in lags])
    best = cc.max()
    ties = lags[np.abs(cc - best) <= 1e-12 * max(1.0, abs(best))]
    lag = ties[np.argmin(np.abs(ties))]
    return float(abs(lag) * frames_per_step), False


def selection_accuracy(gen, target_class: int, pair_class: int, templates) -> int:
    """1 iff the target template captures strictly more energy than the pair template."""
    if target_class == pair_class:
        raise InputError("target and pair classes must differ")
    t = np.asarray(templates, dtype=np.float64)
    proj = np.asarray(gen, dtype=np.float64) @ t[[target_class, pair_class]].T
    energy = (proj ** 2).sum(axis=0)
    return int(energy[0] > energy[1])
