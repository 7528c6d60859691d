"""Synthetic embedding generator with ground-truth identities and noise levels."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .core import DataError, Embedding


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 240
    dim_speaker: int = 48
    dim_face: int = 64
    samples_per_identity: int = 24
    noise_low: float = 0.1
    noise_high: float = 1.0
    p_degraded: float = 0.3
    trials: int = 5000
    seed: int = 0
    # shared drift of degraded observations; 0 gives isotropic noise only
    nuisance_shift: float = 4.0
    # benchmark layout
    k_max: int = 2
    segments_per_identity: int = 1
    target_fraction: float = 0.1
    enroll_size: int = 3
    quality_identities: int = 60
    cohort_identities: int = 40
    quality_epochs: int = 30
    top_k: int = 200
    p_tar: float = 0.05

    def __post_init__(self):
        if self.n_identities < 2:
            raise DataError("n_identities must be >= 2")
        if self.trials < 1:
            raise DataError("trials must be >= 1")
        if not (0.0 <= self.noise_low < self.noise_high):
            raise DataError("need 0 <= noise_low < noise_high")
        if not (0.0 <= self.p_degraded <= 1.0):
            raise DataError("p_degraded must lie in [0,1]")

    def dim(self, modality: str) -> int:
        return self.dim_speaker if modality == "speaker" else self.dim_face

    def with_(self, **kw) -> "SynthConfig":
        return replace(self, **kw)

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise DataError(f"unknown config keys {unknown}")
        return cls(**values)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def gen_identities(cfg: SynthConfig, modality: str, rng: np.random.Generator) -> np.ndarray:
    """Prototypes drawn uniformly on the unit sphere, one row per identity."""
    return _unit_rows(rng.standard_normal((cfg.n_identities, cfg.dim(modality))))


def nuisance_direction(cfg: SynthConfig, modality: str, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(cfg.dim(modality))
    return v / np.linalg.norm(v)


def observe(prototype: np.ndarray, sigma: float, rng: np.random.Generator,
            shift=None) -> np.ndarray:
    """``normalize(prototype + sigma * g [+ shift])`` with g standard Gaussian."""
    if sigma == 0.0:
        return prototype.copy()
    v = prototype + sigma * rng.standard_normal(prototype.shape)
    if shift is not None:
        v = v + shift
    return v / np.linalg.norm(v)


def draw_sigma(cfg: SynthConfig, rng: np.random.Generator) -> float:
    if rng.random() < cfg.p_degraded:
        return float(rng.uniform(cfg.noise_low, cfg.noise_high))
    return float(cfg.noise_low)


def gen_observations(cfg: SynthConfig, prototypes: np.ndarray, modality: str,
                     rng: np.random.Generator, identities=None, per_identity=None,
                     nuisance=None) -> list:
    """``samples_per_identity`` noisy observations of each prototype.

    Ids are ``<identity>/<k>``; ``true_noise`` holds the sampled sigma.  With
    a ``nuisance`` unit vector, observations drift along it by
    ``nuisance_shift * (sigma - noise_low)``.
    """
    per_identity = per_identity or cfg.samples_per_identity
    identities = range(prototypes.shape[0]) if identities is None else identities
    out = []
    for i in identities:
        name = identity_name(i)
        for k in range(per_identity):
            sigma = draw_sigma(cfg, rng)
            shift = None
            if nuisance is not None and cfg.nuisance_shift and sigma > cfg.noise_low:
                shift = cfg.nuisance_shift * (sigma - cfg.noise_low) * nuisance
            v = observe(prototypes[i], sigma, rng, shift)
            out.append(Embedding(f"{name}/{k}", modality, v, name, sigma))
    return out


def identity_name(i: int) -> str:
    return f"id{i:05d}"
