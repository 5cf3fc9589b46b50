"""Synthetic visual features, soft anatomy tokens and FiLM modulation."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError
from .params import ParamStore
from .volume import Volume3, smooth_array

N_FEATURES = 8
HU_SCALE = 100.0
FEATURE_NAMES = (
    "hu",
    "highpass_s1",
    "highpass_s2",
    "highpass_s4",
    "gradmag_s1",
    "gradmag_s2",
    "gradmag_s4",
    "local_std",
)


def feature_bank(ct: Volume3) -> Volume3:
    """Fixed filter bank over a CT volume, scaled to roughly unit range.

    Channels: raw HU, HU minus its Gaussian blur at three scales, gradient
    magnitude of the blurred volume at the same scales, local standard
    deviation.
    """
    hu = ct.scalar().astype(np.float64)
    spacing = ct.spacing
    chans = [hu]
    blurred = {s: smooth_array(hu, s) for s in (1.0, 2.0, 4.0)}
    for s in (1.0, 2.0, 4.0):
        chans.append(hu - blurred[s])
    for s in (1.0, 2.0, 4.0):
        grads = np.gradient(blurred[s], *spacing)
        chans.append(np.sqrt(sum(g * g for g in grads)))
    mean2 = smooth_array(hu * hu, 2.0)
    chans.append(np.sqrt(np.maximum(mean2 - blurred[2.0] ** 2, 0.0)))
    return Volume3(np.stack(chans, axis=-1) / HU_SCALE, spacing)


def init_anatomy_params(store: ParamStore, rng, n_organs=4, d_e=16, channels=N_FEATURES):
    store.add("anat.organ_emb", rng.standard_normal((n_organs, d_e)))
    store.add("anat.phi_w", rng.standard_normal((channels, d_e)) / math.sqrt(d_e))
    store.add("anat.phi_b", np.zeros(channels))
    store.add("anat.psi_w1", rng.standard_normal((2 * channels, channels)) / math.sqrt(channels))
    store.add("anat.psi_b1", np.zeros(2 * channels))
    # zero output layer: modulation starts at gamma = 1, beta = 0
    store.add("anat.psi_w2", np.zeros((2 * channels, 2 * channels)))
    store.add("anat.psi_b2", np.zeros(2 * channels))
    return store


def anatomy_token(soft_maps: torch.Tensor, store) -> torch.Tensor:
    """Per-voxel organ token, shape ``(*spatial, C)``.

    ``soft_maps`` has shape ``(K_o, *spatial)`` aligned with the organ table.
    """
    emb = store["anat.organ_emb"]
    if soft_maps.shape[0] != emb.shape[0]:
        raise ShapeError(f"{soft_maps.shape[0]} soft maps for {emb.shape[0]} organ embeddings")
    mixed = torch.tensordot(soft_maps.movedim(0, -1), emb, dims=([-1], [0]))
    return mixed @ store["anat.phi_w"].T + store["anat.phi_b"]


def film_params(e_hat: torch.Tensor, store):
    hidden = F.gelu(e_hat @ store["anat.psi_w1"].T + store["anat.psi_b1"])
    out = hidden @ store["anat.psi_w2"].T + store["anat.psi_b2"]
    c = out.shape[-1] // 2
    return 1.0 + out[..., :c], out[..., c:]


def film_modulate(features: torch.Tensor, e_hat: torch.Tensor, store) -> torch.Tensor:
    """Channel-wise affine ``gamma(x) * F(x) + beta(x)`` with (gamma, beta) from the token."""
    if features.shape != e_hat.shape:
        raise ShapeError(f"features {tuple(features.shape)} and token {tuple(e_hat.shape)} differ")
    gamma, beta = film_params(e_hat, store)
    return gamma * features + beta


def modulated_features(features, soft_maps, store):
    return film_modulate(features, anatomy_token(soft_maps, store), store)
