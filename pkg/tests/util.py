"""Shared builders for the test modules."""

import numpy as np
import torch

from hsc.conv import ConvDictionary
from hsc.network import NetworkState


def unit_dict(rng, n, c, k, stride=1, dtype=torch.float64):
    w = rng.standard_normal((n, c, k, k))
    w /= np.linalg.norm(w.reshape(n, -1), axis=1)[:, None, None, None]
    return ConvDictionary(torch.from_numpy(w).to(dtype), stride)


def make_state(dicts, lambdas, image_shape):
    momenta = [torch.zeros_like(d.weights) for d in dicts]
    return NetworkState(dicts, momenta, list(lambdas), image_shape)
