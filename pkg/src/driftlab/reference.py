"""Frozen snapshot of the pre-fine-tuning model, serving reference logits
and features with content-addressed caching. Never receives gradients."""
from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from .autograd import Tensor, no_grad
from .model import FeatureCapture, TransformerWeights, forward


class CacheIntegrityError(RuntimeError):
    """A cache fingerprint matched but the stored tokens differ."""


class ReferenceChangedError(RuntimeError):
    """The frozen reference weights were mutated during a run."""


class ReferenceModel:
    def __init__(self, weights: TransformerWeights, cache_enabled: bool = True):
        self.weights = weights.copy()
        self.weights.set_requires_grad(False)
        self._checksum = self.weights.checksum()
        self.cache_enabled = cache_enabled
        self._cache: dict[str, tuple] = {}
        self.forward_count = 0

    @property
    def config(self):
        return self.weights.config

    def checksum(self) -> str:
        return self._checksum

    def verify_checksum(self) -> None:
        if self.weights.checksum() != self._checksum:
            raise ReferenceChangedError("reference weights changed since construction")

    def logits(self, tokens, capture_site: Optional[str] = None):
        """Gradient-free logits [n, V] (and per-layer features for a capture
        site) for one token sequence. Cache hits return the stored arrays."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ValueError("reference logits take a single 1-d token sequence")
        key = None
        if self.cache_enabled:
            h = hashlib.sha256(tokens.tobytes())
            h.update(b"|" + (capture_site or "").encode())
            key = h.hexdigest()
            hit = self._cache.get(key)
            if hit is not None:
                stored_tokens, logits_arr, feats = hit
                if not np.array_equal(stored_tokens, tokens):
                    raise CacheIntegrityError("fingerprint collision with differing tokens")
                return self._wrap(logits_arr, feats)
        capture = FeatureCapture(capture_site) if capture_site else None
        with no_grad():
            out = forward(self.weights, tokens, capture=capture)
        self.forward_count += 1
        logits_arr = out.data
        logits_arr.flags.writeable = False
        feats = None
        if capture is not None:
            feats = tuple((t.data[0] if t.data.ndim == 3 else t.data) for t in capture.tensors)
            for f in feats:
                f.flags.writeable = False
        if key is not None:
            self._cache[key] = (tokens.copy(), logits_arr, feats)
        return self._wrap(logits_arr, feats)

    @staticmethod
    def _wrap(logits_arr, feats):
        logits = Tensor(logits_arr)
        features = None if feats is None else [Tensor(f) for f in feats]
        return logits, features
