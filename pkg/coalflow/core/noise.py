"""Seed streams and site-time indexed noise fields.

Every random quantity in coalflow is a deterministic function of a 64-bit
seed and a tuple of non-negative integer keys, through numpy's SeedSequence
spawn keys. Replica r of a study draws from key (r, ...), so studies are
reproducible from (config, seed) for any number of worker processes.
"""
from collections import OrderedDict
from typing import Optional

import numpy as np

from coalflow.core.config import settings

# spawn keys must be non-negative; rows and sites may be negative
_OFFSET = 2 ** 40

# stream tags, so that independent concerns of one replica never share draws
STREAM_FIELD = 1
STREAM_AUX_FIELD = 2
STREAM_PATH = 3
STREAM_BRIDGE = 4
STREAM_WALK = 5


def seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))


def generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *key))


class SiteField:
    """One uniform draw per (time row, site), for every integer row and site.

    The plane is tiled by blocks of ``block_rows`` x ``block_sites``; block
    (b, c) is generated from key + (b, c) alone, so the value at a site-time
    never depends on which other site-times were requested, in which order,
    or how far a simulation runs.
    """

    def __init__(self, seed: int, key: tuple = (), block_rows: Optional[int] = None,
                 block_sites: int = 256, cache_blocks: int = 32):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.block_rows = int(block_rows or settings.NOISE_BLOCK_ROWS)
        self.block_sites = int(block_sites)
        self._cache: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
        self._cache_blocks = cache_blocks

    def _block(self, b: int, c: int) -> np.ndarray:
        block = self._cache.get((b, c))
        if block is None:
            rng = generator(self.seed, *self.key, b + _OFFSET, c + _OFFSET)
            block = rng.random((self.block_rows, self.block_sites))
            self._cache[(b, c)] = block
            if len(self._cache) > self._cache_blocks:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end((b, c))
        return block

    def at(self, k: int, sites) -> np.ndarray:
        """Uniforms at time row k for an integer array of sites"""
        sites = np.asarray(sites, dtype=np.int64)
        b, r = divmod(int(k), self.block_rows)
        cols, offs = np.divmod(sites, self.block_sites)
        out = np.empty(sites.shape, dtype=float)
        for c in np.unique(cols):
            sel = cols == c
            out[sel] = self._block(b, int(c))[r, offs[sel]]
        return out
