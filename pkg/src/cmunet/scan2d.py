"""Four-direction 2D selective scan.

A feature map is flattened into four 1D traversals (row-major, reversed
row-major, column-major, reversed column-major), each sequence is run
through the selective scan, and the results are scattered back onto the
grid and summed. Scan and merge are pure index permutations.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import DimensionError
from . import nn
from . import ssm
from . import tensor as T
from .tensor import _make

ROW_FWD, ROW_REV, COL_FWD, COL_REV = range(4)


@lru_cache(maxsize=64)
def direction_perms(h, w):
    """perm[d][j] = flat grid index visited at step j of direction d."""
    l = h * w
    row = np.arange(l)
    col = (np.arange(l) % h) * w + np.arange(l) // h
    perms = np.stack([row, row[::-1], col, col[::-1]])
    inverses = np.argsort(perms, axis=1)
    return perms, inverses


def cross_scan(x):
    """[B,C,H,W] -> [4,B,L,C]: gather each direction's token order."""
    bsz, c, h, w = x.data.shape
    perms, inv = direction_perms(h, w)
    flat = x.data.reshape(bsz, c, h * w)
    seqs = np.stack([np.ascontiguousarray(flat[:, :, p].transpose(0, 2, 1)) for p in perms])

    def backward(g):
        gflat = np.zeros_like(flat)
        for d in range(4):
            gflat += g[d].transpose(0, 2, 1)[:, :, inv[d]]
        return (gflat.reshape(x.data.shape),)

    return _make(seqs, (x,), backward)


def cross_merge(y4, h, w, mode="sum"):
    """[4,B,L,C] -> [B,C,H,W]: inverse-permute each direction and combine."""
    if y4.data.shape[2] != h * w:
        raise DimensionError(f"cross_merge: L={y4.data.shape[2]} != {h}*{w}")
    if mode not in ("sum", "mean"):
        raise DimensionError(f"unknown merge mode {mode!r}")
    perms, inv = direction_perms(h, w)
    _, bsz, _, c = y4.data.shape
    out = np.zeros((bsz, c, h * w), dtype=y4.data.dtype)
    for d in range(4):
        out += y4.data[d].transpose(0, 2, 1)[:, :, inv[d]]
    scale = 0.25 if mode == "mean" else 1.0
    if mode == "mean":
        out *= scale

    def backward(g):
        gflat = g.reshape(bsz, c, h * w) * scale
        gy = np.stack([np.ascontiguousarray(gflat[:, :, p].transpose(0, 2, 1)) for p in perms])
        return (gy,)

    return _make(out.reshape(bsz, c, h, w), (y4,), backward)


class SSM2D(nn.Module):
    """Cross-scan, per-direction selective scan, merge.

    A and the skip weight are shared across directions; each direction keeps
    its own delta/B/C projections unless ``share_directions`` collapses them
    into one set.
    """

    def __init__(self, channels, state_size=16, share_directions=False,
                 merge_mode="sum", dtype=T.REAL32, rng=None):
        super().__init__()
        n_sets = 1 if share_directions else 4
        self.directions = nn.ModuleList(
            [ssm.SsmParams(channels, state_size, dtype=dtype, rng=rng) for _ in range(n_sets)])
        if n_sets == 4:
            for d in range(1, 4):
                self.directions[d].A = self.directions[0].A
                self.directions[d].D = self.directions[0].D
        self.merge_mode = merge_mode
        self.scan_impl = "parallel"

    def params_for(self, d):
        return self.directions[d % len(self.directions)]

    def forward(self, x):
        b, c, h, w = x.data.shape
        if c != self.params_for(0).d_inner:
            raise DimensionError(f"SSM2D: {c} channels vs d_inner {self.params_for(0).d_inner}")
        seqs = cross_scan(x)
        parts = [ssm.project_delta_b_c(seqs.select(0, d), self.params_for(d))
                 for d in range(4)]
        if self.scan_impl == "parallel":
            # the four directions are independent lanes: run them as one
            # batched scan (A and D are shared across directions)
            merged = ssm.ScanInputs(
                x=T.concat([p.x for p in parts], axis=0),
                delta=T.concat([p.delta for p in parts], axis=0),
                Bsel=T.concat([p.Bsel for p in parts], axis=0),
                Csel=T.concat([p.Csel for p in parts], axis=0))
            y = ssm.selective_scan_parallel(merged, self.params_for(0))
            y4 = y.reshape(4, b, h * w, c)
        else:
            y4 = T.stack([ssm.selective_scan_seq(parts[d], self.params_for(d))
                          for d in range(4)], axis=0)
        return cross_merge(y4, h, w, self.merge_mode)


def ssm2d_forward(x, module):
    """Functional entry point over a constructed SSM2D module."""
    return module(x)
