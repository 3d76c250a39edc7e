"""Scan orders over sampled (view, joint) token grids and the bidirectional
selective scan that merges a forward and a reversed pass by elementwise sum.

Tokens are stored flat with index t * num_joints + j, so the joint-major
order keeps each view's joint chain contiguous; the view-major order visits
one joint across all views before moving to the next joint. Directional
passes may carry independent input projections but share the state matrix
and feed-through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssm import SelectiveParams, selective_scan

GROUPINGS = ("joint-major", "view-major")


class LengthMismatch(Exception):
    pass


@dataclass(frozen=True)
class ScanOrder:
    forward: np.ndarray  # permutation of token indices
    backward: np.ndarray  # exact reversal of forward
    grouping: str

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=int)
        bwd = np.asarray(self.backward, dtype=int)
        n = fwd.size
        if not np.array_equal(np.sort(fwd), np.arange(n)):
            raise ValueError("forward order is not a permutation")
        if not np.array_equal(bwd, fwd[::-1]):
            raise ValueError("backward order must reverse the forward order")
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}")
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "backward", bwd)

    def __len__(self) -> int:
        return self.forward.size


@dataclass(frozen=True)
class DirectionalParams:
    """Per-direction scan projections with shared A and D."""
    forward: SelectiveParams
    backward: SelectiveParams

    def __post_init__(self):
        if not (np.array_equal(self.forward.A, self.backward.A)
                and np.array_equal(self.forward.D, self.backward.D)):
            raise ValueError("directional passes must share A and D")


def build_gtbs_orders(num_views: int, num_joints: int,
                      grouping: str = "joint-major") -> ScanOrder:
    """Enumerate the (view, joint) grid into a scan order.

    joint-major lists joints 1..J within view 1..T; view-major transposes.
    """
    if num_views < 1 or num_joints < 1:
        raise ValueError("need at least one view and one joint")
    grid = np.arange(num_views * num_joints).reshape(num_views, num_joints)
    if grouping == "joint-major":
        forward = grid.reshape(-1)
    elif grouping == "view-major":
        forward = grid.T.reshape(-1)
    else:
        raise ValueError(f"grouping must be one of {GROUPINGS}")
    return ScanOrder(forward=forward, backward=forward[::-1], grouping=grouping)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def bidirectional_scan(sel, tokens, order: ScanOrder) -> np.ndarray:
    """Sum-merged forward and backward selective scans.

    `sel` is either a single SelectiveParams (shared by both directions) or a
    DirectionalParams pair. Each directional output is un-permuted back to
    original token positions before the merge.
    """
    tokens = np.asarray(tokens, dtype=float)
    if tokens.ndim != 2 or tokens.shape[0] != len(order):
        raise LengthMismatch(
            f"got {tokens.shape} tokens for an order of length {len(order)}")
    if isinstance(sel, DirectionalParams):
        sel_f, sel_b = sel.forward, sel.backward
    else:
        sel_f = sel_b = sel
    out_f = selective_scan(sel_f, tokens[order.forward])
    out_b = selective_scan(sel_b, tokens[order.backward])
    merged = np.empty_like(tokens)
    merged[order.forward] = out_f
    merged[order.backward] = merged[order.backward] + out_b
    return merged
