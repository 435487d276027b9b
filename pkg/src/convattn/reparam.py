"""Exact weight transfer from a conv mixer to an attention mixer.

A KxK convolution becomes K^2 attention heads, one per receptive-field
offset. Each head gets zero query/key projections, an identity value
projection, the conv tap as its output projection, and a bias spike that
makes its attention row one-hot on the key at that offset (or on the
all-zero pad slot when the offset leaves the grid, reproducing zero
padding). The result is an ordinary trainable attention layer whose output
matches the convolution to within the softmax tail, ~N*exp(-beta).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .blocks import AttnMixer, ConvMixer, HybridBlock, TokenGrid, conv_mixer_forward, mhsa_forward
from .schedule import SA
from .tensor import ShapeError, Tensor

__all__ = ["ReparamReport", "reparameterize", "verify_equivalence", "switch_block", "DEFAULT_BETA"]

DEFAULT_BETA = 100.0


@dataclass
class ReparamReport:
    """Function-preservation evidence for one conv/attention pair."""

    num_samples: int
    max_abs_diff: float
    per_position_max: list[list[float]]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tolerance

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "max_abs_diff": self.max_abs_diff,
            "per_position_max": self.per_position_max,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def reparameterize(conv: ConvMixer, grid_hw: tuple[int, int], beta: float = DEFAULT_BETA) -> AttnMixer:
    """Build the attention mixer that computes exactly what ``conv`` computes.

    Heads are indexed row-major over the receptive field: head k = i*K + j
    handles offset (i - K//2, j - K//2). All produced weights are trainable;
    the bias spikes stay finite so the table keeps learning after the switch.
    """
    k_size = conv.kernel_size
    if k_size % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got K={k_size}")
    d = conv.dim
    if conv.kernel.shape[3] != d:
        raise ShapeError("reparameterization needs a square conv (d_in == d_out) so W_v can be identity")
    h_t, w_t = grid_hw
    heads = k_size * k_size
    half = k_size // 2
    dtype = conv.kernel.data.dtype

    w_q = np.zeros((heads, d, d), dtype=dtype)
    w_k = np.zeros((heads, d, d), dtype=dtype)
    w_v = np.broadcast_to(np.eye(d, dtype=dtype), (heads, d, d)).copy()
    w_o = np.empty((heads, d, d), dtype=dtype)
    b_rel = np.zeros((heads, 2 * h_t - 1, 2 * w_t - 1), dtype=dtype)
    for i in range(k_size):
        for j in range(k_size):
            head = i * k_size + j
            dr, dc = i - half, j - half
            w_o[head] = conv.kernel.data[i, j]
            b_rel[head, dr + h_t - 1, dc + w_t - 1] = beta
    return AttnMixer(
        Tensor(w_q, requires_grad=True),
        Tensor(w_k, requires_grad=True),
        Tensor(w_v, requires_grad=True),
        Tensor(w_o, requires_grad=True),
        Tensor(b_rel, requires_grad=True),
        Tensor(conv.bias.data.copy(), requires_grad=True),
        (h_t, w_t),
        pad_token_enabled=True,
    )


def verify_equivalence(conv: ConvMixer, attn: AttnMixer, num_samples: int = 100,
                       tolerance: float = 1e-5, seed: int = 0,
                       batch: int = 25) -> ReparamReport:
    """Compare both mixers on random unit-normal token grids.

    Reports the global and per-position max absolute output difference over
    ``num_samples`` grids of the attention mixer's geometry.
    """
    h_t, w_t = attn.grid_hw
    d = attn.dim
    rng = np.random.default_rng(seed)
    per_pos = np.zeros((h_t, w_t))
    done = 0
    while done < num_samples:
        n = min(batch, num_samples - done)
        x = TokenGrid(Tensor(rng.standard_normal((n, h_t, w_t, d))), h_t, w_t)
        diff = np.abs(conv_mixer_forward(x, conv).data.data - mhsa_forward(x, attn).data.data)
        per_pos = np.maximum(per_pos, diff.max(axis=(0, 3)))
        done += n
    return ReparamReport(
        num_samples=num_samples,
        max_abs_diff=float(per_pos.max()),
        per_position_max=[[float(v) for v in row] for row in per_pos],
        tolerance=tolerance,
    )


def switch_block(block: HybridBlock, grid_hw: tuple[int, int], beta: float = DEFAULT_BETA) -> HybridBlock:
    """Swap a conv-mode block to attention mode with function preserved.

    The conv mixer is kept on the block, frozen, for audit; LayerNorm and
    MLP parameters are untouched. Switching an attention-mode block is a
    warned no-op, so the operation is idempotent.
    """
    if block.mode == SA:
        warnings.warn("switch_block called on a block already in attention mode; no-op", stacklevel=2)
        return block
    if block.conv is None:
        raise RuntimeError("conv-mode block has no conv mixer to transfer")
    block.attn = reparameterize(block.conv, grid_hw, beta=beta)
    block.conv.freeze()
    block.mode = SA
    return block
