"""Gradient compressors (top-k, sign, per-layer low-rank) and the
plug-and-play stacking that runs the look-back gate on compressed payloads.

Every payload knows its exact wire cost and can densify itself back to a
flat length-M vector. When stacking, the gate compares the densified
compressed gradient against the densified compressed look-back gradient;
a passing round costs one scalar instead of the compressor's payload.
"""

from dataclasses import dataclass

import numpy as np

from . import lbgm
from .fl_core import run_with_policy
from .numerics import ParamVector

FLOAT_BITS = lbgm.FLOAT_BITS


@dataclass(frozen=True)
class SparsePayload:
    indices: np.ndarray  # strictly increasing, int64
    values: np.ndarray
    dim: int

    @property
    def cost_floats(self) -> float:
        return 2 * len(self.indices)  # value + index pairs

    @property
    def cost_bits(self) -> float:
        return 2 * FLOAT_BITS * len(self.indices)

    def densify(self) -> ParamVector:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class SignPayload:
    bits: np.ndarray  # packed bits, 1 => +1, 0 => -1
    dim: int

    @property
    def cost_floats(self) -> float:
        return self.dim / FLOAT_BITS

    @property
    def cost_bits(self) -> float:
        return self.dim

    def densify(self) -> ParamVector:
        signs = np.unpackbits(self.bits)[: self.dim]
        return np.where(signs == 1, 1.0, -1.0)


@dataclass(frozen=True)
class LowRankPayload:
    # per block: ("lowrank", U, V) with block ~= U @ V.T, or ("dense", values)
    blocks: tuple
    shapes: tuple  # (rows, cols) per block, matching the model's layout
    dim: int

    @property
    def cost_floats(self) -> float:
        total = 0
        for kind, *parts in self.blocks:
            if kind == "lowrank":
                u, v = parts
                total += u.size + v.size
            else:
                total += parts[0].size
        return total

    @property
    def cost_bits(self) -> float:
        return FLOAT_BITS * self.cost_floats

    def densify(self) -> ParamVector:
        flats = []
        for (kind, *parts), (rows, cols) in zip(self.blocks, self.shapes):
            if kind == "lowrank":
                u, v = parts
                flats.append((u @ v.T).reshape(rows * cols))
            else:
                flats.append(parts[0].reshape(rows * cols))
        return np.concatenate(flats)


def topk(g: ParamVector, k: int) -> SparsePayload:
    """Keep the k largest-magnitude entries; ties go to the lower index."""
    m = g.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} out of range [1, {m}]")
    order = np.argsort(-np.abs(g), kind="stable")  # stable: ties by index
    keep = np.sort(order[:k])
    return SparsePayload(keep.astype(np.int64), g[keep].copy(), m)


def ef_wrap(residual: ParamVector, g: ParamVector, compress):
    """Error-feedback step: compress g plus the carried residual.

    Returns (payload, new_residual) with the conservation identity
    densify(payload) + new_residual == g + residual holding exactly for
    sparsifying compressors (kept coordinates cancel bit for bit).
    """
    if residual.shape != g.shape:
        raise ValueError(f"dimension mismatch: {residual.shape} vs {g.shape}")
    p = g + residual
    payload = compress(p)
    new_residual = p - payload.densify()
    return payload, new_residual


def sign_compress(g: ParamVector) -> SignPayload:
    """One sign bit per coordinate, with sign(0) = +1."""
    bits = (g >= 0).astype(np.uint8)
    return SignPayload(np.packbits(bits), g.shape[0])


def _fix_signs(u: np.ndarray, v: np.ndarray):
    """Flip factor pairs so each left singular vector starts positive."""
    for i in range(u.shape[1]):
        col = u[:, i]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * max(1.0, np.abs(col).max()))
        if len(nz) and col[nz[0]] < 0:
            u[:, i] = -col
            v[:, i] = -v[:, i]
    return u, v


def rank_r(g: ParamVector, layer_shapes, r: int) -> LowRankPayload:
    """Best rank-r approximation of each matrix-shaped block via SVD.

    Vector blocks (biases) pass through dense; r is clamped per block to
    min(rows, cols).
    """
    if r < 1:
        raise ValueError("rank must be >= 1")
    blocks = []
    off = 0
    for rows, cols in layer_shapes:
        size = rows * cols
        block = g[off : off + size].reshape(rows, cols)
        off += size
        if min(rows, cols) <= 1:
            blocks.append(("dense", block.copy()))
            continue
        u, s, vt = np.linalg.svd(block, full_matrices=False)
        r_eff = min(r, rows, cols)
        u_r = u[:, :r_eff] * s[:r_eff]
        v_r = vt[:r_eff].T.copy()
        u_r, v_r = _fix_signs(u_r, v_r)
        blocks.append(("lowrank", u_r, v_r))
    if off != g.shape[0]:
        raise ValueError("layer shapes do not cover the gradient vector")
    return LowRankPayload(tuple(blocks), tuple(layer_shapes), g.shape[0])


def stack_lbgm(compressed_g, compressed_lbg, cfg: lbgm.LbgmConfig) -> lbgm.UplinkMessage:
    """Run the look-back gate on densified compressed vectors.

    `compressed_lbg` may be a payload, an already-densified vector, or None
    (no look-back gradient yet, forcing a compressed transmission).
    """
    dense_g = compressed_g.densify()
    if compressed_lbg is None:
        dense_lbg = None
    elif hasattr(compressed_lbg, "densify"):
        dense_lbg = compressed_lbg.densify()
    else:
        dense_lbg = compressed_lbg
    send_scalar, rho = lbgm._gate(dense_g, dense_lbg, cfg.delta_threshold)
    if send_scalar:
        return lbgm.scalar_message(rho)
    return lbgm.compressed_message(compressed_g)


def majority_sign(acc: ParamVector) -> ParamVector:
    return np.where(acc >= 0, 1.0, -1.0)


class CompressedPolicy:
    """Uplink policy transmitting compressed gradients, optionally gated.

    delta=None is the plain compressor baseline: every round ships the
    payload, and the stored look-back copy only feeds the drift monitor.
    With a delta, rounds whose densified payload stays within the gate send
    a single scalar instead. Error feedback, when enabled, tracks only the
    compressor's truncation (the gate's own error is not fed back).
    """

    def __init__(self, compressor, delta=None, error_feedback=False,
                 k_frac=0.1, rank=2, sign_majority=False):
        self.compressor = compressor  # name, or a ready payload-producing callable
        self.delta = delta
        self.error_feedback = error_feedback
        self.k_frac = k_frac
        self.rank = rank
        self.server_transform = majority_sign if sign_majority else None
        self._compress = compressor if callable(compressor) else None

    def bind(self, setup):
        """Resolve a named compressor against the model built for this run."""
        if callable(self.compressor):
            return
        m = setup.model.param_dim
        if self.compressor == "topk":
            k = max(1, min(m, int(round(self.k_frac * m))))
            self._compress = lambda g: topk(g, k)
        elif self.compressor == "rank_r":
            shapes = setup.model.layer_shapes
            self._compress = lambda g: rank_r(g, shapes, self.rank)
        elif self.compressor == "sign":
            self._compress = sign_compress
        else:
            raise ValueError(f"unknown compressor {self.compressor!r}")

    def process(self, worker, g: ParamVector):
        if self.error_feedback:
            if worker.ef_residual is None:
                worker.ef_residual = np.zeros_like(g)
            payload, worker.ef_residual = ef_wrap(worker.ef_residual, g, self._compress)
        else:
            payload = self._compress(g)
        dense = payload.densify()
        sin2 = lbgm.lbp_error(dense, worker.lbg) if worker.lbg is not None else 0.0
        if self.delta is None:
            msg = lbgm.compressed_message(payload)
        else:
            msg = stack_lbgm(payload, worker.lbg, lbgm.LbgmConfig(self.delta))
        if msg.tag != lbgm.TAG_SCALAR:
            worker.lbg = dense.copy()
        return msg, sin2

    def reconstruct(self, server, worker_id: int, msg) -> ParamVector:
        return lbgm.reconstruct(server, worker_id, msg)


def policy_for(exp) -> CompressedPolicy:
    base = exp.algorithm.removesuffix("_lbgm")
    delta = exp.delta if exp.algorithm.endswith("_lbgm") else None
    return CompressedPolicy(
        base,
        delta=delta,
        error_feedback=(base == "topk" and exp.error_feedback),
        k_frac=exp.k_frac,
        rank=exp.rank,
        sign_majority=(base == "sign" and exp.sign_majority),
    )


def run_compressed(exp):
    """Run a compressor baseline or its look-back stacking per exp.algorithm."""
    return run_with_policy(exp, policy_for(exp))
