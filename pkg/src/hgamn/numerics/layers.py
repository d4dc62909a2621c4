"""Layer primitives: affine map, GRU cell and the sequence runner built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .params import ParamStore, uniform_init
from .ops import scatter_rows
from .tensor import DimensionError, Tensor, make_op


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ w (+ b)``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"dense: input width {x.shape[-1]} vs weight {w.shape}")
    y = ops.matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"dense: bias {b.shape} vs weight {w.shape}")
        y = ops.add(y, b)
    return y


@dataclass
class GRUParams:
    """Weights of one GRU direction.

    Gate columns are packed ``[reset | update | candidate]``; the reset gate
    multiplies the hidden projection of the candidate (cuDNN layout).
    """

    w_x: Tensor  # (d_in, 3h)
    w_h: Tensor  # (h, 3h)
    b_x: Tensor  # (3h,)
    b_h: Tensor  # (3h,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_x.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d_in: int, hidden: int, rng) -> "GRUParams":
        bound = 1.0 / np.sqrt(hidden)
        return cls(
            w_x=store.add(f"{prefix}.w_x", uniform_init(rng, (d_in, 3 * hidden), bound)),
            w_h=store.add(f"{prefix}.w_h", uniform_init(rng, (hidden, 3 * hidden), bound)),
            b_x=store.add(f"{prefix}.b_x", uniform_init(rng, (3 * hidden,), bound)),
            b_h=store.add(f"{prefix}.b_h", uniform_init(rng, (3 * hidden,), bound)),
        )


def _sig(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def gru_cell(x_t: Tensor, h_prev: Tensor, p: GRUParams, mask=None) -> Tensor:
    """One GRU step over a batch of rows.

    r = sig(x Wxr + bxr + h Whr + bhr), z likewise,
    c = tanh(x Wxc + bxc + r * (h Whc + bhc)), h' = (1 - z) * h + z * c.

    Rows whose ``mask`` entry is 0 keep ``h_prev`` unchanged (padding).
    Accepts 1-D inputs for a single sequence.
    """
    squeeze = x_t.ndim == 1
    xd = x_t.data[None] if squeeze else x_t.data
    hd = h_prev.data[None] if squeeze else h_prev.data
    H = p.hidden
    if xd.shape[1] != p.d_in or hd.shape[1] != H or xd.shape[0] != hd.shape[0]:
        raise DimensionError(f"gru_cell: x {x_t.shape}, h {h_prev.shape}, params d_in={p.d_in} h={H}")
    wx, wh, bx, bh = p.w_x.data, p.w_h.data, p.b_x.data, p.b_h.data
    gx = xd @ wx + bx
    gh = hd @ wh + bh
    r = _sig(gx[:, :H] + gh[:, :H])
    z = _sig(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghc = gh[:, 2 * H:]
    c = np.tanh(gx[:, 2 * H:] + r * ghc)
    out = hd + z * (c - hd)
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=out.dtype).reshape(-1, 1)
        out = hd + m * (out - hd)

    def backward(g):
        g = g[None] if squeeze else g
        gz_out = g if m is None else g * m
        d_h = g - gz_out  # masked rows pass straight through
        d_c = gz_out * z
        d_z = gz_out * (c - hd)
        d_h = d_h + gz_out * (1.0 - z)
        d_ac = d_c * (1.0 - c * c)
        d_r = d_ac * ghc
        d_ghc = d_ac * r
        d_ar = d_r * r * (1.0 - r)
        d_az = d_z * z * (1.0 - z)
        d_gx = np.concatenate([d_ar, d_az, d_ac], axis=1)
        d_gh = np.concatenate([d_ar, d_az, d_ghc], axis=1)
        d_x = d_gx @ wx.T
        d_h = d_h + d_gh @ wh.T
        grads = (
            d_x[0] if squeeze else d_x,
            d_h[0] if squeeze else d_h,
            xd.T @ d_gx,
            hd.T @ d_gh,
            d_gx.sum(axis=0),
            d_gh.sum(axis=0),
        )
        return grads

    data = out[0] if squeeze else out
    return make_op(data, (x_t, h_prev, p.w_x, p.w_h, p.b_x, p.b_h), backward, "gru_cell")


def gru_sequence(
    table: Tensor,
    indices: np.ndarray,
    p: GRUParams,
    mask: np.ndarray | None = None,
    reverse: bool = False,
    stop: int | None = None,
) -> Tensor:
    """Run a GRU over embedded symbol sequences and return the final state.

    ``indices`` is ``(N, T)`` into ``table``; ``mask`` (same shape) marks real
    positions, padded positions leave the state untouched. With ``reverse``
    the sequence is consumed from position T-1 down to 0. ``stop`` limits
    the number of consumed steps.

    Equivalent to chaining :func:`gru_cell` over the steps, but recorded as a
    single tape entry with a hand-written backward pass through time.
    """
    indices = np.asarray(indices, dtype=np.int64)
    n, T = indices.shape
    H = p.hidden
    steps = list(range(T - 1, -1, -1) if reverse else range(T))
    if stop is not None:
        steps = steps[:stop]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        steps = [t for t in steps if mask[:, t].any()]
    tab = table.data
    dt = tab.dtype
    wx, wh, bx, bh = p.w_x.data, p.w_h.data, p.b_x.data, p.b_h.data
    X = tab[indices]  # (n, T, d_in)
    GX = X @ wx + bx  # (n, T, 3H)
    h = np.zeros((n, H), dtype=dt)
    saved = []
    for t in steps:
        gx = GX[:, t]
        gh = h @ wh + bh
        r = _sig(gx[:, :H] + gh[:, :H])
        z = _sig(gx[:, H:2 * H] + gh[:, H:2 * H])
        ghc = gh[:, 2 * H:]
        c = np.tanh(gx[:, 2 * H:] + r * ghc)
        m = None
        if mask is not None and not mask[:, t].all():
            m = mask[:, t].astype(dt)[:, None]
        new = h + z * (c - h)
        if m is not None:
            new = h + m * (new - h)
        saved.append((t, h, r, z, c, ghc, m))
        h = new

    def backward(g):
        d_h = g.astype(dt, copy=True)
        dGX = np.zeros_like(GX)
        d_wh = np.zeros_like(wh)
        d_bh = np.zeros_like(bh)
        for t, hp, r, z, c, ghc, m in reversed(saved):
            go = d_h if m is None else d_h * m
            d_c = go * z
            d_z = go * (c - hp)
            d_prev = d_h - go + go * (1.0 - z)
            d_ac = d_c * (1.0 - c * c)
            d_ar = d_ac * ghc * r * (1.0 - r)
            d_az = d_z * z * (1.0 - z)
            d_gh = np.concatenate([d_ar, d_az, d_ac * r], axis=1)
            dGX[:, t, :H] = d_ar
            dGX[:, t, H:2 * H] = d_az
            dGX[:, t, 2 * H:] = d_ac
            d_wh += hp.T @ d_gh
            d_bh += d_gh.sum(axis=0)
            d_h = d_prev + d_gh @ wh.T
        flat = dGX.reshape(-1, 3 * H)
        d_wx = X.reshape(-1, X.shape[-1]).T @ flat
        d_bx = flat.sum(axis=0)
        d_tab = None
        if table.requires_grad:
            d_tab = scatter_rows(indices.ravel(), flat @ wx.T, tab.shape[0])
        return d_tab, d_wx, d_wh, d_bx, d_bh

    return make_op(h, (table, p.w_x, p.w_h, p.b_x, p.b_h), backward, "gru_sequence")
