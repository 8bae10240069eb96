"""Pure-numpy kernels: grid pooling, coupled cell logits, and the fused
loss/gradient evaluation used inside the perturbation loop.

The compiled extension in ``_core.pyx`` implements the same three entry
points; either backend may be selected at import time.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def cell_features(image: np.ndarray, grid: int, pool: int) -> np.ndarray:
    """Average-pool each grid cell to pool x pool blocks.

    Returns (grid*grid, pool*pool*3), rows in row-major cell order, each row
    the flattened (pool, pool, 3) block means in raw pixel units.
    """
    H, W, C = image.shape
    ch, cw = H // grid, W // grid
    bh, bw = ch // pool, cw // pool
    blocks = image.reshape(grid, pool, bh, grid, pool, bw, C)
    pooled = blocks.mean(axis=(2, 5))  # (grid, pool, grid, pool, C)
    pooled = pooled.transpose(0, 2, 1, 3, 4)  # (grid, grid, pool, pool, C)
    return np.ascontiguousarray(pooled.reshape(grid * grid, pool * pool * C))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cell_logits(
    image: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    mix: np.ndarray | None,
    beta: float,
    couple: np.ndarray | None,
    grid: int,
    pool: int,
) -> np.ndarray:
    """Per-cell logits including the cross-cell coupling term.

    Local logits are a linear map of the pooled cell features; cell c then
    receives beta * mix @ g[c], where g[c] is the couple-weighted average of
    the other cells' local softmax (couple rows are normalized and have zero
    diagonal). beta == 0 or a missing mix/couple disables coupling.
    """
    f = cell_features(image, grid, pool)
    z = f @ weights + bias
    if beta == 0.0 or mix is None or couple is None or z.shape[0] < 2:
        return z
    s = _softmax(z)
    g = couple @ s
    return z + beta * (g @ mix.T)


def loss_and_grad(
    image: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    mix: np.ndarray | None,
    beta: float,
    couple: np.ndarray | None,
    grid: int,
    pool: int,
    targets: np.ndarray,
    cell_weight: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy over cells and its exact pixel gradient.

    loss = sum_c cell_weight[c] * CE(softmax(y[c]), targets[c]) / n_cells,
    with y the coupled logits of cell_logits. The gradient chains through
    the coupling, the linear map, and the average pooling; it has the same
    shape as the image.
    """
    H, W, C = image.shape
    ch, cw = H // grid, W // grid
    bh, bw = ch // pool, cw // pool
    n = grid * grid

    f = cell_features(image, grid, pool)
    z = f @ weights + bias
    coupled = beta != 0.0 and mix is not None and couple is not None and n > 1
    if coupled:
        s = _softmax(z)
        g = couple @ s
        y = z + beta * (g @ mix.T)
    else:
        y = z

    ymax = y.max(axis=1, keepdims=True)
    lse = ymax[:, 0] + np.log(np.exp(y - ymax).sum(axis=1))
    idx = np.arange(n)
    logp_t = y[idx, targets] - lse
    loss = float(np.dot(cell_weight, -logp_t) / n)

    p = np.exp(y - lse[:, None])
    dy = p * (cell_weight / n)[:, None]
    dy[idx, targets] -= cell_weight / n
    if coupled:
        ds = beta * (couple.T @ (dy @ mix))
        dz = dy + s * (ds - (s * ds).sum(axis=1, keepdims=True))
    else:
        dz = dy

    df = dz @ weights.T  # (n, pool*pool*C)
    dpix = df.reshape(grid, grid, pool, pool, C) / (bh * bw)
    grad = np.broadcast_to(
        dpix.transpose(0, 2, 1, 3, 4)[:, :, None, :, :, None, :],
        (grid, pool, bh, grid, pool, bw, C),
    ).reshape(H, W, C)
    return loss, np.ascontiguousarray(grad)
