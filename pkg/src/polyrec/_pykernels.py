"""Pure-numpy fallbacks for the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def topk_select(sims, key, k, exclude=-1):
    """Indices of the k best entries by (similarity desc, key asc)."""
    sims = np.asarray(sims, dtype=np.float64)
    key = np.asarray(key, dtype=np.int64)
    if key.shape != sims.shape:
        raise ValueError("sims and key lengths differ")
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = np.arange(sims.shape[0], dtype=np.int64)
    if exclude >= 0:
        idx = np.delete(idx, exclude)
    cand = sims[idx]
    if k < cand.shape[0]:
        # everything tied with the k-th best value has to stay in the running
        kth = np.partition(cand, cand.shape[0] - k)[cand.shape[0] - k]
        keep = cand >= kth
        idx, cand = idx[keep], cand[keep]
    order = np.lexsort((key[idx], -cand))
    return idx[order[:k]]


def masked_mse_grad(preds, labels, mask):
    """Masked mean squared error and its gradient w.r.t. ``preds``."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if preds.shape != labels.shape or preds.shape != mask.shape:
        raise ValueError("preds, labels and mask must share a shape")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("batch has no present labels")
    diff = np.where(mask, preds - labels, 0.0)
    return float(np.sum(diff * diff)) / count, diff * (2.0 / count)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, c1, c2):
    """One AdamW update over flat buffers, in place; rounds like the compiled loop."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v)
    denom *= 1.0 / np.sqrt(c2)
    denom += eps
    step = m * (1.0 / c1)
    step /= denom
    step += weight_decay * p
    step *= lr
    p -= step
