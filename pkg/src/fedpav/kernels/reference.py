"""NumPy implementations of the two inner loops that dominate runtime.

``_speedups.pyx`` mirrors these functions one to one; ``fedpav.kernels``
picks whichever backend is available at import time.  Both backends write
their results into caller-provided arrays and must agree bitwise on
``match_stats`` (plain double arithmetic, fixed accumulation order) and to
float tolerance on ``sgd_epoch`` (matrix products may reassociate).
"""

import numpy as np

NAME = "python"


def sgd_epoch(w_b, b_b, w_h, b_h, m_wb, m_bb, m_wh, m_bh,
              inputs, labels, order, batch_size,
              lr_backbone, lr_head, momentum, weight_decay, losses):
    """Run one epoch of minibatch SGD in place.

    Parameters and momentum buffers are updated batch by batch in the order
    given by ``order``; ``losses`` receives the mean cross-entropy of each
    batch measured before its update.  The update rule matches the usual
    coupled weight decay with momentum:

        u <- momentum * u + (grad + weight_decay * p);  p <- p - lr * u
    """
    n = order.shape[0]
    rows = np.arange(batch_size)
    pos = 0
    batch = 0
    while pos < n:
        idx = order[pos:pos + batch_size]
        m = idx.shape[0]
        x = inputs[idx]
        y = labels[idx]
        feats = x @ w_b + b_b
        logits = feats @ w_h + b_h
        zmax = logits.max(axis=1)
        ez = np.exp(logits - zmax[:, None])
        denom = ez.sum(axis=1)
        r = rows[:m]
        losses[batch] = float(np.mean(np.log(denom) + zmax - logits[r, y]))
        dz = ez / denom[:, None]
        dz[r, y] -= 1.0
        dz /= m
        g_wh = feats.T @ dz
        g_bh = dz.sum(axis=0)
        dfeat = dz @ w_h.T
        g_wb = x.T @ dfeat
        g_bb = dfeat.sum(axis=0)
        m_wh *= momentum
        m_wh += g_wh + weight_decay * w_h
        m_bh *= momentum
        m_bh += g_bh + weight_decay * b_h
        m_wb *= momentum
        m_wb += g_wb + weight_decay * w_b
        m_bb *= momentum
        m_bb += g_bb + weight_decay * b_b
        w_h -= lr_head * m_wh
        b_h -= lr_head * m_bh
        w_b -= lr_backbone * m_wb
        b_b -= lr_backbone * m_bb
        pos += batch_size
        batch += 1


def match_stats(order, q_ids, q_cams, g_ids, g_cams, ap, hit_rank):
    """Per-query ranking statistics for retrieval evaluation.

    ``order`` holds, per query, all gallery indices sorted by descending
    similarity.  Gallery entries sharing both identity and camera with the
    query are removed from its ranking; over the remainder the function
    records the zero-based rank of the first correct match in ``hit_rank``
    (-1 when no correct match exists) and the average precision in ``ap``
    (0 in that case).  AP sums hits/(rank+1) over correct positions, in
    rank order, divided by the number of correct entries.
    """
    n_query = order.shape[0]
    for qi in range(n_query):
        row = order[qi]
        same_id = g_ids[row] == q_ids[qi]
        keep = ~(same_id & (g_cams[row] == q_cams[qi]))
        rel = same_id[keep]
        positions = np.nonzero(rel)[0]
        if positions.size == 0:
            ap[qi] = 0.0
            hit_rank[qi] = -1
            continue
        hit_rank[qi] = positions[0]
        total = 0.0
        hits = 0
        for p in positions.tolist():
            hits += 1
            total += hits / (p + 1)
        ap[qi] = total / positions.size
