"""Pure-numpy kernel backend.

Same contracts as the compiled extension (``_fastkernels``): patch
gather/scatter for convolutions (im2col / col2im, 2D and 3D) and the
log-domain CTC forward-backward recursion.  The convolution kernels
operate on *already padded* inputs; padding and the surrounding matmuls
live in the tensor layer, shared by both backends.

Layouts (row-major):
  im2col2d: cols[n*oh*ow + i*ow + j, c*kh*kw + a*kw + b] = x[n, c, i*sh+a, j*sw+b]
  im2col3d: analogous with a (kt, kh, kw) tap block per channel.
"""

import numpy as np

NEG_INF = -np.inf


def im2col2d(x, kh, kw, sh, sw, oh, ow):
    n, c, _, _ = x.shape
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            patch = x[:, :, a : a + sh * oh : sh, b : b + sw * ow : sw]
            cols[:, :, :, :, a, b] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im2d(cols, n, c, hp, wp, kh, kw, sh, sw, oh, ow):
    x = np.zeros((n, c, hp, wp), dtype=np.float64)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    for a in range(kh):
        for b in range(kw):
            # strided target slices for a fixed tap never overlap
            x[:, :, a : a + sh * oh : sh, b : b + sw * ow : sw] += cols[
                :, :, :, :, a, b
            ].transpose(0, 3, 1, 2)
    return x


def im2col3d(x, kt, kh, kw, st, sh, sw, ot, oh, ow):
    n, c, _, _, _ = x.shape
    cols = np.empty((n, ot, oh, ow, c, kt, kh, kw), dtype=np.float64)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                patch = x[
                    :,
                    :,
                    a : a + st * ot : st,
                    b : b + sh * oh : sh,
                    d : d + sw * ow : sw,
                ]
                cols[:, :, :, :, :, a, b, d] = patch.transpose(0, 2, 3, 4, 1)
    return cols.reshape(n * ot * oh * ow, c * kt * kh * kw)


def col2im3d(cols, n, c, tp, hp, wp, kt, kh, kw, st, sh, sw, ot, oh, ow):
    x = np.zeros((n, c, tp, hp, wp), dtype=np.float64)
    cols = cols.reshape(n, ot, oh, ow, c, kt, kh, kw)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                x[
                    :,
                    :,
                    a : a + st * ot : st,
                    b : b + sh * oh : sh,
                    d : d + sw * ow : sw,
                ] += cols[:, :, :, :, :, a, b, d].transpose(0, 4, 1, 2, 3)
    return x


def _extended_labels(labels, blank):
    u = len(labels)
    ext = np.full(2 * u + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_forward_backward(logp, labels, blank):
    """Log-domain CTC loss and its gradient w.r.t. the log-probabilities.

    logp: (T, K) per-frame log-probabilities.
    labels: (U,) target ids, blank excluded.  Caller guarantees the
    target is admissible for T frames.

    Returns (loss, grad) where loss = -log p(labels | logp) and grad is
    d loss / d logp, shape (T, K).
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    t_len, klass = logp.shape
    ext = _extended_labels(np.asarray(labels, dtype=np.int64), blank)
    s_len = len(ext)

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        acc = np.logaddexp(stay, step)
        skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:s_len]
        acc = np.where(can_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + logp[t, ext]

    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, s_len - 2])
    loss = -tail

    # beta with the frame-t emission included, mirroring alpha
    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = logp[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = logp[t_len - 1, ext[s_len - 2]]
    can_skip_back = np.zeros(s_len, dtype=bool)
    can_skip_back[: s_len - 2] = can_skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))[:s_len]
        acc = np.logaddexp(stay, step)
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:s_len]
        acc = np.where(can_skip_back, np.logaddexp(acc, skip), acc)
        beta[t] = acc + logp[t, ext]

    # gamma[t, s] = log(alpha * beta / emission); emission double-counted
    gamma = alpha + beta - logp[:, ext]
    grad = np.zeros((t_len, klass))
    with np.errstate(invalid="ignore"):
        for s in range(s_len):
            col = np.exp(gamma[:, s] + loss)
            col[~np.isfinite(col)] = 0.0
            grad[:, ext[s]] += col
    return float(loss), -grad
