"""Independent reference implementations used to freeze expected values.

Everything here is written as plain float64 loops (or direct formula
transcription) with no code shared with the package, deliberately slow.
Tests compare the vectorized/compiled implementations against these.
"""

import math

import numpy as np


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        m = max(x[i])
        exps = [math.exp(v - m) for v in x[i]]
        s = sum(exps)
        for j in range(x.shape[1]):
            out[i, j] = exps[j] / s
    return out


def layernorm(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros_like(flat)
    for i in range(flat.shape[0]):
        row = flat[i]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(len(row)):
            out[i, j] = (row[j] - mu) * inv * gamma[j] + beta[j]
    return out.reshape(x.shape)


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x.reshape(-1))
    for i, v in enumerate(x.reshape(-1)):
        out[i] = v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))
    return out.reshape(x.shape)


def conv2d(x, w, stride=1, pad=0):
    """Naive correlation, NCHW / OIHW."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((b, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((b, cout, oh, ow))
    for n in range(b):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    y[n, co, i, j] = acc
    return y


def attention_head(q, k, v, wq, wk, wv, scale):
    """Single-head scaled dot-product attention, loop softmax."""
    qh = np.asarray(q, np.float64) @ wq
    kh = np.asarray(k, np.float64) @ wk
    vh = np.asarray(v, np.float64) @ wv
    scores = qh @ kh.T * scale
    attn = softmax_rows(scores)
    return attn @ vh, attn


def match_level(q, k, v, wq, wk, wv, wo, heads, dh,
                ln_qk=None, ln_v=None, ln_out=None, residual=True):
    """Modified multihead attention, head-by-head in float64.

    q: (M, d); k, v: (NM, d); wq/wk/wv: (d, heads*dh); wo: (heads*dh, d);
    ln_*: optional (gamma, beta) pairs. Output (M, d or heads*dh).
    """
    q = np.asarray(q, np.float64)
    k = np.asarray(k, np.float64)
    v = np.asarray(v, np.float64)
    if ln_qk is not None:
        q = layernorm(q, *ln_qk)
        k = layernorm(k, *ln_qk)
    if ln_v is not None:
        v = layernorm(v, *ln_v)
    heads_out = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        o_h, _ = attention_head(q, k, v, np.asarray(wq, np.float64)[:, cols],
                                np.asarray(wk, np.float64)[:, cols],
                                np.asarray(wv, np.float64)[:, cols],
                                1.0 / math.sqrt(dh))
        heads_out.append(o_h)
    o = np.concatenate(heads_out, axis=1)
    if residual:
        o = o + gelu(o @ np.asarray(wo, np.float64))
    if ln_out is not None:
        o = layernorm(o, *ln_out)
    return o


def correlate2d_symmetric(img, kern):
    """Single-channel correlation with edge-inclusive symmetric padding."""
    img = np.asarray(img, dtype=np.float64)
    kh, kw = kern.shape
    ph, pw = kh // 2, kw // 2
    h, w = img.shape

    def sym(i, n):
        # reflect including the edge sample: -1 -> 0, n -> n-1
        while i < 0 or i >= n:
            if i < 0:
                i = -i - 1
            if i >= n:
                i = 2 * n - i - 1
        return i

    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for u in range(kh):
                for v in range(kw):
                    acc += img[sym(i + u - ph, h), sym(j + v - pw, w)] * kern[u, v]
            out[i, j] = acc
    return out


def gaussian_kernel_1d(size, sigma):
    half = size // 2
    vals = [math.exp(-0.5 * ((i - half) / sigma) ** 2) for i in range(size)]
    s = sum(vals)
    return np.array([v / s for v in vals])


def sobel_kernels():
    """The classic fixed 3x3 derivative pair (gx, gy), correlation form."""
    gx = np.array([[-1.0, 0.0, 1.0],
                   [-2.0, 0.0, 2.0],
                   [-1.0, 0.0, 1.0]])
    return gx, gx.T


def sobel_channel(image_rgb, size, sigma):
    """Loop/f64 oracle for one (kernel, sigma) edge-magnitude channel."""
    r, g, b = 0.299, 0.587, 0.114
    gray = r * image_rgb[0] + g * image_rgb[1] + b * image_rgb[2]
    k1 = gaussian_kernel_1d(size, sigma)
    blurred = correlate2d_symmetric(gray, np.outer(k1, k1))
    kx, ky = sobel_kernels()
    gx = correlate2d_symmetric(blurred, kx)
    gy = correlate2d_symmetric(blurred, ky)
    mag = np.sqrt(gx * gx + gy * gy) / (4.0 * math.sqrt(2.0))
    return np.clip(mag, 0.0, 1.0)


def quantile_bins(values, qs):
    """clamp((v - q[p-1]) / (q[p] - q[p-1]), 0, 1) per bin p."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((len(qs) - 1,) + values.shape)
    for p in range(1, len(qs)):
        lo, hi = qs[p - 1], qs[p]
        denom = hi - lo if hi > lo else 1.0
        for idx in np.ndindex(values.shape):
            out[(p - 1,) + idx] = min(max((values[idx] - lo) / denom, 0.0), 1.0)
    return out


def miou(pred_masks, true_masks):
    """Binary IoU accumulated over a list of (pred, true) mask pairs."""
    inter = 0
    union = 0
    for p, t in zip(pred_masks, true_masks):
        p = np.asarray(p, bool)
        t = np.asarray(t, bool)
        inter += int((p & t).sum())
        union += int((p | t).sum())
    if union == 0:
        return 1.0
    return inter / union


def rmse(pred, true):
    pred = np.asarray(pred, np.float64).reshape(-1)
    true = np.asarray(true, np.float64).reshape(-1)
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(pred, true)) / len(pred))


def mean_angle_error(pred, true):
    """Mean angle in degrees between 3-vectors decoded as 2x-1; returns
    (mean_degrees, skipped) where zero-norm pairs are skipped."""
    pred = np.asarray(pred, np.float64)
    true = np.asarray(true, np.float64)
    angles = []
    skipped = 0
    flat_p = pred.reshape(-1, 3)
    flat_t = true.reshape(-1, 3)
    for vp, vt in zip(flat_p, flat_t):
        a = 2.0 * vp - 1.0
        b = 2.0 * vt - 1.0
        na, nb = math.sqrt(sum(a * a)), math.sqrt(sum(b * b))
        if na == 0.0 or nb == 0.0:
            skipped += 1
            continue
        c = sum(a * b) / (na * nb)
        c = min(1.0, max(-1.0, c))
        angles.append(math.degrees(math.acos(c)))
    if not angles:
        return 0.0, skipped
    return sum(angles) / len(angles), skipped


def adam_step(p, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update on flat float64 arrays; returns new (p, m, v)."""
    p, g, m, v = (np.asarray(a, np.float64).copy() for a in (p, g, m, v))
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i]
        mhat = m[i] / (1 - beta1 ** t)
        vhat = v[i] / (1 - beta2 ** t)
        p[i] = p[i] - lr * mhat / (math.sqrt(vhat) + eps)
    return p, m, v


def poly_lr(base, step, total, power=0.9):
    return base * (1.0 - step / total) ** power


def bilinear_upsample2x(x):
    """Align-corners-False 2x bilinear upsample of (..., H, W)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (2 * h, 2 * w))
    for idx in np.ndindex(x.shape[:-2]):
        for i in range(2 * h):
            for j in range(2 * w):
                src_i = (i + 0.5) / 2.0 - 0.5
                src_j = (j + 0.5) / 2.0 - 0.5
                i0 = int(math.floor(src_i))
                j0 = int(math.floor(src_j))
                di = src_i - i0
                dj = src_j - j0
                acc = 0.0
                for u, wu in ((i0, 1 - di), (i0 + 1, di)):
                    for v, wv in ((j0, 1 - dj), (j0 + 1, dj)):
                        uu = min(max(u, 0), h - 1)
                        vv = min(max(v, 0), w - 1)
                        acc += wu * wv * x[idx + (uu, vv)]
                out[idx + (i, j)] = acc
    return out
