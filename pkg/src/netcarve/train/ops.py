"""Forward/backward kernels for the trainer.

Everything is plain numpy and dtype-preserving: float32 during training,
float64 when the gradient checker wants tight finite-difference agreement.
Convolution goes through im2col so the arithmetic matches the executor.
"""

from __future__ import annotations

import numpy as np

from ..executor import im2col, resize_coords


def conv_forward(x, w, b, stride, padding):
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    hout = (x.shape[2] + 2 * padding[0] - kh) // stride[0] + 1
    wout = (x.shape[3] + 2 * padding[1] - kw) // stride[1] + 1
    cols = im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(cout, -1), cols)
    if b is not None:
        y = y + b.reshape(1, cout, 1)
    cache = (x.shape, w, b is not None, stride, padding, cols)
    return y.reshape(n, cout, hout, wout), cache


def conv_backward(dy, cache):
    x_shape, w, has_bias, stride, padding, cols = cache
    n = dy.shape[0]
    cout, cin, kh, kw = w.shape
    dy_mat = dy.reshape(n, cout, -1)
    dw = np.einsum("ncl,nkl->ck", dy_mat, cols).reshape(w.shape)
    db = dy_mat.sum(axis=(0, 2)) if has_bias else None
    dcols = np.matmul(w.reshape(cout, -1).T, dy_mat)
    dx = col2im(dcols, x_shape, kh, kw, stride, padding)
    return dx, dw, db


def col2im(dcols, x_shape, kh, kw, stride, padding):
    """Fold (N, C*kh*kw, L) patch gradients back onto the input."""
    n, c, h, w = x_shape
    sh, sw = stride
    ph, pw = padding
    hout = (h + 2 * ph - kh) // sh + 1
    wout = (w + 2 * pw - kw) // sw + 1
    dpad = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, hout, wout)
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += d6[:, :, i, j]
    if ph or pw:
        return dpad[:, :, ph:ph + h, pw:pw + w]
    return dpad


def batchnorm_forward_train(x, gamma, beta, eps):
    """Training-mode BN on batch statistics. Returns y, cache, (mean, biased var)."""
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)  # biased, used for normalization
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * invstd.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    cache = (xhat, invstd, gamma, m)
    return y, cache, (mean, var)


def batchnorm_backward(dy, cache):
    xhat, invstd, gamma, m = cache
    axes = (0, 2, 3)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    dx = (invstd.reshape(1, -1, 1, 1) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(1, -1, 1, 1)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(1, -1, 1, 1)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def _interp_axis(x, lo, hi, frac, axis):
    xm = np.moveaxis(x, axis, -1)
    out = xm[..., lo] * (1 - frac) + xm[..., hi] * frac
    return np.moveaxis(out, -1, axis)


def _interp_axis_backward(dy, lo, hi, frac, in_dim, axis):
    dym = np.moveaxis(dy, axis, -1)
    dxm = np.zeros(dym.shape[:-1] + (in_dim,), dtype=dy.dtype)
    np.add.at(dxm, (..., lo), dym * (1 - frac))
    np.add.at(dxm, (..., hi), dym * frac)
    return np.moveaxis(dxm, -1, axis)


def resize_forward(x, scale_h, scale_w):
    h, w = x.shape[2], x.shape[3]
    hout = int(np.floor(h * scale_h))
    wout = int(np.floor(w * scale_w))
    ylo, yhi, fy = resize_coords(hout, scale_h, h)
    xlo, xhi, fx = resize_coords(wout, scale_w, w)
    y = _interp_axis(_interp_axis(x, ylo, yhi, fy, 2), xlo, xhi, fx, 3)
    cache = ((ylo, yhi, fy, h), (xlo, xhi, fx, w))
    return y, cache


def resize_backward(dy, cache):
    (ylo, yhi, fy, h), (xlo, xhi, fx, w) = cache
    d = _interp_axis_backward(dy, xlo, xhi, fx, w, 3)
    return _interp_axis_backward(d, ylo, yhi, fy, h, 2)


def maxpool_forward(x, kernel, stride, padding):
    n, c, h, w = x.shape
    kh, kw = kernel
    cols = im2col(x, kh, kw, stride, padding, fill=-np.inf)
    hout = (h + 2 * padding[0] - kh) // stride[0] + 1
    wout = (w + 2 * padding[1] - kw) // stride[1] + 1
    cols = cols.reshape(n, c, kh * kw, hout * wout)
    arg = cols.argmax(axis=2)
    y = np.take_along_axis(cols, arg[:, :, None, :], axis=2)[:, :, 0, :]
    cache = (x.shape, kernel, stride, padding, arg)
    return y.reshape(n, c, hout, wout), cache


def maxpool_backward(dy, cache):
    x_shape, kernel, stride, padding, arg = cache
    n, c, h, w = x_shape
    kh, kw = kernel
    hout, wout = dy.shape[2], dy.shape[3]
    dcols = np.zeros((n, c, kh * kw, hout * wout), dtype=dy.dtype)
    np.put_along_axis(dcols, arg[:, :, None, :], dy.reshape(n, c, 1, -1), axis=2)
    return col2im(dcols.reshape(n, c * kh * kw, -1), x_shape, kh, kw, stride, padding)


def softmax_forward(x, axis=1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, (s, axis)


def softmax_backward(dy, cache):
    s, axis = cache
    return s * (dy - (dy * s).sum(axis=axis, keepdims=True))


def transpose_forward(x, perm):
    return np.transpose(x, perm), perm


def transpose_backward(dy, perm):
    inv = np.argsort(perm)
    return np.transpose(dy, inv)


def scatter_nd_forward(data, indices, updates):
    out = data.copy()
    idx = indices.reshape(indices.shape[0], -1)[:, 0]
    out[idx] = updates
    return out, idx


def scatter_nd_backward(dy, idx):
    """Gradients w.r.t. (data, updates): overwritten rows get zero data-grad."""
    ddata = dy.copy()
    ddata[idx] = 0
    dupdates = dy[idx]
    return ddata, dupdates


def cross_entropy_forward(logits, labels):
    """Mean pixel softmax cross-entropy over (N, K, H, W) logits and (N, H, W) labels."""
    probs, _ = softmax_forward(logits, axis=1)
    n, k, h, w = logits.shape
    flat = probs.transpose(0, 2, 3, 1).reshape(-1, k)
    lab = labels.reshape(-1)
    picked = flat[np.arange(flat.shape[0]), lab]
    loss = float(-np.log(np.maximum(picked, 1e-30)).mean())
    dflat = flat.copy()
    dflat[np.arange(flat.shape[0]), lab] -= 1.0
    dlogits = dflat.reshape(n, h, w, k).transpose(0, 3, 1, 2) / flat.shape[0]
    return loss, dlogits.astype(logits.dtype, copy=False)
