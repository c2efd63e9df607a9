"""Pure numpy implementations of the convolution and pooling kernels.

Shapes follow NCHW. Convolutions are stride 1 with valid padding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,OH,OW,kh,kw
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,OH,OW,O
    y = y.transpose(0, 3, 1, 2)
    y += b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(x, w, gy):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = gy.sum(axis=(0, 2, 3))
    padded = np.pad(gy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # B,O,H,W,kh,kw
    flipped = w[:, :, ::-1, ::-1]
    gx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))  # B,H,W,C
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def maxpool2d_forward(x, size, stride):
    """Return pooled output and, per output cell, the flat H*W index of the max."""
    bsz, ch, h, w = x.shape
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(bsz, ch, oh, ow, size * size)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + arg // size
    cols = np.arange(ow)[None, :] * stride + arg % size
    return np.ascontiguousarray(y), (rows * w + cols).astype(np.int64)


def maxpool2d_backward(gy, argmax, in_shape):
    bsz, ch, h, w = in_shape
    plane = h * w
    offsets = (np.arange(bsz * ch, dtype=np.int64) * plane).reshape(bsz, ch, 1, 1)
    gx = np.bincount(
        (argmax + offsets).ravel(), weights=gy.ravel(), minlength=bsz * ch * plane
    )
    return gx.reshape(in_shape)
