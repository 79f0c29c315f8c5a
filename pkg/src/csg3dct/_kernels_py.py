"""Pure-numpy versions of the sliding-window kernels.

Same signatures and layouts as the compiled ``_kernels`` module; used when the
extension is not built or ``CSG3DCT_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, s):
    return (n - k) // s + 1


def im2col3d(xp, kt, kh, kw, st, sh, sw):
    """Unfold a padded [N, C, T, H, W] volume into [N, C*kt*kh*kw, To*Ho*Wo] columns."""
    N, C, T, H, W = xp.shape
    To, Ho, Wo = _out_size(T, kt, st), _out_size(H, kh, sh), _out_size(W, kw, sw)
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]
    # [N, C, To, Ho, Wo, kt, kh, kw] -> [N, C, kt, kh, kw, To, Ho, Wo]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(N, C * kt * kh * kw, To * Ho * Wo)


def col2im3d(cols, padded_shape, kt, kh, kw, st, sh, sw):
    """Adjoint of :func:`im2col3d`: scatter-add columns back into a padded volume."""
    N, C, T, H, W = padded_shape
    To, Ho, Wo = _out_size(T, kt, st), _out_size(H, kh, sh), _out_size(W, kw, sw)
    c = cols.reshape(N, C, kt, kh, kw, To, Ho, Wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for dt in range(kt):
        for dy in range(kh):
            for dx in range(kw):
                out[:, :,
                    dt:dt + st * (To - 1) + 1:st,
                    dy:dy + sh * (Ho - 1) + 1:sh,
                    dx:dx + sw * (Wo - 1) + 1:sw] += c[:, :, dt, dy, dx]
    return out


def maxpool3d_forward(xp, kt, kh, kw, st, sh, sw):
    """Max over windows of a padded volume. Returns (values, flat in-window argmax as int32)."""
    N, C, T, H, W = xp.shape
    To, Ho, Wo = _out_size(T, kt, st), _out_size(H, kh, sh), _out_size(W, kw, sw)
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]
    win = win.reshape(N, C, To, Ho, Wo, kt * kh * kw)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int32)


def maxpool3d_backward(grad, idx, padded_shape, kt, kh, kw, st, sh, sw):
    N, C, To, Ho, Wo = grad.shape
    out = np.zeros(padded_shape, dtype=grad.dtype)
    k = 0
    for dt in range(kt):
        for dy in range(kh):
            for dx in range(kw):
                out[:, :,
                    dt:dt + st * (To - 1) + 1:st,
                    dy:dy + sh * (Ho - 1) + 1:sh,
                    dx:dx + sw * (Wo - 1) + 1:sw] += np.where(idx == k, grad, 0)
                k += 1
    return out
