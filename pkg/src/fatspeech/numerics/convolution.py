"""2-D convolution and its transpose for single-image (C, H, W) tensors.

The differentiable versions vectorize over kernel offsets (k*k einsum passes
over strided views), which is plenty at desk scale. reference_conv2d is the
naive quadruple loop kept as an oracle for tests; it must agree with conv2d to
float tolerance on random inputs.
"""

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, record_op
from .ops import as_tensor


def conv2d_output_shape(in_shape, kernel, stride, padding):
    """Output (H', W') for a square-kernel convolution: floor((n+2p-k)/s)+1.

    Raises ShapeError when either output dim would be non-positive.
    """
    h, w = in_shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d_output_shape", (h, w),
                         detail=f"kernel={kernel} stride={stride} padding={padding} "
                                f"gives non-positive output ({oh}, {ow})")
    return oh, ow


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Convolve x (C_in, H, W) with weight (C_out, C_in, kH, kW)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4 \
            or x.data.shape[0] != weight.data.shape[1]:
        raise ShapeError("conv2d", x.data.shape, weight.data.shape)
    c_out, c_in, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError("conv2d", weight.data.shape, detail="kernel must be square")
    _, h, w = x.data.shape
    oh, ow = conv2d_output_shape((h, w), kh, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    out_data = np.zeros((c_out, oh, ow), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di:di + (oh - 1) * stride + 1:stride,
                       dj:dj + (ow - 1) * stride + 1:stride]
            out_data += np.einsum("ihw,oi->ohw", patch, weight.data[:, :, di, dj])
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ShapeError("conv2d", bias.data.shape, (c_out,))
        out_data += bias.data[:, None, None]
    out = Tensor(out_data)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di:di + (oh - 1) * stride + 1:stride,
                        dj:dj + (ow - 1) * stride + 1:stride] += np.einsum(
                            "ohw,oi->ihw", g, weight.data[:, :, di, dj])
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w]
            x.accumulate_grad(gxp)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for di in range(kh):
                for dj in range(kw):
                    patch = xp[:, di:di + (oh - 1) * stride + 1:stride,
                               dj:dj + (ow - 1) * stride + 1:stride]
                    gw[:, :, di, dj] = np.einsum("ohw,ihw->oi", g, patch)
            weight.accumulate_grad(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2)))

    return record_op("conv2d", inputs, out, backward)


def conv2d_transpose(x, weight, bias=None, stride=1):
    """Transposed convolution: x (C_in, H, W), weight (C_in, C_out, kH, kW).

    Output dims are (H-1)*stride + kH by (W-1)*stride + kW (no padding).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4 \
            or x.data.shape[0] != weight.data.shape[0]:
        raise ShapeError("conv2d_transpose", x.data.shape, weight.data.shape)
    c_in, c_out, kh, kw = weight.data.shape
    _, h, w = x.data.shape
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    out_data = np.zeros((c_out, oh, ow), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            out_data[:, di:di + (h - 1) * stride + 1:stride,
                     dj:dj + (w - 1) * stride + 1:stride] += np.einsum(
                         "ihw,io->ohw", x.data, weight.data[:, :, di, dj])
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ShapeError("conv2d_transpose", bias.data.shape, (c_out,))
        out_data += bias.data[:, None, None]
    out = Tensor(out_data)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for di in range(kh):
                for dj in range(kw):
                    gs = g[:, di:di + (h - 1) * stride + 1:stride,
                           dj:dj + (w - 1) * stride + 1:stride]
                    gx += np.einsum("ohw,io->ihw", gs, weight.data[:, :, di, dj])
            x.accumulate_grad(gx)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for di in range(kh):
                for dj in range(kw):
                    gs = g[:, di:di + (h - 1) * stride + 1:stride,
                           dj:dj + (w - 1) * stride + 1:stride]
                    gw[:, :, di, dj] = np.einsum("ihw,ohw->io", x.data, gs)
            weight.accumulate_grad(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2)))

    return record_op("conv2d_transpose", inputs, out, backward)


def reference_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Slow direct-loop convolution used as a test oracle. numpy in, numpy out."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    c_out, c_in, kh, kw = weight.shape
    _, h, w = x.shape
    oh, ow = conv2d_output_shape((h, w), kh, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((c_out, oh, ow), dtype=x.dtype)
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[c, i * stride + di, j * stride + dj] \
                                * weight[o, c, di, dj]
                out[o, i, j] = acc
    if bias is not None:
        out += np.asarray(bias)[:, None, None]
    return out
