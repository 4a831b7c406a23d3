"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same contracts and the same floating-point operation sequence, so both
backends produce bit-identical accumulators.
"""
import numpy as np

from .ledger import track

# rows per block in accumulate_slice; bounds the temporary to ~64k values
_BLOCK_VALUES = 1 << 16


def accumulate_slice(tau, w_re, w_im, out):
    nx, ny = tau.shape
    rows = max(1, _BLOCK_VALUES // max(ny, 1))
    acc_dtype = out.dtype
    track("fallback_slice_tmp", min(rows, nx) * ny, 8)
    for q in range(len(w_re)):
        oq = out[q]
        for r0 in range(0, nx, rows):
            blk = tau[r0:r0 + rows]
            for col, w in ((0, w_re[q]), (1, w_im[q])):
                term = np.multiply(blk, w, dtype=np.float64)
                if acc_dtype != np.float64:
                    term = term.astype(acc_dtype)
                oq[r0:r0 + rows, col::2] += term


def accumulate_cube(tau, w_re, w_im, out):
    for n in range(tau.shape[2]):
        accumulate_slice(tau[:, :, n], w_re[:, n], w_im[:, n], out)


def scatter_events(pixel_i, pixel_j, w_re, w_im, out):
    ny = out.shape[2] // 2
    flat = np.asarray(pixel_i, dtype=np.int64) * ny + np.asarray(pixel_j, dtype=np.int64)
    for q in range(w_re.shape[0]):
        plane = out[q].reshape(-1)
        for col, w in ((0, w_re[q]), (1, w_im[q])):
            np.add.at(plane[col::2], flat, w.astype(out.dtype, copy=False))
