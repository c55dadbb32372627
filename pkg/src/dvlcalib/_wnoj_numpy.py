"""Pure-numpy assembly of white-noise-on-jerk covariance blocks.

Fallback twin of the compiled `_speedups` extension; both expose
`wnoj_channel_block` with identical semantics. Each scalar trajectory axis is
the 3-state chain [value, rate, acceleration] driven by white jerk with a
piecewise-constant power spectral density, started at `t0` with an isotropic
initial covariance `p0 * I`.

The chain covariance between times t and t' (channels da, db in {0,1,2}) is

    K[da,db](t,t') = p0 * sum_k Phi[da,k](t-t0) * Phi[db,k](t'-t0)
                   + sum_segments q_s * F[da,db](x_s, y_s, c_s)

with Phi the constant-jerk transition and F the closed-form integral of
phi(x-s) phi(y-s)^T over the segment, phi(u) = [u^2/2, u, 1].
"""

import numpy as np


def _f_entry(da, db, x, y, c):
    """Closed-form segment integral, entry (da, db); x, y, c broadcast."""
    if da > db:
        return _f_entry(db, da, y, x, c)
    if da == 0 and db == 0:
        return c * (
            c
            * (
                c * (c * (c * 0.05 - (x + y) * 0.125) + x * x / 12.0 + x * y / 3.0 + y * y / 12.0)
                - (x * x * y + x * y * y) * 0.25
            )
            + x * x * y * y * 0.25
        )
    if da == 0 and db == 1:
        return c * (
            c * (c * (-c * 0.125 + x / 3.0 + y / 6.0) - x * x * 0.25 - x * y * 0.5)
            + x * x * y * 0.5
        )
    if da == 0 and db == 2:
        return c * (c * (c / 6.0 - x * 0.5) + x * x * 0.5)
    if da == 1 and db == 1:
        return c * (c * (c / 3.0 - (x + y) * 0.5) + x * y)
    if da == 1 and db == 2:
        return c * (-c * 0.5 + x)
    return c  # (2, 2)


_PHI_ROWS = {
    0: lambda u: np.stack([np.ones_like(u), u, 0.5 * u * u], axis=-1),
    1: lambda u: np.stack([np.zeros_like(u), np.ones_like(u), u], axis=-1),
    2: lambda u: np.stack([np.zeros_like(u), np.zeros_like(u), np.ones_like(u)], axis=-1),
}


def wnoj_channel_block(ta, da, tb, db, seg_starts, seg_psd, t0, p0):
    """Covariance block between channel `da` at times `ta` and channel `db`
    at times `tb` for one axis.

    seg_starts: ascending segment start times (first one must be <= t0).
    seg_psd: jerk PSD per segment, same length.
    Returns an (len(ta), len(tb)) array.
    """
    ta = np.asarray(ta, dtype=float)
    tb = np.asarray(tb, dtype=float)
    xa = ta - t0
    xb = tb - t0
    if np.any(xa < -1e-12) or np.any(xb < -1e-12):
        raise ValueError("evaluation times precede the kernel start time")

    out = np.zeros((ta.size, tb.size))
    if p0 != 0.0:
        ra = _PHI_ROWS[da](xa)
        rb = _PHI_ROWS[db](xb)
        out += p0 * (ra @ rb.T)

    m = np.minimum.outer(xa, xb)
    starts = np.asarray(seg_starts, dtype=float) - t0
    psd = np.asarray(seg_psd, dtype=float)
    for s in range(starts.size):
        if psd[s] == 0.0:
            continue
        lo = max(starts[s], 0.0)
        hi = starts[s + 1] if s + 1 < starts.size else np.inf
        c = np.clip(np.minimum(hi, m) - lo, 0.0, None)
        x = (xa - lo)[:, None]
        y = (xb - lo)[None, :]
        out += psd[s] * _f_entry(da, db, x, y, c)
    return out
