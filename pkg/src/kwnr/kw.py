"""Kernel-weighted pseudoweights from balancing-score differences.

Each reference unit's design weight is distributed over cohort units in
proportion to kernel similarity of balancing scores, normalized per
reference unit so total design mass is conserved.
"""

from dataclasses import dataclass

import numpy as np

from .data_model import Provenance, WeightSet

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


class OrphanReferenceError(Exception):
    """Reference units whose kernel row over the cohort sums to zero."""

    def __init__(self, indices, bandwidth):
        self.indices = tuple(int(i) for i in indices)
        self.bandwidth = bandwidth
        shown = ", ".join(str(i) for i in self.indices[:10])
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(
            f"{len(self.indices)} reference unit(s) have no cohort unit within "
            f"kernel support at h={bandwidth:g} (indices {shown}{more}); "
            f"consider a wider bandwidth"
        )


def gaussian_kernel(t):
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * t * t) / _SQRT_2PI


def epanechnikov_kernel(t):
    t = np.asarray(t, dtype=float)
    return np.where(np.abs(t) < 1.0, 0.75 * (1.0 - t * t), 0.0)


def triweight_kernel(t):
    t = np.asarray(t, dtype=float)
    u = np.maximum(1.0 - t * t, 0.0)
    return (35.0 / 32.0) * u**3


KERNELS = {
    "gaussian": gaussian_kernel,
    "epanechnikov": epanechnikov_kernel,
    "triweight": triweight_kernel,
}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel function and bandwidth; 'silverman' resolves on pooled scores."""

    kernel: str = "gaussian"
    bandwidth: float | str = "silverman"

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(
                f"unknown kernel '{self.kernel}'; choose from {sorted(KERNELS)}"
            )
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise ValueError("bandwidth must be a positive number or 'silverman'")
        elif not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
            raise ValueError("explicit bandwidth must be positive and finite")

    def resolve_bandwidth(self, pooled_scores):
        if isinstance(self.bandwidth, str):
            return silverman_bandwidth(pooled_scores)
        return float(self.bandwidth)


def silverman_bandwidth(scores):
    """0.9 * min(sd, IQR/1.34) * n^(-1/5); falls back to sd when IQR is 0."""
    scores = np.asarray(scores, dtype=float).ravel()
    n = scores.shape[0]
    if n < 2:
        raise ValueError("bandwidth rule needs at least 2 scores")
    sd = float(np.std(scores, ddof=1))
    q75, q25 = np.percentile(scores, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        raise ValueError("degenerate scores: zero spread, bandwidth undefined")
    return 0.9 * spread * n ** (-0.2)


def kw_pseudoweights(scores_c, scores_s, d_s, spec: KernelSpec = KernelSpec(),
                     *, chunk=512):
    """Kernel-weighted pseudoweights for cohort units.

    For reference unit i with score b_i and weight d_i, the kernel row
    K((b_i - b_j)/h) over cohort scores b_j is normalized to sum to one and
    d_i is spread over the cohort accordingly.  Reference rows are processed
    in fixed-size chunks accumulated in index order, so results do not depend
    on chunking.
    """
    b_c = np.asarray(scores_c, dtype=float).ravel()
    b_s = np.asarray(scores_s, dtype=float).ravel()
    d_s = np.asarray(d_s, dtype=float).ravel()
    if b_s.shape[0] != d_s.shape[0]:
        raise ValueError("reference scores and weights must align")
    if b_c.size == 0 or b_s.size == 0:
        raise ValueError("both samples must be nonempty")
    h = spec.resolve_bandwidth(np.concatenate([b_c, b_s]))
    kernel = KERNELS[spec.kernel]

    out = np.zeros(b_c.shape[0])
    orphans = []
    for start in range(0, b_s.shape[0], chunk):
        stop = min(start + chunk, b_s.shape[0])
        k = kernel((b_s[start:stop, None] - b_c[None, :]) / h)
        rowsum = k.sum(axis=1)
        bad = rowsum <= 0.0
        if np.any(bad):
            orphans.extend(start + i for i in np.nonzero(bad)[0])
            rowsum = np.where(bad, 1.0, rowsum)
        out += (d_s[start:stop] / rowsum) @ k
    if orphans:
        raise OrphanReferenceError(orphans, h)
    return WeightSet(out, Provenance.KW)
