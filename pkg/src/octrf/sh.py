"""Real spherical-harmonics basis through degree 3 and color decoding.

Constants follow the hard-coded graphics convention (svox / 3DGS signs).
The decoded color is a per-channel sigmoid of the SH expansion, which keeps
outputs in (0, 1) with smooth gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigError, InputError
from .octree import LeafPayload

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

UNIT_TOLERANCE = 1e-4


def eval_sh_basis_many(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values for a batch of unit directions, shape (N, (degree+1)**2)."""
    if degree not in (0, 1, 2, 3):
        raise ConfigError(f"degree must be in 0..3, got {degree}")
    d = np.asarray(dirs, dtype=np.float64)
    squeeze = d.ndim == 1
    d = d.reshape(-1, 3)
    norms = np.linalg.norm(d, axis=1)
    if np.abs(norms - 1.0).max(initial=0.0) > UNIT_TOLERANCE:
        raise InputError("directions must be unit vectors (tolerance 1e-4)")

    n = d.shape[0]
    basis = np.empty((n, (degree + 1) ** 2), dtype=np.float64)
    basis[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = d[:, 0], d[:, 1], d[:, 2]
        basis[:, 1] = -SH_C1 * y
        basis[:, 2] = SH_C1 * z
        basis[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        basis[:, 4] = SH_C2[0] * xy
        basis[:, 5] = SH_C2[1] * yz
        basis[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        basis[:, 7] = SH_C2[3] * xz
        basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        basis[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        basis[:, 10] = SH_C3[1] * xy * z
        basis[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        basis[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        basis[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        basis[:, 14] = SH_C3[5] * z * (xx - yy)
        basis[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return basis[0] if squeeze else basis


def eval_sh_basis(degree: int, direction) -> np.ndarray:
    """Basis values for one unit direction, shape ((degree+1)**2,)."""
    return eval_sh_basis_many(degree, np.asarray(direction, dtype=np.float64).reshape(3))


def degree_for_basis(basis_count: int) -> int:
    table = {1: 0, 4: 1, 9: 2, 16: 3}
    if basis_count not in table:
        raise ConfigError(f"basis_count must be 1, 4, 9 or 16, got {basis_count}")
    return table[basis_count]


def decode_color(payload, direction) -> np.ndarray:
    """View-dependent rgb in (0,1): per-channel sigmoid of the SH expansion."""
    sh = payload.sh if isinstance(payload, LeafPayload) else payload
    sh = np.asarray(sh, dtype=np.float64).reshape(3, -1)
    basis = eval_sh_basis(degree_for_basis(sh.shape[1]), direction)
    return expit(sh @ basis)


def sh_from_rgb(rgb, basis_count: int) -> np.ndarray:
    """Degree-0 coefficients whose decoded color matches ``rgb`` at any view.

    Colors are pulled into [1e-4, 1-1e-4] before the logit so saturated
    inputs stay finite.
    """
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 1e-4, 1.0 - 1e-4)
    sh = np.zeros(rgb.shape[:-1] + (3, basis_count), dtype=np.float64)
    sh[..., 0] = logit(rgb) / SH_C0
    return sh.reshape(rgb.shape[:-1] + (3 * basis_count,))
