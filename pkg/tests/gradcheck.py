"""Shared directional gradient check with an FD cancellation floor.

Central differences of a loss L carry ~eps*|L|/h of roundoff noise; the
comparison treats agreement within that floor as a pass so that blocks with
tiny directional derivatives are not failed on numerical noise alone.
"""

import numpy as np

REL_TOL = 1e-4
_FLOOR_FACTOR = 32 * np.finfo(np.float64).eps


def check_block(loss_fn, tensor, rng, rel_tol=REL_TOL):
    """Assert the tensor's analytic gradient matches central differences
    along a random direction within ``rel_tol`` (plus the FD noise floor).
    Requires gradients to be already populated. Returns the relative error.
    """
    v = rng.normal(size=tensor.data.shape)
    v /= np.linalg.norm(v.ravel()) + 1e-300
    h = 1e-5 * max(1.0, float(np.abs(tensor.data).max()))
    orig = tensor.data.copy()
    tensor.data = orig + h * v
    lp = float(loss_fn().data)
    tensor.data = orig - h * v
    lm = float(loss_fn().data)
    tensor.data = orig
    fd = (lp - lm) / (2 * h)
    analytic = float((tensor.grad * v).sum())
    floor = _FLOOR_FACTOR * max(abs(lp), abs(lm)) / (2 * h)
    err = abs(fd - analytic)
    bound = max(rel_tol * max(abs(fd), abs(analytic)), floor)
    assert err <= bound, (
        f"{tensor.name}: analytic {analytic:.8g} vs central-difference {fd:.8g} "
        f"(|err| {err:.3g} > bound {bound:.3g})"
    )
    return err / max(abs(fd), abs(analytic), 1e-300)
