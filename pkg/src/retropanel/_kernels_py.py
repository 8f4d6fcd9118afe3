"""Pure-numpy versions of the inner loops in ``_kernels.pyx``.

Both modules expose the same functions with the same semantics; the
compiled one is picked at import by ``_backend``.
"""

import numpy as np

_TINY = 1e-300


def fe_sweeps(R, w, gamma, delta, max_sweeps=200, tol=1e-12):
    """Weighted alternating update of unit and time effects, in place.

    Minimises ``sum w * (R - gamma_i - delta_t)**2`` over gamma and delta by
    exact block updates. Rows or columns with zero total weight keep their
    current value. Returns the number of sweeps performed.
    """
    row_w = w.sum(axis=1)
    col_w = w.sum(axis=0)
    row_ok = row_w > 0
    col_ok = col_w > 0
    wr_row = (w * R).sum(axis=1)
    wr_col = (w * R).sum(axis=0)
    scale = tol * (1.0 + np.abs(R).max()) if R.size else tol
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        new_g = np.where(row_ok, (wr_row - w @ delta) / np.where(row_ok, row_w, 1.0), gamma)
        new_d = np.where(col_ok, (wr_col - new_g @ w) / np.where(col_ok, col_w, 1.0), delta)
        change = max(np.abs(new_g - gamma).max(initial=0.0), np.abs(new_d - delta).max(initial=0.0))
        gamma[:] = new_g
        delta[:] = new_d
        if change <= scale:
            break
    return sweeps


def twoway_demean(M, tol=1e-10, max_iter=1000):
    """Alternate row and column demeaning until both sets of means vanish."""
    out = np.array(M, dtype=float, copy=True)
    iters = 0
    for it in range(max_iter):
        iters = it + 1
        out -= out.mean(axis=1, keepdims=True)
        out -= out.mean(axis=0, keepdims=True)
        if np.abs(out.mean(axis=1)).max(initial=0.0) <= tol:
            break
    return out, iters


def scm_eg(y, C, eta0=0.1, clip=5.0, tol=1e-3, max_iter=10000, max_halvings=40):
    """Exponentiated-gradient descent for simplex-constrained least squares.

    Minimises ``sum_s (y_s - sum_i omega_i C_is)**2`` with ``omega`` on the
    probability simplex, starting from uniform weights. Gradients are clipped
    to ``[-clip, clip]``; the step halves until the objective does not
    increase. Stops once the relative objective decrease falls below ``tol``.

    Returns ``(omega, n_iter, converged, obj_trace, sum_err_trace,
    min_weight_trace, grad_max_trace)`` where traces include the start point.
    """
    y = np.asarray(y, dtype=float)
    C = np.asarray(C, dtype=float)
    n_controls = C.shape[0]
    omega = np.full(n_controls, 1.0 / n_controls)
    resid = y - omega @ C
    f = float(resid @ resid)
    obj = [f]
    sum_err = [abs(omega.sum() - 1.0)]
    min_w = [omega.min()]
    gmax = [0.0]
    converged = False
    n_iter = 0
    for k in range(max_iter):
        if f <= _TINY:
            converged = True
            break
        g = -2.0 * (C @ resid)
        gc = np.clip(g, -clip, clip)
        eta = eta0
        accepted = False
        for _ in range(max_halvings):
            cand = omega * np.exp(-eta * gc)
            cand /= cand.sum()
            r_c = y - cand @ C
            f_c = float(r_c @ r_c)
            if f_c <= f:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            converged = True
            break
        n_iter = k + 1
        rel = (f - f_c) / max(f, _TINY)
        omega, resid, f = cand, r_c, f_c
        obj.append(f)
        sum_err.append(abs(omega.sum() - 1.0))
        min_w.append(omega.min())
        gmax.append(np.abs(gc).max())
        if rel < tol:
            converged = True
            break
    return (
        omega,
        n_iter,
        converged,
        np.array(obj),
        np.array(sum_err),
        np.array(min_w),
        np.array(gmax),
    )
