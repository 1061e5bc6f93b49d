"""Pure-numpy twin of the compiled round loop (same signature and semantics)."""
import numpy as np


def _project_rows(w, center, radius):
    diff = w - center
    norm = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
    over = norm > radius
    if np.any(over):
        scaled = center + radius * diff / np.where(over, norm, 1.0)
        w = np.where(over, scaled, w)
    return w


def run_rounds(x_in, y_in, x_out, y_out, tasks, in_idx, out_idx, betas, w, w_sum, path,
               alpha, lam, radius, center, local_project, server_project):
    n_rounds, r = tasks.shape
    tau, k = in_idx.shape[2], in_idx.shape[3]
    b = out_idx.shape[3]
    center = np.asarray(center, dtype=float)
    for t in range(n_rounds):
        beta = betas[t]
        tk = tasks[t][:, None]
        loc = np.repeat(w[None, :], r, axis=0)
        for s in range(tau):
            xb = x_in[tk, in_idx[t, :, s]]
            yb = y_in[tk, in_idx[t, :, s]]
            res = np.einsum("ukd,ud->uk", xb, loc) - yb
            gin = np.einsum("uk,ukd->ud", res, xb)
            wa = loc - alpha * (2.0 * lam * loc + (2.0 / k) * gin)
            xo = x_out[tk, out_idx[t, :, s]]
            yo = y_out[tk, out_idx[t, :, s]]
            reso = np.einsum("ubd,ud->ub", xo, wa) - yo
            gout = 2.0 * lam * wa + (2.0 / b) * np.einsum("ub,ubd->ud", reso, xo)
            hv = np.einsum("ukd,uk->ud", xb, np.einsum("ukd,ud->uk", xb, gout))
            loc = loc - beta * (gout - alpha * (2.0 * lam * gout + (2.0 / k) * hv))
            with np.errstate(over="ignore", invalid="ignore"):
                finite = np.isfinite(np.sum(loc * loc, axis=1))
            if not finite.all():
                return (t, int(np.argmin(finite)), s)
            if local_project:
                loc = _project_rows(loc, center, radius)
        w[:] = loc.sum(axis=0) / r
        if server_project:
            w[:] = _project_rows(w, center, radius)
        w_sum += w
        path[t] = w
    return None
