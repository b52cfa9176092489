"""Pure-numpy integration kernel (fallback when the compiled core is absent)."""
import numpy as np


def integrate_chunk(y, xi, E, L, f_idx, t_idx, g, b, hs, theta, vm,
                    ang_pos, mag_pos, om_pos, kind, c1, c2, c3, c4,
                    record_every, step0, out_theta, out_vm, vmin, vmax):
    """Advance ``y`` through ``len(xi)`` steps of ``y += E f(y) + L xi_k``.

    ``theta``/``vm`` are full per-bus work arrays; entries whose position
    array holds ``-1`` stay fixed.  Every ``record_every``-th global step is
    written to the next free row of ``out_theta``/``out_vm``.  Returns the
    number of rows written, or ``-(k + 1)`` when step ``k`` of this chunk
    left the voltage band.
    """
    n = theta.shape[0]
    has_a = ang_pos >= 0
    has_m = mag_pos >= 0
    a_src = ang_pos[has_a]
    m_src = mag_pos[has_m]
    load = kind == 1
    gen = kind == 2
    gen_om = om_pos[gen]
    gen_a = ang_pos[gen]
    load_a = ang_pos[load]
    load_m = mag_pos[load]
    f = np.zeros_like(y)
    written = 0
    for k in range(xi.shape[0]):
        d = theta[f_idx] - theta[t_idx]
        c = np.cos(d)
        s = np.sin(d)
        vf = vm[f_idx]
        vt = vm[t_idx]
        vv = vf * vt
        p_ft = vf * vf * g - vv * (g * c + b * s)
        q_ft = -vf * vf * (b + hs) - vv * (g * s - b * c)
        p_tf = vt * vt * g - vv * (g * c - b * s)
        q_tf = -vt * vt * (b + hs) - vv * (-g * s - b * c)
        P = np.bincount(f_idx, p_ft, n) + np.bincount(t_idx, p_tf, n)
        Q = np.bincount(f_idx, q_ft, n) + np.bincount(t_idx, q_tf, n)
        f[load_a] = (c1[load] - P[load]) * c2[load]
        f[load_m] = (c3[load] - Q[load]) * c4[load]
        om = y[gen_om]
        f[gen_a] = om
        f[gen_om] = (c1[gen] - P[gen] - c3[gen] * om) * c2[gen]
        y += E @ f + L @ xi[k]
        theta[has_a] = y[a_src]
        vm[has_m] = y[m_src]
        if vm.min() < vmin or vm.max() > vmax or not np.isfinite(y).all():
            return -(k + 1)
        if (step0 + k + 1) % record_every == 0:
            out_theta[written] = theta
            out_vm[written] = vm
            written += 1
    return written
