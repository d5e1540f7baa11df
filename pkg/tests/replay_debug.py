"""Developer harness: capture a failing sub-problem and replay its inner loop.

Not part of the test suite; invoked by hand during solver work:
    python tests/replay_debug.py capture   # run testfn, pickle first failure
    python tests/replay_debug.py replay N  # replay level N with tracing
"""
import pickle
import sys

import numpy as np
import scipy.sparse as sp

import nlhlsp.shlsp as shlsp
from nlhlsp.hlsp_ipm import (
    ActiveSetState,
    IpmError,
    IpmSettings,
    _assemble_pool,
    _solve_level,
    update_active_set,
)
from nlhlsp.matrix_kernels import cholesky_solve
from nlhlsp.problems import make_testfn_hierarchy
from nlhlsp.shlsp import SolverSettings, solve_nl_hlsp

PATH = "/tmp/replay_case.pkl"


def capture():
    prob = make_testfn_hierarchy()
    orig = shlsp.solve_hlsp

    def wrapped(levels, radii, settings):
        try:
            return orig(levels, radii, settings)
        except IpmError:
            pickle.dump((levels, radii), open(PATH, "wb"))
            raise

    shlsp.solve_hlsp = wrapped
    try:
        res = solve_nl_hlsp(prob, np.full(10, 6.0), SolverSettings(chi=1e-5))
        print("no failure:", res.status, res.outer_iterations)
    except IpmError as exc:
        print("captured:", exc)


def replay(target_level, iters=200, log_every=10):
    levels, radii = pickle.load(open(PATH, "rb"))
    print("radii:", np.round(radii, 6))
    settings = IpmSettings()
    state = ActiveSetState.initial(levels[0].n)
    dx = np.zeros(levels[0].n)
    for li in range(target_level - 1):
        work = _solve_level(levels[li], state, dx, float(radii[li]), settings)
        state, _ = update_active_set(state, levels[li], work, settings.xi, settings)
        print(f"level {li+1}: inner={work.inner} kkt={work.kkt:.1e} basis {state.basis.shape}")
    level = levels[target_level - 1]
    nmat = state.basis
    ap, bp, prov = _assemble_pool(state, dx, float(radii[target_level - 1]))
    apn0 = ap @ nmat
    reach = np.sqrt(np.asarray(apn0.multiply(apn0).sum(axis=1)).ravel())
    idx = np.nonzero(reach > 1e-12)[0]
    ap = sp.csr_array(ap[idx, :])
    bp = bp[idx]
    prov = [prov[i] for i in idx]
    apn = (ap @ nmat).toarray()
    aen = (level.a_eq @ nmat).toarray()
    ain = (level.a_ineq @ nmat).toarray()
    s_eq = level.a_eq @ dx - level.b_eq
    s_iq = level.a_ineq @ dx - level.b_ineq
    sP = ap @ dx - bp
    mi, mp = s_iq.size, sP.size
    print(f"level {target_level}: m_eq={level.m_eq} m_ineq={mi} pool={mp} "
          f"|b_eq|={np.max(np.abs(level.b_eq), initial=0):.2e}")
    w = np.maximum(1.0, 1.0 - s_iq)
    v = -s_iq - w
    wp = np.maximum(-sP, 1.0)
    lp = 1.0 / wp
    mu_i = max(float(np.mean(-v * w)) if mi else 0.0, 1.0 if mi else 0.0)
    mu_p = 1.0 if mp else 0.0
    sigma = 0.1
    stage = 0
    zs = np.zeros(nmat.shape[1])
    prox = settings.primal_prox
    scale = max(1.0, np.max(np.abs(level.b_eq), initial=0.0),
                np.max(np.abs(level.b_ineq), initial=0.0))
    tol = settings.ipm_tol * scale
    for it in range(iters):
        f2 = -s_iq - v - w
        f4 = -sP - wp
        ci = -v * w
        cp = lp * wp
        g = aen.T @ s_eq - (ain.T @ v if mi else 0.0) + (apn.T @ lp if mp else 0.0) + prox * zs
        kkt = np.sqrt(g @ g + f2 @ f2 + f4 @ f4 + ci @ ci + cp @ cp)
        if kkt <= tol:
            print("converged at", it)
            return
        barrier = np.sqrt(g @ g + f2 @ f2 + f4 @ f4
                          + (ci - mu_i) @ (ci - mu_i) + (cp - mu_p) @ (cp - mu_p))
        if stage >= 2 and barrier <= max(mu_i, mu_p, tol):
            mu_i = max(sigma * mu_i, 1e-12) if mi else 0.0
            mu_p = max(sigma * mu_p, 1e-12) if mp else 0.0
            stage = 0
        ti_t = max(mu_i, sigma * float(np.mean(ci))) if mi else 0.0
        tp_t = max(mu_p, sigma * float(np.mean(cp))) if mp else 0.0
        den = np.minimum(v - w, -1e-280)
        sig_i = v / den
        t_i = (ti_t + v * w + v * f2) / den
        wps = np.maximum(wp, 1e-280)
        sig_p = np.minimum(lp / wps, 1e18)
        t_p = (tp_t - lp * wp - lp * f4) / wps
        c_red = aen.T @ aen + prox * np.eye(nmat.shape[1])
        if mi:
            c_red = c_red + ain.T @ (sig_i[:, None] * ain)
        if mp:
            c_red = c_red + apn.T @ (sig_p[:, None] * apn)
        rhs = -g
        if mi:
            rhs = rhs + ain.T @ t_i
        if mp:
            rhs = rhs - apn.T @ t_p
        dz, _ = cholesky_solve(c_red, rhs)
        dsE = aen @ dz
        dsI = ain @ dz if mi else np.zeros(0)
        dsP = apn @ dz if mp else np.zeros(0)
        dv = t_i - sig_i * dsI if mi else np.zeros(0)
        dw = -dsI - dv + f2 if mi else np.zeros(0)
        dwp = -dsP + f4 if mp else np.zeros(0)
        dlp = t_p + sig_p * dsP if mp else np.zeros(0)
        alpha = 1.0
        with np.errstate(over="ignore", divide="ignore"):
            for cur, st in (((-v), (-dv)), (w, dw), (wp, dwp), (lp, dlp)):
                blk = st < 0
                if np.any(blk):
                    alpha = min(alpha, 0.995 * np.min(cur[blk] / -st[blk]))
        comp0 = np.concatenate([ci, cp])
        tgtv = np.concatenate([np.full(mi, ti_t), np.full(mp, tp_t)])
        hi = np.maximum(4 * comp0, 4 * tgtv)
        lo = np.minimum(comp0, tgtv) / 4
        nshrink = 0
        for _ in range(30):
            ca = np.concatenate([
                -(v + alpha * dv) * (w + alpha * dw),
                (lp + alpha * dlp) * (wp + alpha * dwp),
            ])
            if np.all(ca <= hi) and np.all(ca >= lo):
                break
            alpha *= 0.5
            nshrink += 1
        if it % log_every == 0 or it >= iters - 6:
            print(f"it={it:3d} mu=({mu_i:.0e},{mu_p:.0e}) tgt=({ti_t:.0e},{tp_t:.0e}) "
                  f"kkt={kkt:.2e} |g|={np.linalg.norm(g):.1e} |f2|={np.max(np.abs(f2), initial=0):.0e} "
                  f"ci=[{ci.min() if mi else 0:.0e},{ci.max() if mi else 0:.0e}] "
                  f"cp=[{cp.min() if mp else 0:.0e},{cp.max() if mp else 0:.0e}] "
                  f"al={alpha:.1e} shr={nshrink}")
        s_eq = s_eq + alpha * dsE
        s_iq = s_iq + alpha * dsI if mi else s_iq
        sP = sP + alpha * dsP if mp else sP
        if mi:
            v = np.minimum(v + alpha * dv, 0.0)
            w = np.maximum(w + alpha * dw, 1e-280)
        if mp:
            wp = np.maximum(wp + alpha * dwp, 1e-280)
            lp = np.maximum(lp + alpha * dlp, 0.0)
        zs += alpha * dz
        stage += 1


if __name__ == "__main__":
    if sys.argv[1] == "capture":
        capture()
    else:
        replay(int(sys.argv[2]))
