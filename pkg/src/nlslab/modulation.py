"""Modulation decomposition and the backward-shooting construction.

A state u close to the traveling wave is split as u = R~(y, mu) + r where
the translation y and phase mu solve the d+1 orthogonality conditions

    Re int r  dQ~_j Psi conj(phase) = 0,      Im int r conj(R~) = 0,

by Newton iteration (analytic diagonal Jacobian, finite-difference refresh).
The unstable/stable spectral coefficients are alpha+- = Im int Y~_(-+) conj(r).

Shooting integrates backward from modulated final data R(Tn) + i lambda.Y(Tn)
whose lambda is tuned so alpha+(Tn) is prescribed and alpha-(Tn) = 0, and
watches the bootstrap bounds; the one unstable direction is controlled by
bisection on alpha+, the one-dimensional shadow of the degree argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evolve import CrankNicolsonStepper, EvolveConfig, _phase_half_step
from .grid import Field, Grid, h1_norm, l2_norm, real_inner
from .ground_state import GroundState
from .linearized import EigenModes, evaluate_mode_parts
from .soliton import SolitonParams, functionals, phase_factor, soliton_field


class ModulationError(RuntimeError):
    pass


class ModulationFailure(ModulationError):
    """Newton did not land on the orthogonality conditions."""


@dataclass(eq=False)
class ModulationContext:
    params: SolitonParams
    gs: GroundState
    modes: EigenModes
    psi: object
    grid: Grid
    eps_mod: float = None
    newton_tol: float = 1e-11
    max_newton: int = 50

    def __post_init__(self):
        if self.eps_mod is None:
            q = self.gs(self.gs.r_samples)
            mass = np.trapezoid(q**2, self.gs.r_samples)
            if self.gs.dim == 1:
                mass *= 2.0
            self.eps_mod = 0.1 * float(np.sqrt(mass))

    def rate(self, delta: float) -> float:
        return delta * np.sqrt(self.params.omega) * self.params.speed()


@dataclass(eq=False)
class ModulationState:
    y: np.ndarray
    mu: float
    r: Field
    alpha_plus: float
    alpha_minus: float
    t: float
    newton_iters: int = 0

    def h(self, ctx: ModulationContext) -> Field:
        """e^{-i phase~} r, the co-rotating remainder (computed on demand)."""
        ph = phase_factor(ctx.params, self.t, ctx.grid, extra=self.mu)
        return Field(self.r.grid, self.r.values * np.conj(ph))


def _tilde_pieces(ctx: ModulationContext, t: float, y: np.ndarray, mu: float):
    """Q~ Psi, its gradient fields, and the phase for given modulation."""
    grid = ctx.grid
    c = ctx.params.center(t) + y
    rr = grid.radius(c)
    q = ctx.gs(rr)
    dq = ctx.gs.derivative(rr)
    safe = np.where(rr > 0, rr, 1.0)
    pvals = ctx.psi.psi if ctx.psi is not None else 1.0
    qpsi = q * pvals
    dq_fields = [dq * (grid.coordinate(k) - c[k]) / safe * pvals
                 for k in range(grid.dim)]
    ph = phase_factor(ctx.params, t, grid, extra=mu)
    return qpsi, dq_fields, ph, c


def _orthogonality(ctx: ModulationContext, u: Field, t: float, y, mu):
    """Residuals of the d+1 conditions and the pieces needed around them."""
    qpsi, dq_fields, ph, c = _tilde_pieces(ctx, t, y, mu)
    r_vals = u.values - qpsi * ph
    w = ctx.grid.cell_volume()
    conj_ph = np.conj(ph)
    res = [float(np.sum((r_vals * conj_ph).real * dqf)) * w for dqf in dq_fields]
    res.append(float(np.sum((r_vals * conj_ph).imag * qpsi)) * w)
    scales = [float(np.sum(dqf**2)) * w for dqf in dq_fields]
    scales.append(float(np.sum(qpsi**2)) * w)
    return np.asarray(res), np.asarray(scales), r_vals, c


def decompose(ctx: ModulationContext, u: Field, t: float,
              guess=None) -> ModulationState:
    """Newton on (y, mu) for the orthogonality conditions at time t."""
    grid = ctx.grid
    d = grid.dim
    ref = soliton_field(ctx.params, ctx.gs, t, grid, ctx.psi)
    dist = l2_norm(u - ref)
    if dist > ctx.eps_mod:
        raise ModulationError(
            f"state too far from the soliton for modulation: |u-R| = {dist:.3e} "
            f"> eps = {ctx.eps_mod:.3e}"
        )
    z = np.zeros(d + 1) if guess is None else np.asarray(guess, dtype=float).copy()

    def residual(zv):
        return _orthogonality(ctx, u, t, zv[:d], zv[d])

    res, scales, r_vals, _ = residual(z)
    jac = None
    iters = 0
    for iters in range(1, ctx.max_newton + 1):
        if np.all(np.abs(res) <= ctx.newton_tol * scales):
            break
        if jac is None or iters % 5 == 0:
            # finite-difference Jacobian refresh around the analytic diagonal
            jac = np.diag(np.concatenate([scales[:d], [-scales[d]]]))
            step = 1e-7
            for j in range(d + 1):
                zp = z.copy()
                zp[j] += step
                rp, _, _, _ = residual(zp)
                jac[:, j] = (rp - res) / step
        try:
            dz = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as exc:
            raise ModulationFailure(f"singular modulation Jacobian at t={t}") from exc
        z = z - dz
        res, scales, r_vals, _ = residual(z)
    else:
        raise ModulationFailure(
            f"modulation Newton did not converge at t={t}: residuals {res}"
        )

    y, mu = z[:d], float(z[d])
    r = Field(grid, r_vals)
    center = ctx.params.center(t) + y
    y1c, y2c = evaluate_mode_parts(ctx.modes, grid, center)
    pvals = ctx.psi.psi if ctx.psi is not None else 1.0
    ph = phase_factor(ctx.params, t, grid, extra=mu)
    w = grid.cell_volume()
    y_minus = (y1c.values.real - 1j * y2c.values.real) * pvals * ph
    y_plus = (y1c.values.real + 1j * y2c.values.real) * pvals * ph
    alpha_plus = float(np.sum(y_minus * np.conj(r_vals)).imag) * w
    alpha_minus = float(np.sum(y_plus * np.conj(r_vals)).imag) * w
    return ModulationState(y=y, mu=mu, r=r, alpha_plus=alpha_plus,
                           alpha_minus=alpha_minus, t=t, newton_iters=iters)


def final_data(ctx: ModulationContext, Tn: float, lam) -> Field:
    """u(Tn) = R(Tn) + i (lam+ Y+(Tn) + lam- Y-(Tn))."""
    lam = np.asarray(lam, dtype=float)
    R = soliton_field(ctx.params, ctx.gs, Tn, ctx.grid, ctx.psi)
    c = ctx.params.center(Tn)
    y1c, y2c = evaluate_mode_parts(ctx.modes, ctx.grid, c)
    pvals = ctx.psi.psi if ctx.psi is not None else 1.0
    ph = phase_factor(ctx.params, Tn, ctx.grid)
    yp = (y1c.values.real + 1j * y2c.values.real) * pvals * ph
    ym = (y1c.values.real - 1j * y2c.values.real) * pvals * ph
    return Field(ctx.grid, R.values + 1j * (lam[0] * yp + lam[1] * ym))


def solve_modulated_final_data(ctx: ModulationContext, Tn: float,
                               alpha_plus_target: float,
                               tol: float = 1e-10) -> np.ndarray:
    """Newton on lam so that alpha+(Tn) hits the target and alpha-(Tn) = 0."""
    lam = np.zeros(2)
    target = np.array([alpha_plus_target, 0.0])

    def alphas(lv):
        st = decompose(ctx, final_data(ctx, Tn, lv), Tn)
        return np.array([st.alpha_plus, st.alpha_minus])

    scale = max(abs(alpha_plus_target), 1e-12)
    res = alphas(lam) - target
    for _ in range(30):
        if np.max(np.abs(res)) <= tol * scale:
            return lam
        jac = np.empty((2, 2))
        step = max(1e-8, 1e-3 * scale)
        for j in range(2):
            lp = lam.copy()
            lp[j] += step
            jac[:, j] = (alphas(lp) - target - res) / step
        try:
            lam = lam - np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as exc:
            raise ModulationError("degenerate mode pairing matrix") from exc
        res = alphas(lam) - target
    raise ModulationError(
        f"final-data Newton stalled: residual {res} for target {target}"
    )


@dataclass(frozen=True)
class ShootConfig:
    T0: float
    Tn: float
    delta: float = None          # default: 0.7 * fitted ground-state rate
    M: float = None              # default: 10 * max(|r(Tn)| e^{rate Tn}, 1)
    Mprime: float = None         # default: M^2
    eps_close: float = None      # default: the modulation radius
    log_every: int = 10
    keep_snapshots: bool = True

    def __post_init__(self):
        if not self.Tn > self.T0 > 0:
            raise ModulationError("need Tn > T0 > 0")


EXIT_REASONS = ("reached_T0", "r_bound", "y_mu_bound", "alpha_bound",
                "modulation_failure")


@dataclass(eq=False)
class ShootLog:
    t: np.ndarray
    r_l2: np.ndarray
    r_h1: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    lyapunov: np.ndarray
    nn: np.ndarray
    tilde_lyapunov: np.ndarray
    exit_time: float
    exit_reason: str
    alpha_target: float
    lam: np.ndarray
    M: float
    Mprime: float
    delta: float
    rate: float
    snapshots: list = field(default_factory=list)

    def rows(self):
        cols = (self.t, self.r_l2, self.r_h1, np.abs(self.y), np.abs(self.mu),
                self.alpha_plus, self.alpha_minus, self.lyapunov, self.nn,
                self.tilde_lyapunov)
        return np.column_stack(cols)


def _resolve_bounds(ctx: ModulationContext, cfg: ShootConfig, r_h1_final: float):
    delta = cfg.delta if cfg.delta is not None else 0.7 * ctx.gs.delta_fit
    rate = ctx.rate(delta)
    M = cfg.M if cfg.M is not None else \
        10.0 * max(r_h1_final * np.exp(rate * cfg.Tn), 1.0)
    Mp = cfg.Mprime if cfg.Mprime is not None else M**2
    eps = cfg.eps_close if cfg.eps_close is not None else ctx.eps_mod
    return delta, rate, M, Mp, eps


def tilde_lyapunov(ctx: ModulationContext, t: float, y) -> float:
    """The conserved combination of the modulated ansatz R~(t).

    The velocity terms cancel algebraically, leaving
    1/2 |grad(Q~ Psi)|^2 - 1/(p+1) |Q~ Psi|^(p+1) + omega/2 |Q~ Psi|^2
    evaluated with exact derivatives; its time drift is pure cutoff overlap.
    """
    grid = ctx.grid
    w = grid.cell_volume()
    c = ctx.params.center(t) + np.asarray(y)
    rr = grid.radius(c)
    q = ctx.gs(rr)
    dq = ctx.gs.derivative(rr)
    safe = np.where(rr > 0, rr, 1.0)
    pvals = ctx.psi.psi if ctx.psi is not None else 1.0
    amp = q * pvals
    kin = 0.0
    for k in range(grid.dim):
        slope = dq * (grid.coordinate(k) - c[k]) / safe * pvals
        if ctx.psi is not None:
            slope = slope + q * ctx.psi.grad_psi[k]
        kin += float(np.sum(slope**2)) * w
    mass = float(np.sum(amp**2)) * w
    pot = float(np.sum(amp ** (ctx.params.p + 1.0))) * w
    return 0.5 * kin - pot / (ctx.params.p + 1.0) + 0.5 * ctx.params.omega * mass


def backward_shoot(ctx: ModulationContext, alpha_plus: float, cfg: ShootConfig,
                   evolve_cfg: EvolveConfig) -> ShootLog:
    """Integrate backward from tuned final data, logging the bootstrap bounds.

    Stops at T0 or at the first violated bound; a modulation breakdown
    terminates with a partial log.
    """
    grid = ctx.grid
    lam = solve_modulated_final_data(ctx, cfg.Tn, alpha_plus)
    if np.any(np.abs(lam) > 10.0 * np.exp(-ctx.rate(
            cfg.delta if cfg.delta is not None else 0.7 * ctx.gs.delta_fit) * cfg.Tn)):
        raise ModulationError(f"final-data amplitude {lam} out of admissible range")
    u = final_data(ctx, cfg.Tn, lam)
    state = decompose(ctx, u, cfg.Tn)
    delta, rate, M, Mp, eps = _resolve_bounds(ctx, cfg, h1_norm(state.r))

    n_steps = max(1, int(round((cfg.Tn - cfg.T0) / evolve_cfg.dt)))
    dt = -(cfg.Tn - cfg.T0) / n_steps
    stepper = CrankNicolsonStepper(grid, dt, evolve_cfg.lin_tol)

    rows = []
    snaps = []
    guess = np.concatenate([state.y, [state.mu]])
    exit_reason, exit_time = "reached_T0", cfg.T0

    def log_row(t, st, u_here):
        f = functionals(u_here, ctx.params)
        nn = (np.exp(rate * t) * st.alpha_plus) ** 2
        rows.append((t, l2_norm(st.r), h1_norm(st.r), st.y.copy(), st.mu,
                     st.alpha_plus, st.alpha_minus, f.lyapunov, nn,
                     tilde_lyapunov(ctx, t, st.y)))
        if cfg.keep_snapshots:
            snaps.append((t, u_here))

    def violated(t, st):
        bound = np.exp(-rate * t)
        slack = 1.0 + 1e-9
        if abs(st.alpha_plus) > bound * slack or abs(st.alpha_minus) > bound * slack:
            return "alpha_bound"
        if h1_norm(st.r) > M * bound * slack:
            return "r_bound"
        if np.max(np.abs(st.y)) > Mp * bound * slack or abs(st.mu) > Mp * bound * slack:
            return "y_mu_bound"
        return None

    log_row(cfg.Tn, state, u)
    vals = u.values
    t = cfg.Tn
    for k in range(1, n_steps + 1):
        vals = _phase_half_step(vals, dt, ctx.params.p)
        vec = stepper.linear_step(vals[grid.mask])
        vals = np.zeros_like(vals)
        vals[grid.mask] = vec
        vals = _phase_half_step(vals, dt, ctx.params.p)
        t = cfg.Tn + k * dt
        if k % cfg.log_every == 0 or k == n_steps:
            u_here = Field(grid, vals)
            try:
                state = decompose(ctx, u_here, t, guess)
            except ModulationError:
                exit_reason, exit_time = "modulation_failure", t
                break
            guess = np.concatenate([state.y, [state.mu]])
            log_row(t, state, u_here)
            reason = violated(t, state)
            if reason is not None:
                exit_reason, exit_time = reason, t
                break
    else:
        exit_time = cfg.T0

    rows_arr = list(zip(*rows))
    return ShootLog(
        t=np.asarray(rows_arr[0]),
        r_l2=np.asarray(rows_arr[1]),
        r_h1=np.asarray(rows_arr[2]),
        y=np.asarray(rows_arr[3]),
        mu=np.asarray(rows_arr[4]),
        alpha_plus=np.asarray(rows_arr[5]),
        alpha_minus=np.asarray(rows_arr[6]),
        lyapunov=np.asarray(rows_arr[7]),
        nn=np.asarray(rows_arr[8]),
        tilde_lyapunov=np.asarray(rows_arr[9]),
        exit_time=exit_time,
        exit_reason=exit_reason,
        alpha_target=alpha_plus,
        lam=lam,
        M=M,
        Mprime=Mp,
        delta=delta,
        rate=rate,
        snapshots=snaps,
    )


class ShootSearchError(ModulationError):
    pass


@dataclass(eq=False)
class SearchResult:
    alpha_star: float
    log: ShootLog
    history: list
    bracket_width: float
    found: bool


def shoot_search(ctx: ModulationContext, cfg: ShootConfig,
                 evolve_cfg: EvolveConfig, max_shoots: int = 60) -> SearchResult:
    """Bisection over alpha+ inside the admissible bracket.

    Both endpoints must exit through the alpha bound with opposite signs of
    alpha+(exit); the sign change brackets the stable shot, realizing the
    one-dimensional shadow of the degree argument.
    """
    delta = cfg.delta if cfg.delta is not None else 0.7 * ctx.gs.delta_fit
    amp = np.exp(-ctx.rate(delta) * cfg.Tn)
    history = []

    def run(a):
        log = backward_shoot(ctx, a, cfg, evolve_cfg)
        history.append((a, log.exit_time, log.exit_reason,
                        float(log.alpha_plus[-1])))
        return log

    lo, hi = -amp, amp
    log_lo, log_hi = run(lo), run(hi)
    for a, log in ((lo, log_lo), (hi, log_hi)):
        if log.exit_reason != "alpha_bound":
            raise ShootSearchError(
                f"no unstable crossing detected: endpoint {a} exited via "
                f"{log.exit_reason}; check M, M', p or the horizon"
            )
    s_lo, s_hi = np.sign(log_lo.alpha_plus[-1]), np.sign(log_hi.alpha_plus[-1])
    if s_lo == s_hi:
        raise ShootSearchError(
            "no unstable crossing detected: both endpoints exit with the "
            f"same sign {s_lo}"
        )
    best = log_lo if log_lo.exit_time < log_hi.exit_time else log_hi
    best_alpha = lo if best is log_lo else hi
    for _ in range(max_shoots):
        if hi - lo < 1e-14 * amp:
            break
        mid = 0.5 * (lo + hi)
        log = run(mid)
        if log.exit_reason == "reached_T0":
            return SearchResult(mid, log, history, hi - lo, True)
        if log.exit_time < best.exit_time:
            best, best_alpha = log, mid
        if np.sign(log.alpha_plus[-1]) == s_lo:
            lo = mid
        else:
            hi = mid
    return SearchResult(best_alpha, best, history, hi - lo, False)


def alpha_minus_monitor(log: ShootLog) -> float:
    """Max over rows of |alpha-| against half the alpha bound."""
    bound = 0.5 * np.exp(-log.rate * log.t)
    ratios = np.abs(log.alpha_minus) / bound
    if not np.all(np.isfinite(ratios)):
        raise ModulationError("non-finite alpha- ratio")
    return float(np.max(ratios))


def growth_rate_fit(log: ShootLog, factor: float = 3.0) -> float:
    """Backward growth rate of |alpha+| once it tops its final-data value.

    A mistuned shot has |alpha+| ~ |mistuning| e^{e (Tn - t)} on top of the
    tuned trajectory; rows where the total has grown a few-fold past the
    final-data value are dominated by that exponential.
    """
    a = np.abs(log.alpha_plus)
    base = max(abs(a[0]), 1e-300)
    sel = a > factor * base
    if sel.sum() < 4:
        raise ModulationError("not enough growth range to fit a rate")
    slope = np.polyfit(log.t[sel], np.log(a[sel]), 1)[0]
    return float(-slope)  # grows backward in time


def lyapunov_drift_fit(log: ShootLog, rate2: float, column: str = "tilde"):
    """Fit |d lyapunov / dt| to C1 exp(-rate2 t); returns (C1, R^2, rows used).

    The default column is the modulated-ansatz combination, whose drift is
    pure cutoff overlap; the evolved state's combination ("state") sits at
    the scheme-noise floor at desk resolution.  rate2 should be twice the
    fitted profile decay rate times sqrt(omega) |v|, the rate the obstacle
    flux actually decays at.  Rows below the noise floor are excluded.
    """
    data = log.tilde_lyapunov if column == "tilde" else log.lyapunov
    t_mid = 0.5 * (log.t[1:] + log.t[:-1])
    dt = np.diff(log.t)
    drift = np.abs(np.diff(data) / dt)
    order = np.argsort(t_mid)
    t_mid, drift = t_mid[order], drift[order]
    peak = np.max(drift) if len(drift) else 0.0
    sel = drift > max(1e-11 * peak, 1e-300)
    if sel.sum() < 5:
        raise ModulationError("lyapunov drift entirely below the noise floor")
    ts, ds = t_mid[sel], np.log(drift[sel])
    model = -rate2 * ts
    logc1 = float(np.mean(ds - model))
    ss_res = float(np.sum((ds - model - logc1) ** 2))
    ss_tot = float(np.sum((ds - np.mean(ds)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(logc1)), r2, int(sel.sum())


def uniform_distance_fit(ctx: ModulationContext, log: ShootLog):
    """Fitted constant C in |u(t) - R(t)|_H1 <= C exp(-rate t) over the log."""
    if not log.snapshots:
        raise ModulationError("need retained snapshots")
    vals = []
    for t, u in log.snapshots:
        ref = soliton_field(ctx.params, ctx.gs, t, ctx.grid, ctx.psi)
        vals.append(h1_norm(u - ref) * np.exp(log.rate * t))
    return float(np.max(vals)), np.asarray(vals)


def coercivity_along_trajectory(ctx: ModulationContext, log: ShootLog,
                                drop_alpha: bool = False):
    """Fitted constants of the translated coercivity bound along a shoot.

    Evaluates the quadratic form of the operators recentered at tv + y(t) on
    h = e^{-i phase~} r and returns per-row constants
    C_t = |h|_H1^2 / (form + (alpha+-)^2 + M^2 e^{-4 rate t}).
    """
    if not log.snapshots:
        raise ModulationError("need retained snapshots")
    from .grid import gradient, laplacian_dirichlet

    grid = ctx.grid
    w = grid.cell_volume()
    out = []
    for (t, u), y, mu, ap, am in zip(log.snapshots, log.y, log.mu,
                                     log.alpha_plus, log.alpha_minus):
        qpsi, _, ph, c = _tilde_pieces(ctx, t, y, mu)
        r_vals = u.values - qpsi * ph
        h_vals = r_vals * np.conj(ph)
        pot = ctx.gs(grid.radius(c)) ** (ctx.params.p - 1.0)
        form = 0.0
        for part, coef in ((h_vals.real, ctx.params.p), (h_vals.imag, 1.0)):
            f = Field(grid, part.astype(complex))
            lap = laplacian_dirichlet(f)
            kin = -real_inner(lap, f)
            mass = float(np.sum(part**2)) * w
            potterm = float(np.sum(pot * part**2)) * w
            form += kin + ctx.params.omega * mass - coef * potterm
        hf = Field(grid, h_vals)
        h1sq = h1_norm(hf) ** 2
        alpha_term = 0.0 if drop_alpha else ap**2 + am**2
        denom = form + alpha_term + log.M**2 * np.exp(-4.0 * log.rate * t)
        out.append((t, h1sq, form, h1sq / denom if denom > 0 else np.inf))
    arr = np.asarray(out)
    return arr
