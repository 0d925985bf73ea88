"""Parameter-preserving H2 model order reduction of the bilinear pipe model.

The reduction is projection based: the full state is approximated as
x = V x_r and the residual is forced orthogonal to span(W) (Petrov-Galerkin),
giving reduced matrices T A V, T Q_i V, T B, C V with T = (W'V)^-1 W'.

Two things make this module more than a plain projection:

* The basis pair (V, W) is computed by the bilinear rational-Krylov fixed
  point: eigendecompose the current reduced system matrix, solve a pair of
  generalized Sylvester equations for new primitive bases, orthonormalize,
  and repeat until the reduced spectrum settles.  At a fixed point the
  reduced model satisfies the H2 optimality conditions expressed through the
  generalized (bilinear) Lyapunov equations.

* The parameter dependency of the pipe matrices is decoupled before
  projection.  A(p) and B(p) are exact linear combinations of constant
  factor matrices with scalar coefficient maps g(p) and h(p), so the
  projected factors can be recombined at any parameter value without
  touching full-order quantities again.
"""

from dataclasses import dataclass, field
import json

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConfigurationError,
    ConvergenceError,
    IntegratorError,
    ProjectionError,
    SpectralError,
)
from .fom import (
    N_INPUTS,
    BilinearFom,
    PipeGeometry,
    ThermalParameters,
    a_expansion_factors,
    b_expansion_factors,
    input_vector,
)

#: Identifiers of the built-in parameter coefficient maps, stored in
#: persisted models so a loader can refuse unknown conventions.
G_MAP_ID = "pipe-thermal-g:lam,D/dz^2"
H_MAP_ID = "pipe-thermal-h:lam,D/dz^2,1/dz"

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class ParametricFactors:
    """Constant matrix factors of A(p) and B(p) for one grid.

    A(p) = g_1(p) A_1 + g_2(p) A_2 and B(p) = sum_i h_i(p) B_i hold exactly
    (same floating-point expressions as direct assembly).
    """

    a_factors: tuple
    b_factors: tuple
    dz: float

    def g(self, p: ThermalParameters) -> np.ndarray:
        return np.array([p.lam, p.diffusion / self.dz**2])

    def h(self, p: ThermalParameters) -> np.ndarray:
        return np.array([p.lam, p.diffusion / self.dz**2, 1.0 / self.dz])

    def assemble_a(self, p: ThermalParameters) -> sp.csr_matrix:
        g = self.g(p)
        return (g[0] * self.a_factors[0] + g[1] * self.a_factors[1]).tocsr()

    def assemble_b(self, p: ThermalParameters) -> sp.csr_matrix:
        h = self.h(p)
        return (h[0] * self.b_factors[0] + h[1] * self.b_factors[1]
                + h[2] * self.b_factors[2]).tocsr()


def decouple_parameters(geom: PipeGeometry) -> ParametricFactors:
    """Split the pipe system matrices into parameter-free factors."""
    n = geom.grid_points
    return ParametricFactors(
        a_factors=a_expansion_factors(n),
        b_factors=b_expansion_factors(n),
        dz=geom.dz,
    )


@dataclass(frozen=True)
class ProjectionBasis:
    """Petrov-Galerkin basis pair with diagnostics of the fixed point."""

    v: np.ndarray
    w: np.ndarray
    cond_wv: float
    converged: bool
    iterations: int
    spectrum: np.ndarray
    convergence_history: tuple

    @property
    def order(self) -> int:
        return self.v.shape[1]


@dataclass(frozen=True)
class Gramian:
    """Solution of one generalized Lyapunov equation."""

    matrix: np.ndarray
    kind: str
    residual: float
    iterations: int


def solve_generalized_lyapunov(a, q_slices, rhs_factor, kind="reachability",
                               tol=1e-10, max_iter=500) -> Gramian:
    """Solve A P + P A' + sum_i Q_i P Q_i' + G G' = 0 (reachability).

    For kind="observability" the transposed pattern
    A' P + P A + sum_i Q_i' P Q_i + H' H = 0 is solved.  ``rhs_factor`` is G
    (n x m) respectively H (l x n).

    Uses a stationary iteration: the bilinear term is frozen at the previous
    iterate and moved to the right-hand side, leaving one standard Lyapunov
    equation per sweep (dense Bartels-Stewart solve).  The sweep converges
    when the bilinear terms are weak relative to the linear dynamics; if the
    residual grows instead, a ConvergenceError reports how far it got.
    """
    if kind not in ("reachability", "observability"):
        raise ConfigurationError(f"unknown Gramian kind {kind!r}")
    a_mat = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
    slices = [q.toarray() if sp.issparse(q) else np.asarray(q, dtype=float)
              for q in q_slices]
    factor = rhs_factor.toarray() if sp.issparse(rhs_factor) else np.asarray(rhs_factor, dtype=float)
    if factor.ndim == 1:
        factor = factor[:, None] if kind == "reachability" else factor[None, :]

    if kind == "observability":
        a_mat = a_mat.T
        slices = [q.T for q in slices]
        factor = factor.T
    rhs = factor @ factor.T

    eigs = np.linalg.eigvals(a_mat)
    if eigs.real.max() >= 0.0:
        raise SpectralError(
            f"system matrix is not Hurwitz (max real part {eigs.real.max():.3e})"
        )

    slices = [q for q in slices if np.any(q)]
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return Gramian(np.zeros_like(a_mat), kind, 0.0, 0)

    def residual_norm(p):
        res = a_mat @ p + p @ a_mat.T + rhs
        for q in slices:
            res += q @ p @ q.T
        return np.linalg.norm(res) / rhs_norm

    p_mat = sla.solve_continuous_lyapunov(a_mat, -rhs)
    p_mat = 0.5 * (p_mat + p_mat.T)
    res = residual_norm(p_mat)
    best = res
    for it in range(1, max_iter + 1):
        if res <= tol:
            return Gramian(p_mat, kind, res, it - 1)
        bilinear = sum(q @ p_mat @ q.T for q in slices)
        p_mat = sla.solve_continuous_lyapunov(a_mat, -(rhs + bilinear))
        p_mat = 0.5 * (p_mat + p_mat.T)
        res = residual_norm(p_mat)
        if not np.isfinite(res) or res > max(1e4 * best, 1e8):
            raise ConvergenceError(
                "generalized Lyapunov fixed point diverged "
                "(bilinear terms too strong for the linear dynamics)",
                iterations=it, residual=float(res) if np.isfinite(res) else np.inf,
            )
        best = min(best, res)
    raise ConvergenceError(
        "generalized Lyapunov fixed point did not reach tolerance",
        iterations=max_iter, residual=float(res),
    )


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(m)
    d = np.abs(np.diag(r))
    if d.size and d.min() <= 1e-13 * max(d.max(), 1e-300):
        raise ProjectionError("rank-deficient basis candidate")
    return q


def _realify(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Turn complex basis columns into real ones, pairing conjugate modes."""
    r = x.shape[1]
    cols = []
    used = np.zeros(r, dtype=bool)
    for i in range(r):
        if used[i]:
            continue
        used[i] = True
        li = lam[i]
        if abs(li.imag) <= 1e-10 * max(1.0, abs(li)):
            cols.append(x[:, i].real)
            continue
        target = li.conjugate()
        partner = None
        for k in range(i + 1, r):
            if not used[k] and abs(lam[k] - target) <= 1e-8 * max(1.0, abs(li)):
                partner = k
                break
        if partner is not None:
            used[partner] = True
        cols.append(x[:, i].real)
        cols.append(x[:, i].imag)
    return np.column_stack(cols[:r])


def _sorted_spectrum(lam: np.ndarray) -> np.ndarray:
    order = np.lexsort((lam.imag, lam.real))
    return lam[order]


def _dominant_eigenbasis(a, r: int) -> np.ndarray:
    """Eigenvectors of the r least-negative modes of the (symmetric) A."""
    n = a.shape[0]
    if n <= 600:
        vals, vecs = np.linalg.eigh(a.toarray())
        return vecs[:, np.argsort(vals)[::-1][:r]]
    vals, vecs = spla.eigsh(a.tocsc(), k=r, which="LA", v0=np.ones(n))
    return vecs[:, np.argsort(vals)[::-1]]


def h2_reduce(factors: ParametricFactors, p_star: ThermalParameters,
              fom: BilinearFom, r: int, tol: float = 1e-6, max_iter: int = 100,
              *, input_scales=None, shift_velocity: float = 0.0,
              seed: int = 0) -> ProjectionBasis:
    """Compute the H2 basis pair for the bilinear pipe system at ``p_star``.

    The iteration reduces a gauge-transformed copy of the system: input
    channels may be scaled to comparable magnitudes (``input_scales``) and
    the transport term may be linearized around a nominal operating velocity
    (``shift_velocity`` moves v_op * Q_1 into the system matrix, leaving the
    velocity deviation as the bilinear input).  Both transformations only
    shape the reduction objective; the returned (V, W) project the original
    parameter-decoupled matrices.

    Returns the best iterate with ``converged=False`` when ``max_iter`` is
    exhausted; a hard error is only raised for structural failures.
    """
    n = fom.n
    if not 1 <= r <= n:
        raise ConfigurationError(f"reduced order must satisfy 1 <= r <= {n}, got {r}")
    if r == n:
        eye = np.eye(n)
        a_sys = factors.assemble_a(p_star)
        lam = _sorted_spectrum(np.linalg.eigvals(a_sys.toarray()))
        return ProjectionBasis(v=eye, w=eye.copy(), cond_wv=1.0, converged=True,
                               iterations=0, spectrum=lam, convergence_history=())

    a_sys = factors.assemble_a(p_star).tocsr()
    b_sys = factors.assemble_b(p_star).tocsr()
    active = fom.active_slices
    q_sys = [fom.q_slices[i].tocsr() for i in active]

    if shift_velocity:
        if shift_velocity < 0.0:
            raise ConfigurationError("shift velocity must be non-negative")
        # v = v_op + dv: transport at v_op joins the linear part and the
        # v*T_in ghost term contributes v_op/dz to the T_in channel.
        vel = active.index(0) if 0 in active else None
        if vel is None:
            raise ConfigurationError("no velocity slice to shift")
        a_sys = (a_sys + shift_velocity * q_sys[vel]).tocsr()
        bump = sp.csr_matrix(([shift_velocity / factors.dz], ([0], [1])),
                             shape=b_sys.shape)
        b_sys = (b_sys + bump).tocsr()

    if input_scales is not None:
        scales = np.asarray(input_scales, dtype=float)
        if scales.shape != (N_INPUTS,) or np.any(scales <= 0.0):
            raise ConfigurationError("input_scales must be 4 positive numbers")
        q_sys = [scales[i] * q for i, q in zip(active, q_sys)]
        b_sys = (b_sys @ sp.diags(scales)).tocsr()

    c_sys = fom.C.tocsr()
    rng = np.random.default_rng(seed)

    v_basis = _orthonormalize(_dominant_eigenbasis(factors.assemble_a(p_star), r))
    w_basis = v_basis.copy()

    eye_n = sp.identity(n, format="csr")
    eye_r = sp.identity(r, format="csr")

    prev_spectrum = None
    history = []
    best = None
    restarts_left = 3
    it = 0
    converged = False
    spectrum = np.array([])
    while it < max_iter:
        it += 1
        wtv = w_basis.T @ v_basis
        t_mat = np.linalg.solve(wtv, w_basis.T)
        a_hat = t_mat @ (a_sys @ v_basis)
        q_hats = [t_mat @ (q @ v_basis) for q in q_sys]
        b_hat = t_mat @ b_sys.toarray()
        c_hat = c_sys @ v_basis

        lam, rvec = np.linalg.eig(a_hat)
        spectrum = _sorted_spectrum(lam)

        if prev_spectrum is not None:
            change = np.linalg.norm(spectrum - prev_spectrum) / np.linalg.norm(prev_spectrum)
            history.append(float(change))
            if best is None or change < best[0]:
                best = (change, v_basis, w_basis, spectrum)
            if change < tol:
                converged = True
                break
        prev_spectrum = spectrum

        if lam.real.max() >= 0.0:
            if restarts_left > 0:
                restarts_left -= 1
                v_basis = _orthonormalize(
                    v_basis + 1e-3 * rng.standard_normal(v_basis.shape))
                w_basis = _orthonormalize(
                    w_basis + 1e-3 * rng.standard_normal(w_basis.shape))
                prev_spectrum = None
                continue
            # keep iterating on the unstable iterate; the Sylvester systems
            # below stay well posed in practice and often recover

        b_dir = np.linalg.solve(rvec, b_hat.astype(complex))
        c_dir = c_hat.astype(complex) @ rvec
        q_dirs = [np.linalg.solve(rvec, qh.astype(complex) @ rvec) for qh in q_hats]

        lam_diag = sp.diags(lam)
        m_v = sp.kron(eye_r, a_sys, format="csc").astype(complex) \
            + sp.kron(lam_diag, eye_n, format="csc")
        m_w = sp.kron(eye_r, a_sys.T, format="csc").astype(complex) \
            + sp.kron(lam_diag, eye_n, format="csc")
        for q, qd in zip(q_sys, q_dirs):
            m_v = m_v + sp.kron(sp.csc_matrix(qd), q, format="csc")
            m_w = m_w + sp.kron(sp.csc_matrix(qd.T), q.T, format="csc")

        rhs_v = -(b_sys @ b_dir.T).flatten(order="F")
        rhs_w = -(c_sys.T @ c_dir).flatten(order="F")
        try:
            x_new = spla.spsolve(m_v, rhs_v).reshape((n, r), order="F")
            y_new = spla.spsolve(m_w, rhs_w).reshape((n, r), order="F")
            v_basis = _orthonormalize(_realify(x_new, lam))
            w_basis = _orthonormalize(_realify(y_new, lam))
        except (ProjectionError, RuntimeError):
            if restarts_left > 0:
                restarts_left -= 1
                v_basis = _orthonormalize(
                    v_basis + 1e-3 * rng.standard_normal(v_basis.shape))
                w_basis = _orthonormalize(
                    w_basis + 1e-3 * rng.standard_normal(w_basis.shape))
                prev_spectrum = None
                continue
            raise

    if not converged and best is not None:
        _, v_basis, w_basis, spectrum = best

    cond = float(np.linalg.cond(w_basis.T @ v_basis))
    return ProjectionBasis(v=v_basis, w=w_basis, cond_wv=cond,
                           converged=converged, iterations=it,
                           spectrum=spectrum, convergence_history=tuple(history))


@dataclass(frozen=True)
class ReducedModel:
    """Projected pipe model with parameter dependency preserved.

    The stored blocks are mode-1 matricizations of the projected factor
    stacks: ``a_red`` is r x 2r ([T A_1 V, T A_2 V]), ``q_red`` is r x 4r,
    ``b_red`` is r x 12 ([T B_1, T B_2, T B_3]).  Evaluating at a parameter
    vector contracts them with g(p) respectively h(p); the bilinear and
    output blocks are parameter independent.
    """

    a_red: np.ndarray
    q_red: np.ndarray
    b_red: np.ndarray
    c_red: np.ndarray
    dz: float
    order: int
    full_order: int
    p_star: ThermalParameters
    g_map: str = G_MAP_ID
    h_map: str = H_MAP_ID
    metadata: dict = field(default_factory=dict)

    def g(self, p: ThermalParameters) -> np.ndarray:
        return np.array([p.lam, p.diffusion / self.dz**2])

    def h(self, p: ThermalParameters) -> np.ndarray:
        return np.array([p.lam, p.diffusion / self.dz**2, 1.0 / self.dz])

    def q_slice(self, i: int) -> np.ndarray:
        r = self.order
        return self.q_red[:, i * r:(i + 1) * r]


def project(factors: ParametricFactors, fom: BilinearFom,
            basis: ProjectionBasis) -> ReducedModel:
    """Petrov-Galerkin projection of the parameter-decoupled pipe model."""
    v, w = basis.v, basis.w
    if v.shape != w.shape or v.shape[0] != fom.n:
        raise ProjectionError(
            f"basis shapes {v.shape}/{w.shape} do not match state dimension {fom.n}"
        )
    wtv = w.T @ v
    cond = float(np.linalg.cond(wtv))
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise ProjectionError(
            f"W'V is ill-conditioned (condition number {cond:.3e})"
        )
    t_mat = np.linalg.solve(wtv, w.T)

    a_red = np.hstack([t_mat @ (a_i @ v) for a_i in factors.a_factors])
    q_red = np.hstack([t_mat @ (q_i @ v) for q_i in fom.q_slices])
    b_red = np.hstack([t_mat @ b_i.toarray() for b_i in factors.b_factors])
    c_red = np.asarray((fom.C @ v))

    return ReducedModel(
        a_red=a_red, q_red=q_red, b_red=b_red, c_red=c_red,
        dz=factors.dz, order=v.shape[1], full_order=fom.n,
        p_star=fom.parameters,
        metadata={
            "converged": basis.converged,
            "iterations": basis.iterations,
            "cond_wv": cond,
        },
    )


@dataclass
class EvaluatedRom:
    """Reduced model with matrices fixed at one parameter value.

    Stepping cost depends only on the reduced order, not on the width of the
    parameter expansion.
    """

    a: np.ndarray
    q_slices: np.ndarray
    b: np.ndarray
    c: np.ndarray
    _step_cache: dict = field(default_factory=dict, repr=False)

    @property
    def order(self) -> int:
        return self.a.shape[0]

    @property
    def active_slices(self) -> tuple:
        return tuple(i for i in range(self.q_slices.shape[0])
                     if np.any(self.q_slices[i]))

    def rhs(self, x_r: np.ndarray, u) -> np.ndarray:
        uv = input_vector(u)
        out = self.a @ x_r + self.b @ uv
        for i in self.active_slices:
            out += uv[i] * (self.q_slices[i] @ x_r)
        return out

    def equilibrium(self, u) -> np.ndarray:
        """Steady state at constant inputs (least-squares if singular)."""
        uv = input_vector(u)
        m = self.a.copy()
        for i in self.active_slices:
            m += uv[i] * self.q_slices[i]
        rhs = -(self.b @ uv)
        try:
            x_r = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError:
            x_r = np.linalg.lstsq(m, rhs, rcond=None)[0]
        if not np.all(np.isfinite(x_r)):
            x_r = np.linalg.lstsq(m, rhs, rcond=None)[0]
        return x_r


def evaluate_rom_at(rom: ReducedModel, p: ThermalParameters) -> EvaluatedRom:
    """Contract the matricized blocks with g(p), h(p) to fixed matrices."""
    r = rom.order
    a_hat = rom.a_red @ np.kron(rom.g(p)[:, None], np.eye(r))
    b_hat = rom.b_red @ np.kron(rom.h(p)[:, None], np.eye(N_INPUTS))
    q_hat = np.stack([rom.q_slice(i) for i in range(N_INPUTS)])
    return EvaluatedRom(a=a_hat, q_slices=q_hat, b=b_hat, c=rom.c_red.copy())


def step_rom(rom_at_p: EvaluatedRom, x_r: np.ndarray, u, dt: float) -> np.ndarray:
    """One implicit trapezoidal step of the evaluated reduced model."""
    if dt <= 0.0:
        raise IntegratorError(f"step size must be positive, got {dt}")
    x_r = np.asarray(x_r, dtype=float)
    uv = input_vector(u)
    key = (dt,) + tuple(uv[i] for i in rom_at_p.active_slices)
    cached = rom_at_p._step_cache.get("op")
    if cached is not None and cached[0] == key:
        lu_piv, rhs_mat = cached[1], cached[2]
    else:
        m = rom_at_p.a.copy()
        for i in rom_at_p.active_slices:
            m += uv[i] * rom_at_p.q_slices[i]
        eye = np.eye(rom_at_p.order)
        try:
            lu_piv = sla.lu_factor(eye - (dt / 2.0) * m)
        except (ValueError, sla.LinAlgError) as exc:
            raise IntegratorError(f"singular trapezoidal step matrix: {exc}") from exc
        rhs_mat = eye + (dt / 2.0) * m
        rom_at_p._step_cache["op"] = (key, lu_piv, rhs_mat)
    x_new = sla.lu_solve(lu_piv, rhs_mat @ x_r + dt * (rom_at_p.b @ uv))
    if not np.all(np.isfinite(x_new)):
        raise IntegratorError("non-finite reduced state after trapezoidal step")
    return x_new


def measure_rom(rom_at_p: EvaluatedRom, x_r: np.ndarray) -> np.ndarray:
    """Sensor outputs of the evaluated reduced model."""
    return rom_at_p.c @ np.asarray(x_r, dtype=float)


def save_rom(rom: ReducedModel, path) -> None:
    """Persist a reduced model (NumPy container, arrays stored bit-exact)."""
    meta = {
        "format": "pipetherm-rom",
        "version": 1,
        "g_map": rom.g_map,
        "h_map": rom.h_map,
        "metadata": {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v)
                     for k, v in rom.metadata.items()},
    }
    np.savez(
        path,
        a_red=rom.a_red, q_red=rom.q_red, b_red=rom.b_red, c_red=rom.c_red,
        dz=np.array(rom.dz), dims=np.array([rom.order, rom.full_order]),
        p_star=np.array([rom.p_star.lam, rom.p_star.diffusion]),
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    )


def load_rom(path) -> ReducedModel:
    """Load a model written by :func:`save_rom`."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "pipetherm-rom":
            raise ConfigurationError(f"{path}: not a pipetherm reduced model")
        if meta["g_map"] != G_MAP_ID or meta["h_map"] != H_MAP_ID:
            raise ConfigurationError(
                f"{path}: unknown parameter maps {meta['g_map']}/{meta['h_map']}"
            )
        dims = data["dims"]
        p_star = data["p_star"]
        return ReducedModel(
            a_red=data["a_red"], q_red=data["q_red"], b_red=data["b_red"],
            c_red=data["c_red"], dz=float(data["dz"]),
            order=int(dims[0]), full_order=int(dims[1]),
            p_star=ThermalParameters(lam=float(p_star[0]), diffusion=float(p_star[1])),
            g_map=meta["g_map"], h_map=meta["h_map"],
            metadata=meta.get("metadata", {}),
        )
