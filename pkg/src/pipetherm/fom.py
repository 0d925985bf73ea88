"""Distributed-parameter thermal model of a single water pipe.

The water temperature along one pipe follows an advection-diffusion-relaxation
balance: transport with the flow velocity, axial (effective) diffusion, and
relaxation toward the ambient temperature through an effective heat transfer
coefficient.  A first-order upwind scheme for the convective term and a
second-order central scheme for the diffusive term on a uniform grid of N
points turn the balance into a bilinear ODE system

    dx/dt = A x + sum_i Q_i u_i x + B u,      y = C x,

with state x = (T_1, ..., T_N), input u = (v, T_in, v*T_in, T_amb) and the
single nonzero bilinear slice Q_1 attached to the velocity.  The inlet value
T_0 = T_in is eliminated with a ghost point, which is what introduces the
virtual input v*T_in; the outlet has a zero-gradient condition, mirrored into
the last row of A.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, GeometryError, IntegratorError

#: Tolerance below which a (slightly negative) velocity is treated as zero.
#: More negative velocities mean flow reversal, which the upwind scheme
#: does not represent.
VELOCITY_REVERSAL_TOL = -1e-9

#: Number of input channels of the assembled bilinear system.
N_INPUTS = 4


@dataclass(frozen=True)
class PipeGeometry:
    """Geometric description of one pipe with its spatial grid.

    length, inner_diameter in m, cross_section in m^2; grid_points is the
    number of interior temperature states, so the segment length is
    dz = length / grid_points.
    """

    length: float
    inner_diameter: float
    cross_section: float
    grid_points: int

    def __post_init__(self):
        if self.length <= 0.0:
            raise GeometryError(f"pipe length must be positive, got {self.length}")
        if self.inner_diameter <= 0.0:
            raise GeometryError(
                f"inner diameter must be positive, got {self.inner_diameter}"
            )
        if self.cross_section <= 0.0:
            raise GeometryError(
                f"cross section must be positive, got {self.cross_section}"
            )
        if self.grid_points < 2:
            raise GeometryError(
                f"need at least 2 grid points, got {self.grid_points}"
            )

    @property
    def dz(self) -> float:
        """Segment length of the uniform grid (m)."""
        return self.length / self.grid_points


def build_grid(length: float, grid_points: int, *, inner_diameter: float = 0.02,
               cross_section: float | None = None) -> PipeGeometry:
    """Create the uniform spatial grid for a pipe of the given length.

    ``cross_section`` defaults to the circular bore area of ``inner_diameter``.
    """
    if cross_section is None:
        cross_section = math.pi * inner_diameter**2 / 4.0
    return PipeGeometry(
        length=length,
        inner_diameter=inner_diameter,
        cross_section=cross_section,
        grid_points=int(grid_points),
    )


@dataclass(frozen=True)
class ThermalParameters:
    """Thermal coefficients of one pipe.

    lam: effective heat transfer coefficient toward ambient (1/s).
    diffusion: effective axial diffusion coefficient (m^2/s).
    """

    lam: float
    diffusion: float

    def __post_init__(self):
        if self.lam < 0.0:
            raise ConfigurationError(f"heat transfer coefficient must be >= 0, got {self.lam}")
        if self.diffusion < 0.0:
            raise ConfigurationError(f"diffusion coefficient must be >= 0, got {self.diffusion}")


@dataclass(frozen=True)
class ThermalInputs:
    """Boundary inputs of one pipe at one instant.

    velocity in m/s (must not be negative beyond round-off), temperatures
    in deg C.  The assembled input vector is (v, T_in, v*T_in, T_amb); the
    third component is the virtual input produced by the ghost-point
    elimination of the inlet condition and always equals the product of the
    first two.
    """

    velocity: float
    inlet_temperature: float
    ambient_temperature: float

    def __post_init__(self):
        if self.velocity < VELOCITY_REVERSAL_TOL:
            raise ConfigurationError(
                f"flow reversal is not supported: velocity {self.velocity} < 0"
            )
        if self.velocity < 0.0:
            object.__setattr__(self, "velocity", 0.0)

    def as_vector(self) -> np.ndarray:
        v = self.velocity
        return np.array([
            v,
            self.inlet_temperature,
            v * self.inlet_temperature,
            self.ambient_temperature,
        ])


def input_vector(u) -> np.ndarray:
    """Normalize ``u`` (ThermalInputs or length-4 vector) to the input vector.

    Raw vectors are checked for the virtual-input consistency u3 = u1 * u2.
    """
    if isinstance(u, ThermalInputs):
        return u.as_vector()
    vec = np.asarray(u, dtype=float)
    if vec.shape != (N_INPUTS,):
        raise ConfigurationError(f"input vector must have shape (4,), got {vec.shape}")
    expected = vec[0] * vec[1]
    if abs(vec[2] - expected) > 1e-9 * max(1.0, abs(expected)):
        raise ConfigurationError(
            f"inconsistent virtual input: u3={vec[2]} but u1*u2={expected}"
        )
    return vec


@dataclass(frozen=True)
class SensorLayout:
    """Axial positions (m) of the available temperature measurements.

    Positions lie in [0, L]; each maps to the grid point whose cell contains
    it, i.e. index j with j*dz < z <= (j+1)*dz.  The outlet z = L is always
    measured (appended if absent) because the network coupling reads it.
    """

    positions: tuple

    def __init__(self, positions=()):
        object.__setattr__(self, "positions", tuple(float(z) for z in positions))

    def grid_indices(self, geom: PipeGeometry) -> list[int]:
        """0-based state indices for every sensor, outlet last."""
        idx = [_position_index(z, geom) for z in self.positions]
        outlet = geom.grid_points - 1
        if not idx or idx[-1] != outlet:
            idx.append(outlet)
        return idx


def _position_index(z: float, geom: PipeGeometry) -> int:
    if z < 0.0 or z > geom.length * (1.0 + 1e-12):
        raise ConfigurationError(
            f"sensor position {z} outside pipe of length {geom.length}"
        )
    # cell rule j*dz < z <= (j+1)*dz, with positions at/below the first grid
    # point mapped to state 0
    j = math.ceil(z / geom.dz - 1e-9)
    return min(max(j, 1), geom.grid_points) - 1


def a_expansion_factors(n: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Parameter-free factors (A_1, A_2) of the system matrix.

    A(p) = lam * A_1 + (D/dz^2) * A_2 with A_1 = -I and A_2 the central
    second-difference matrix whose last diagonal entry is -1 instead of -2
    (mirror ghost point of the zero-gradient outlet).
    """
    a1 = -sp.identity(n, format="csr")
    main = np.full(n, -2.0)
    main[-1] = -1.0
    a2 = sp.diags([np.ones(n - 1), main, np.ones(n - 1)], offsets=(-1, 0, 1),
                  format="csr")
    return a1, a2


def b_expansion_factors(n: int) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    """Parameter-free factors (B_1, B_2, B_3) of the input matrix.

    B(p) = lam * B_1 + (D/dz^2) * B_2 + (1/dz) * B_3:
    B_1 couples every state to the ambient channel, B_2 the first state to
    the inlet-temperature channel (diffusive ghost term) and B_3 the first
    state to the virtual v*T_in channel (upwind ghost term).
    """
    b1 = sp.csr_matrix((np.ones(n), (np.arange(n), np.full(n, 3))), shape=(n, N_INPUTS))
    b2 = sp.csr_matrix(([1.0], ([0], [1])), shape=(n, N_INPUTS))
    b3 = sp.csr_matrix(([1.0], ([0], [2])), shape=(n, N_INPUTS))
    return b1, b2, b3


def advection_slice(geom: PipeGeometry) -> sp.csr_matrix:
    """Bilinear slice Q_1 multiplying velocity: upwind transport operator.

    First-order upwind discretization of -v dT/dz for v >= 0: -1/dz on the
    diagonal, +1/dz on the subdiagonal.
    """
    n = geom.grid_points
    inv_dz = 1.0 / geom.dz
    return sp.diags([np.full(n - 1, inv_dz), np.full(n, -inv_dz)], offsets=(-1, 0),
                    format="csr")


@dataclass
class BilinearFom:
    """Assembled bilinear full-order model of one pipe.

    A is the parameter-dependent tridiagonal system matrix, ``q_slices`` the
    four frontal slices of the bilinear tensor (only the velocity slice is
    nonzero), B the 4-channel input matrix and C the sensor selection with
    the outlet as its last row.  ``state`` holds the current temperature
    profile; the stepping functions are pure and leave it untouched.
    """

    geometry: PipeGeometry
    parameters: ThermalParameters
    A: sp.csr_matrix
    q_slices: tuple
    B: sp.csr_matrix
    C: sp.csr_matrix
    sensor_indices: list[int]
    state: np.ndarray = None
    _step_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.state is None:
            self.state = np.zeros(self.n)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def active_slices(self) -> tuple[int, ...]:
        return tuple(i for i, q in enumerate(self.q_slices) if q.nnz)

    def q_mode1(self) -> sp.csr_matrix:
        """Mode-1 matricization [Q_1, ..., Q_4] of the bilinear tensor."""
        return sp.hstack(self.q_slices, format="csr")


def assemble_fom(geom: PipeGeometry, params: ThermalParameters,
                 sensors: SensorLayout | None = None) -> BilinearFom:
    """Assemble the sparse bilinear system for one pipe.

    The matrices are built from the parameter-free expansion factors so that
    the parametric decoupling used by the reduction reproduces them exactly.
    """
    if sensors is None:
        sensors = SensorLayout()
    n = geom.grid_points
    beta = params.diffusion / geom.dz**2

    a1, a2 = a_expansion_factors(n)
    a_mat = (params.lam * a1 + beta * a2).tocsr()

    b1, b2, b3 = b_expansion_factors(n)
    b_mat = (params.lam * b1 + beta * b2 + (1.0 / geom.dz) * b3).tocsr()

    zero = sp.csr_matrix((n, n))
    q_slices = (advection_slice(geom), zero, zero, zero)

    idx = sensors.grid_indices(geom)
    c_mat = sp.csr_matrix(
        (np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n)
    )

    return BilinearFom(
        geometry=geom,
        parameters=params,
        A=a_mat,
        q_slices=q_slices,
        B=b_mat,
        C=c_mat,
        sensor_indices=idx,
    )


def bilinear_rhs(fom: BilinearFom, x: np.ndarray, u) -> np.ndarray:
    """State derivative A x + sum_i Q_i u_i x + B u."""
    x = np.asarray(x, dtype=float)
    if x.shape != (fom.n,):
        raise ConfigurationError(
            f"state must have shape ({fom.n},), got {x.shape}"
        )
    uv = input_vector(u)
    out = fom.A @ x + fom.B @ uv
    for i in fom.active_slices:
        out += uv[i] * (fom.q_slices[i] @ x)
    return out


def _step_operator(fom: BilinearFom, uv: np.ndarray, dt: float):
    """LU of (I - dt/2 M) and the matrix (I + dt/2 M), M = A + sum u_i Q_i.

    Cached for the most recent (dt, active inputs) so that scenarios with
    piecewise-constant inputs reuse one factorization.
    """
    key = (dt,) + tuple(uv[i] for i in fom.active_slices)
    cached = fom._step_cache.get("op")
    if cached is not None and cached[0] == key:
        return cached[1], cached[2]
    m = fom.A
    for i in fom.active_slices:
        m = m + uv[i] * fom.q_slices[i]
    eye = sp.identity(fom.n, format="csc")
    lhs = (eye - (dt / 2.0) * m).tocsc()
    rhs = (eye + (dt / 2.0) * m).tocsr()
    try:
        lu = spla.splu(lhs)
    except RuntimeError as exc:  # singular factorization
        raise IntegratorError(f"singular trapezoidal step matrix: {exc}") from exc
    fom._step_cache["op"] = (key, lu, rhs)
    return lu, rhs


def step_fom(fom: BilinearFom, x: np.ndarray, u, dt: float) -> np.ndarray:
    """Advance the state one implicit trapezoidal step with inputs held.

    With u frozen over the step the system is linear time-invariant, so the
    trapezoidal rule is unconditionally stable for the stiff diffusion part.
    """
    if dt <= 0.0:
        raise IntegratorError(f"step size must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    if x.shape != (fom.n,):
        raise ConfigurationError(f"state must have shape ({fom.n},), got {x.shape}")
    uv = input_vector(u)
    lu, rhs = _step_operator(fom, uv, dt)
    x_new = lu.solve(rhs @ x + dt * (fom.B @ uv))
    if not np.all(np.isfinite(x_new)):
        raise IntegratorError("non-finite state after trapezoidal step")
    return x_new


def measure(fom: BilinearFom, x: np.ndarray) -> np.ndarray:
    """Sensor outputs C x; the last component is the outlet temperature."""
    x = np.asarray(x, dtype=float)
    if x.shape != (fom.n,):
        raise ConfigurationError(f"state must have shape ({fom.n},), got {x.shape}")
    return fom.C @ x
