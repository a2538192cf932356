"""Exterior rigid-body acoustic scattering and horizontal-plane HRTF.

Collocation BEM with constant (per-face) elements on a closed triangle
mesh in meters. The default Burton-Miller combined formulation

    [(1/2) I - D - (i/k) N] p = p_inc + (i/k) dp_inc/dn

stays well conditioned across the fictitious interior resonances that
break the plain (1/2) I - D equation. Off-diagonal entries use a fixed
symmetric 7-point triangle rule (subdivided x16 for nearby pairs);
diagonal double-layer terms vanish on flat elements and the hypersingular
self terms combine the closed-form static finite part with a polar
(Duffy) quadrature of the smooth dynamic remainder.

HRTF simulation uses acoustic reciprocity: one monopole at the receiver,
one dense solve per frequency, and field evaluation at the 361 azimuth
points. SPL is 20*log10(|p| / 20 uPa).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import eval_legendre, spherical_jn, spherical_yn

from .meshes import TriMesh, boundary_edges, face_areas, face_normals, signed_volume

SPEED_OF_SOUND = 343.0  # m/s, dry air at 20 C
P_REF = 20e-6  # Pa
DEFAULT_FREQUENCIES = (1033.6, 2067.5, 3962.1)  # Hz
DEFAULT_FIELD_RADIUS = 1.2  # m
DEFAULT_AZIMUTHS = 361

MM_PER_M = 1000.0


class AcousticsError(RuntimeError):
    pass


def mesh_mm_to_m(mesh: TriMesh) -> TriMesh:
    """Convert a canonical-frame mm mesh to meters (factor 1/1000)."""
    return TriMesh(mesh.vertices / MM_PER_M, mesh.faces, mesh.uv)


@dataclass(frozen=True)
class Monopole:
    """Free-field point source: p_inc(x) = amplitude * e^{ikr} / (4 pi r)."""

    position: np.ndarray
    amplitude: complex = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))


@dataclass(frozen=True)
class BemProblem:
    surface: TriMesh  # meters, closed, outward normals
    k: float  # wavenumber 2 pi f / c, 1/m
    source: Monopole
    formulation: str = "burton_miller"  # or "plain"

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("wavenumber must be positive")
        if self.formulation not in ("burton_miller", "plain"):
            raise ValueError(f"unknown formulation {self.formulation!r}")


@dataclass(frozen=True)
class HrtfResult:
    azimuths: np.ndarray  # degrees, 0..360 inclusive
    frequencies: np.ndarray  # Hz
    spl: np.ndarray  # (n_freq, n_azimuth) dB
    receiver: np.ndarray  # m
    field_radius: float  # m

    def __post_init__(self):
        az = np.asarray(self.azimuths, dtype=float)
        fr = np.asarray(self.frequencies, dtype=float)
        spl = np.asarray(self.spl, dtype=float)
        if spl.shape != (len(fr), len(az)):
            raise ValueError(f"spl must be ({len(fr)}, {len(az)}), got {spl.shape}")
        if not np.isfinite(spl).all():
            raise ValueError("spl contains non-finite values")
        steps = np.diff(az)
        if len(az) >= 2 and not np.allclose(steps, steps[0]):
            raise ValueError("azimuth grid must be uniform")
        if az[0] % 360.0 == az[-1] % 360.0 and not np.array_equal(spl[:, 0], spl[:, -1]):
            raise ValueError("wraparound azimuths must carry identical spl")
        object.__setattr__(self, "azimuths", az)
        object.__setattr__(self, "frequencies", fr)
        object.__setattr__(self, "spl", spl)
        object.__setattr__(self, "receiver", np.asarray(self.receiver, dtype=float))

    def to_dict(self) -> dict:
        return {
            "azimuths_deg": self.azimuths.tolist(),
            "frequencies_hz": self.frequencies.tolist(),
            "spl_db": self.spl.tolist(),
            "receiver_m": self.receiver.tolist(),
            "field_radius_m": self.field_radius,
        }


# ---------------------------------------------------------------------------
# quadrature rules

# symmetric 7-point rule, degree 5 (barycentric coordinates, weights sum to 1)
_QUAD7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [0.797426985353087, 0.101286507323456, 0.101286507323456],
        [0.101286507323456, 0.797426985353087, 0.101286507323456],
        [0.101286507323456, 0.101286507323456, 0.797426985353087],
        [0.059715871789770, 0.470142064105115, 0.470142064105115],
        [0.470142064105115, 0.059715871789770, 0.470142064105115],
        [0.470142064105115, 0.470142064105115, 0.059715871789770],
    ]
)
_QUAD7_W = np.array(
    [
        0.225,
        0.125939180544827,
        0.125939180544827,
        0.125939180544827,
        0.132394152788506,
        0.132394152788506,
        0.132394152788506,
    ]
)


def _subdivided_bary(levels: int = 2):
    """Barycentric 7-point rule replicated over 4**levels congruent subtriangles."""
    corners = [np.eye(3)]
    for _ in range(levels):
        nxt = []
        for tri in corners:
            a, b, c = tri
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            nxt += [
                np.stack([a, ab, ca]),
                np.stack([ab, b, bc]),
                np.stack([ca, bc, c]),
                np.stack([ab, bc, ca]),
            ]
        corners = nxt
    bary = np.concatenate([_QUAD7_BARY @ tri for tri in corners])
    weights = np.tile(_QUAD7_W / len(corners), len(corners))
    return bary, weights


_QUAD_NEAR_BARY, _QUAD_NEAR_W = _subdivided_bary(2)


# ---------------------------------------------------------------------------
# kernels


def _kernel_parts(rvec, k):
    """Distances and G, G', G'' for r = |rvec| (rvec rows x - y)."""
    r = np.linalg.norm(rvec, axis=-1)
    g = np.exp(1j * k * r) / (4.0 * np.pi * r)
    gp = (1j * k - 1.0 / r) * g
    gpp = (-k * k - 2j * k / r + 2.0 / (r * r)) * g
    return r, g, gp, gpp


def _double_layer(rvec, r, gp, n_y):
    # dG/dn_y with rvec = x - y: grad_y r = -(x - y)/r
    return -gp * np.einsum("...d,...d->...", rvec, n_y) / r


def _hypersingular(rvec, r, gp, gpp, n_x, n_y):
    rn_x = np.einsum("...d,...d->...", rvec, n_x) / r
    rn_y = np.einsum("...d,...d->...", rvec, n_y) / r
    nn = np.einsum("...d,...d->...", n_x, n_y)
    return -gpp * rn_x * rn_y - gp * (nn - rn_x * rn_y) / r


def _static_hypersingular_self(corners: np.ndarray, centroid: np.ndarray) -> float:
    """Closed-form Hadamard finite part of (4 pi r^3)^-1 over a flat triangle,
    collocated at an interior point: -(1/4pi) * contour integral dtheta/R."""
    total = 0.0
    for e in range(3):
        a = corners[e] - centroid
        b = corners[(e + 1) % 3] - centroid
        t = b - a
        t /= np.linalg.norm(t)
        ta, tb = a @ t, b @ t
        dvec = a - ta * t
        d = np.linalg.norm(dvec)
        total += (tb / np.hypot(d, tb) - ta / np.hypot(d, ta)) / d
    return -total / (4.0 * np.pi)


_GL8 = np.polynomial.legendre.leggauss(8)


def _dynamic_hypersingular_self(corners: np.ndarray, centroid: np.ndarray, k: float) -> complex:
    """Integral of the smooth remainder [e^{ikr}(1-ikr)-1]/(4 pi r^3) via a
    centroid-split Duffy transform (the 1/r singularity cancels)."""
    nodes, weights = _GL8
    s = 0.5 * (nodes + 1.0)
    ws = 0.5 * weights
    total = 0.0 + 0.0j
    for e in range(3):
        a = corners[e]
        b = corners[(e + 1) % 3]
        # edge point P(s), jacobian u * |(a - c) x (b - a)| (constant in s)
        jac = np.linalg.norm(np.cross(a - centroid, b - a))
        p = a[None, :] + s[:, None] * (b - a)[None, :]
        rho = np.linalg.norm(p - centroid, axis=1)  # (s,)
        # y(u, s) = c + u (P(s) - c); r = u * rho
        u = s[:, None]  # reuse nodes for u axis
        wu = ws[:, None]
        r = u * rho[None, :]
        kr = k * r
        f = (np.exp(1j * kr) * (1.0 - 1j * kr) - 1.0) / (4.0 * np.pi * r**3)
        total += jac * np.sum(wu * ws[None, :] * f * u)
    return total


# ---------------------------------------------------------------------------
# assembly


class BemSystem:
    """Assembled dense collocation system plus the geometry to build
    right-hand sides and evaluate the exterior field."""

    def __init__(self, surface, k, formulation, matrix, centroids, normals, areas):
        self.surface = surface
        self.k = k
        self.formulation = formulation
        self.coupling = 1j / k if formulation == "burton_miller" else 0.0
        self.matrix = matrix
        self.centroids = centroids
        self.normals = normals
        self.areas = areas
        self._lu = None

    @property
    def n_elements(self) -> int:
        return len(self.centroids)

    def rhs(self, source: Monopole) -> np.ndarray:
        rvec = self.centroids - source.position
        r, g, gp, _ = _kernel_parts(rvec, self.k)
        p_inc = source.amplitude * g
        if self.formulation == "plain":
            return p_inc
        dp_dn = source.amplitude * gp * np.einsum("nd,nd->n", rvec, self.normals) / r
        return p_inc + self.coupling * dp_dn

    def lu(self):
        if self._lu is None:
            self._lu = lu_factor(self.matrix)
        return self._lu

    def condition_estimate(self) -> float:
        """1-norm condition number estimate (exact inverse norm)."""
        try:
            inv = np.linalg.inv(self.matrix)
        except np.linalg.LinAlgError:
            return np.inf
        one = lambda m: np.abs(m).sum(axis=0).max()
        return float(one(self.matrix) * one(inv))


def _element_geometry(surface: TriMesh):
    v = surface.vertices
    f = surface.faces
    corners = v[f]
    centroids = corners.mean(axis=1)
    normals = face_normals(surface)
    areas = face_areas(surface)
    edge_len = np.linalg.norm(np.roll(corners, -1, axis=1) - corners, axis=2).max(axis=1)
    return corners, centroids, normals, areas, edge_len


def _quad_points(corners, areas, bary, weights):
    pts = np.einsum("qk,mkd->mqd", bary, corners)
    w = areas[:, None] * weights[None, :]
    return pts, w


def assemble_bem(
    surface: TriMesh,
    k: float,
    formulation: str = "burton_miller",
    near_factor: float = 2.0,
) -> BemSystem:
    """Dense system matrix for the rigid exterior scattering problem.

    Raises on open surfaces or inward orientation; warns when the largest
    element exceeds lambda / 6.
    """
    if len(boundary_edges(surface)):
        raise AcousticsError("BEM surface must be closed (boundary edges found)")
    if signed_volume(surface) <= 0:
        raise AcousticsError("BEM surface must be wound outward (signed volume > 0)")
    if k <= 0:
        raise AcousticsError("wavenumber must be positive")
    corners, centroids, normals, areas, edge_len = _element_geometry(surface)
    lam = 2.0 * np.pi / k
    if edge_len.max() > lam / 6.0:
        warnings.warn(
            f"largest element ({edge_len.max():.4f} m) exceeds lambda/6 "
            f"({lam / 6.0:.4f} m); expect reduced accuracy",
            stacklevel=2,
        )

    m = len(centroids)
    use_bm = formulation == "burton_miller"
    eta = 1j / k

    pts_std, w_std = _quad_points(corners, areas, _QUAD7_BARY, _QUAD7_W)
    pts_near, w_near = _quad_points(corners, areas, _QUAD_NEAR_BARY, _QUAD_NEAR_W)

    matrix = np.empty((m, m), dtype=complex)
    flat_pts = pts_std.reshape(-1, 3)
    flat_w = w_std.reshape(-1)
    flat_n = np.repeat(normals, len(_QUAD7_W), axis=0)

    for i in range(m):
        x = centroids[i]
        rvec = x - flat_pts
        # the self face contributes a 0/0 at its centroid quad point; that
        # matrix entry is replaced by the closed-form self term below
        with np.errstate(all="ignore"):
            r, _, gp, gpp = _kernel_parts(rvec, k)
            d_vals = (_double_layer(rvec, r, gp, flat_n) * flat_w).reshape(m, -1).sum(axis=1)
        row = 0.5 * (np.arange(m) == i).astype(complex) - d_vals
        if use_bm:
            n_x = np.broadcast_to(normals[i], rvec.shape)
            with np.errstate(all="ignore"):
                n_vals = (
                    _hypersingular(rvec, r, gp, gpp, n_x, flat_n) * flat_w
                ).reshape(m, -1).sum(axis=1)
            row = row - eta * n_vals

        # refine nearby (but not self) pairs with the subdivided rule
        near = np.flatnonzero(
            np.linalg.norm(centroids - x, axis=1) < near_factor * (edge_len + edge_len[i])
        )
        near = near[near != i]
        if len(near):
            rv = x - pts_near[near].reshape(-1, 3)
            r2, _, gp2, gpp2 = _kernel_parts(rv, k)
            ny = np.repeat(normals[near], len(_QUAD_NEAR_W), axis=0)
            wq = w_near[near].reshape(-1)
            d_ref = (_double_layer(rv, r2, gp2, ny) * wq).reshape(len(near), -1).sum(axis=1)
            row[near] = -d_ref
            if use_bm:
                nx = np.broadcast_to(normals[i], rv.shape)
                n_ref = (
                    _hypersingular(rv, r2, gp2, gpp2, nx, ny) * wq
                ).reshape(len(near), -1).sum(axis=1)
                row[near] = row[near] - eta * n_ref

        # self terms: D_ii vanishes on a flat element; N_ii = static finite
        # part + smooth dynamic remainder
        row[i] = 0.5
        if use_bm:
            n_self = _static_hypersingular_self(corners[i], x) + _dynamic_hypersingular_self(
                corners[i], x, k
            )
            row[i] = row[i] - eta * n_self
        matrix[i] = row

    return BemSystem(surface, k, formulation, matrix, centroids, normals, areas)


@dataclass(frozen=True)
class BemSolution:
    pressure: np.ndarray  # complex per-face surface pressure
    residual: float
    condition_estimate: Optional[float]
    k: float


def solve_exterior(
    problem: BemProblem,
    system: Optional[BemSystem] = None,
    with_condition: bool = False,
    residual_tol: float = 1e-8,
) -> BemSolution:
    """Direct dense solve for the surface pressure of the rigid scatterer."""
    if system is None:
        system = assemble_bem(problem.surface, problem.k, problem.formulation)
    b = system.rhs(problem.source)
    try:
        x = lu_solve(system.lu(), b)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise AcousticsError(
            f"singular BEM system (condition estimate {system.condition_estimate():.3e})"
        ) from exc
    rhs_norm = np.linalg.norm(b)
    residual = float(np.linalg.norm(system.matrix @ x - b) / max(rhs_norm, 1e-300))
    if not np.isfinite(x).all() or residual > residual_tol:
        raise AcousticsError(
            f"solve failed: residual {residual:.3e} (condition estimate "
            f"{system.condition_estimate():.3e})"
        )
    cond = system.condition_estimate() if with_condition else None
    return BemSolution(pressure=x, residual=residual, condition_estimate=cond, k=problem.k)


def evaluate_field(
    system: BemSystem, solution: BemSolution, source: Monopole, points: np.ndarray
) -> np.ndarray:
    """Total exterior pressure p = p_inc + D[p] at points away from the surface."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    corners = system.surface.vertices[system.surface.faces]
    pts_std, w_std = _quad_points(corners, system.areas, _QUAD7_BARY, _QUAD7_W)
    flat_pts = pts_std.reshape(-1, 3)
    flat_w = w_std.reshape(-1)
    flat_n = np.repeat(system.normals, len(_QUAD7_W), axis=0)
    out = np.empty(len(points), dtype=complex)
    k = system.k
    for idx, x in enumerate(points):
        rvec = x - flat_pts
        r, _, gp, _ = _kernel_parts(rvec, k)
        dcol = (_double_layer(rvec, r, gp, flat_n) * flat_w).reshape(len(system.areas), -1)
        out[idx] = dcol.sum(axis=1) @ solution.pressure
    d = np.linalg.norm(points - source.position, axis=1)
    out += source.amplitude * np.exp(1j * k * d) / (4.0 * np.pi * d)
    return out


# ---------------------------------------------------------------------------
# analytic rigid-sphere oracle


def rigid_sphere_reference(
    radius: float,
    k: float,
    source: Monopole,
    eval_points: np.ndarray,
    tol: float = 1e-10,
    max_terms: int = 600,
) -> np.ndarray:
    """Partial-wave series for a monopole scattered by a rigid sphere at the
    origin. Evaluation points must lie on or outside the sphere."""
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    r0 = float(np.linalg.norm(source.position))
    if r0 < radius * (1.0 - 1e-12):
        raise AcousticsError("source lies inside the sphere")
    r = np.linalg.norm(pts, axis=1)
    if (r < radius * (1.0 - 1e-9)).any():
        raise AcousticsError("evaluation point inside the sphere")
    cosg = np.clip(
        (pts @ source.position) / np.maximum(r * r0, 1e-300), -1.0, 1.0
    )
    r_small = np.minimum(r, r0)
    r_big = np.maximum(r, r0)

    total = np.zeros(len(pts), dtype=complex)
    tail = 0
    last_ratio = np.inf
    with np.errstate(all="ignore"):
        for l in range(max_terms):
            jl_small = spherical_jn(l, k * r_small)
            hl_big = spherical_jn(l, k * r_big) + 1j * spherical_yn(l, k * r_big)
            hl_r = spherical_jn(l, k * r) + 1j * spherical_yn(l, k * r)
            hl_r0 = spherical_jn(l, k * r0) + 1j * spherical_yn(l, k * r0)
            ja = spherical_jn(l, k * radius, derivative=True)
            ha = ja + 1j * spherical_yn(l, k * radius, derivative=True)
            # group the ratio so growing h_l magnitudes cancel before overflow
            term = (2 * l + 1) * (
                jl_small * hl_big - ja * (hl_r / ha) * hl_r0
            ) * eval_legendre(l, cosg)
            scale = np.abs(total).max()
            if not np.isfinite(term).all():
                # h_l overflow far past convergence; the true tail is negligible
                if scale > 0 and last_ratio < np.sqrt(tol):
                    break
                raise AcousticsError(
                    f"sphere series lost precision at l={l} before converging"
                )
            total += term
            scale = np.abs(total).max()
            last_ratio = np.abs(term).max() / scale if scale > 0 else np.inf
            if scale > 0 and last_ratio < tol:
                tail += 1
                if tail >= 4:
                    break
            else:
                tail = 0
        else:
            raise AcousticsError(f"sphere series did not converge in {max_terms} terms")
    return source.amplitude * (1j * k / (4.0 * np.pi)) * total


# ---------------------------------------------------------------------------
# HRTF


def spl_db(pressure: np.ndarray) -> np.ndarray:
    return 20.0 * np.log10(np.abs(pressure) / P_REF)


def horizontal_field_points(radius: float, azimuth_count: int = DEFAULT_AZIMUTHS):
    """Azimuth grid (degrees, 0..360 inclusive) and the matching points on
    the horizontal circle. Azimuth 0 faces +z (front), 90 faces -x (left),
    counterclockwise seen from +y (up)."""
    az = np.linspace(0.0, 360.0, azimuth_count)
    unique = np.radians(az[:-1]) if azimuth_count > 1 else np.radians(az)
    dirs = np.stack(
        [-np.sin(unique), np.zeros(len(unique)), np.cos(unique)], axis=1
    )
    return az, radius * dirs


def simulate_hrtf(
    body: TriMesh,
    receiver: np.ndarray,
    frequencies: Sequence[float] = DEFAULT_FREQUENCIES,
    field_radius: float = DEFAULT_FIELD_RADIUS,
    azimuth_count: int = DEFAULT_AZIMUTHS,
    speed_of_sound: float = SPEED_OF_SOUND,
    formulation: str = "burton_miller",
    source_amplitude: complex = 1.0,
    receiver_surface_tolerance: float = 0.02,
) -> HrtfResult:
    """Horizontal-plane HRTF of a closed body (meters) via reciprocity.

    The monopole sits at the receiver (ear canal entrance); one dense
    solve per frequency yields the pressure at every azimuth. Warns when
    the receiver is farther than `receiver_surface_tolerance` (m) from
    the surface.
    """
    receiver = np.asarray(receiver, dtype=float)
    from .meshes import point_to_mesh_distance

    gap = point_to_mesh_distance(receiver, body)
    if gap > receiver_surface_tolerance:
        warnings.warn(
            f"receiver sits {gap:.4f} m from the surface (tolerance "
            f"{receiver_surface_tolerance} m); reciprocity assumes it is at "
            "the ear canal entrance",
            stacklevel=2,
        )
    az, points = horizontal_field_points(field_radius, azimuth_count)
    source = Monopole(position=receiver, amplitude=source_amplitude)
    spl = np.empty((len(frequencies), azimuth_count))
    for fi, f in enumerate(frequencies):
        k = 2.0 * np.pi * f / speed_of_sound
        system = assemble_bem(body, k, formulation)
        solution = solve_exterior(BemProblem(body, k, source, formulation), system)
        pressure = evaluate_field(system, solution, source, points)
        values = spl_db(pressure)
        if azimuth_count > 1:
            spl[fi, :-1] = values
            spl[fi, -1] = values[0]  # shared evaluation point at 0/360 deg
        else:
            spl[fi] = values
    return HrtfResult(
        azimuths=az,
        frequencies=np.asarray(frequencies, dtype=float),
        spl=spl,
        receiver=receiver,
        field_radius=field_radius,
    )


# ---------------------------------------------------------------------------
# SPL error metric


@dataclass(frozen=True)
class SplErrorReport:
    frequencies: np.ndarray  # Hz
    azimuths: np.ndarray  # degrees
    abs_error: np.ndarray  # (n_freq, n_az) |delta SPL| dB
    mean_db: np.ndarray  # per frequency
    std_db: np.ndarray  # per frequency

    @property
    def mean_db_x10(self) -> np.ndarray:
        return 10.0 * self.mean_db

    @property
    def std_db_x10(self) -> np.ndarray:
        return 10.0 * self.std_db

    def to_dict(self) -> dict:
        return {
            "frequencies_hz": self.frequencies.tolist(),
            "mean_abs_error_db": self.mean_db.tolist(),
            "std_abs_error_db": self.std_db.tolist(),
            "mean_abs_error_db_x10": self.mean_db_x10.tolist(),
            "std_abs_error_db_x10": self.std_db_x10.tolist(),
        }

    def table_rows(self) -> list[str]:
        """mean+-std per frequency in the x10 convention."""
        return [
            f"{f:.1f} Hz: {m:.2f}+-{s:.2f} (dBx10)"
            for f, m, s in zip(self.frequencies, self.mean_db_x10, self.std_db_x10)
        ]


def spl_error(pred: HrtfResult, gt: HrtfResult) -> SplErrorReport:
    """Per-frequency mean and std of |SPL difference| across all azimuths."""
    if not np.array_equal(pred.azimuths, gt.azimuths) or not np.array_equal(
        pred.frequencies, gt.frequencies
    ):
        raise ValueError("HRTF grids do not match")
    diff = np.abs(pred.spl - gt.spl)
    return SplErrorReport(
        frequencies=pred.frequencies,
        azimuths=pred.azimuths,
        abs_error=diff,
        mean_db=diff.mean(axis=1),
        std_db=diff.std(axis=1),
    )


# ---------------------------------------------------------------------------
# polar CSV export


def export_polar(result, path) -> None:
    """CSV of (frequency_hz, azimuth_deg, value_db); one row per grid point.

    Accepts an HrtfResult (values = SPL) or an SplErrorReport (values =
    |delta SPL| per azimuth).
    """
    if isinstance(result, HrtfResult):
        freqs, az, values = result.frequencies, result.azimuths, result.spl
    elif isinstance(result, SplErrorReport):
        freqs, az, values = result.frequencies, result.azimuths, result.abs_error
    else:
        raise TypeError(f"cannot export {type(result)!r} as polar data")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("frequency_hz,azimuth_deg,value_db\n")
        for fi, f in enumerate(freqs):
            for ai, a in enumerate(az):
                fh.write(f"{f:.9g},{a:.9g},{values[fi, ai]:.9g}\n")


def read_polar(path):
    """Parse the polar CSV back into (frequencies, azimuths, values)."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    freqs = np.unique(rows[:, 0])
    az = np.unique(rows[:, 1])
    values = np.empty((len(freqs), len(az)))
    fi = np.searchsorted(freqs, rows[:, 0])
    ai = np.searchsorted(az, rows[:, 1])
    values[fi, ai] = rows[:, 2]
    return freqs, az, values
