"""Neo-Hookean constitutive law and global assembly over the patch system.

The stored energy of one patch is integrated in the parent domain with the
reference-configuration measure; global quantities are gathered/scattered
through the DOF map's constraint groups.  Per-patch kernels live in
cellmech.kernels (compiled when available).
"""

import numpy as np
from dataclasses import dataclass
from scipy import sparse

from . import kernels
from .splines import BasisSpec, basis_tables, make_quadrature


class InversionError(RuntimeError):
    """Deformation gradient lost positivity somewhere in the domain."""


@dataclass(frozen=True)
class Material:
    youngs: float = 1.0
    poisson: float = 0.3

    def __post_init__(self):
        if self.youngs <= 0:
            raise ValueError("Young's modulus must be positive")
        if not 0 < self.poisson < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")

    @property
    def mu(self):
        return self.youngs / (2.0 * (1.0 + self.poisson))

    @property
    def kappa(self):
        return self.youngs / (3.0 * (1.0 - 2.0 * self.poisson))


def strain_energy_density(F, mat):
    """W(F) = mu/2 (I1 - 2 - 2 log J) + kappa/2 (log J)^2."""
    F = np.asarray(F, dtype=float)
    J = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    if J <= 0.0:
        raise InversionError("det F <= 0")
    i1 = float(np.sum(F * F))
    lj = np.log(J)
    return 0.5 * mat.mu * (i1 - 2.0 - 2.0 * lj) + 0.5 * mat.kappa * lj * lj


def stress_and_tangent(F, mat):
    """First Piola stress dW/dF and tangent d2W/dF2 in closed form."""
    F = np.asarray(F, dtype=float)
    J = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    if J <= 0.0:
        raise InversionError("det F <= 0")
    lj = np.log(J)
    mu, kappa = mat.mu, mat.kappa
    Finv = np.array([[F[1, 1], -F[0, 1]], [-F[1, 0], F[0, 0]]]) / J
    P = mu * F + (kappa * lj - mu) * Finv.T
    eye = np.eye(2)
    A = (
        mu * np.einsum("ik,JL->iJkL", eye, eye)
        + (mu - kappa * lj) * np.einsum("Jk,Li->iJkL", Finv, Finv)
        + kappa * np.einsum("Ji,Lk->iJkL", Finv, Finv)
    )
    return P, A


class PatchSystem:
    """Precomputed assembly context for one reference geometry.

    Holds the quadrature tables, per-patch pullback data (physical basis
    gradients and weighted measures), the global reference vector, and the
    index arrays used to scatter per-patch Hessians into a CSR matrix.
    """

    def __init__(self, nets, dofmap, material=None, spec=None, quad=None):
        self.dofmap = dofmap
        self.material = material or Material()
        self.spec = spec or BasisSpec()
        self.quad = quad or make_quadrature(self.spec)
        self.B, self.dB = basis_tables(self.spec, self.quad)
        self.n_patches = len(nets)
        self.X_local = np.ascontiguousarray(
            np.stack([net.coords.reshape(25, 2) for net in nets])
        )
        self.X_global = dofmap.global_reference(nets)
        nq = self.quad.size
        self.h = np.empty((self.n_patches, nq, 25, 2))
        self.wdet = np.empty((self.n_patches, nq))
        for p in range(self.n_patches):
            hp, wp = kernels.reference_tables(
                self.dB, self.quad.weights, self.X_local[p]
            )
            self.h[p] = hp
            self.wdet[p] = wp
        # global scalar-entry indices of each patch's 50 local dofs
        entries = (2 * dofmap.group_id[:, :, None] + np.arange(2)).reshape(
            self.n_patches, 50
        )
        self._rows = np.repeat(entries, 50, axis=1).ravel()
        self._cols = np.tile(entries, (1, 50)).ravel()
        self._mu = self.material.mu
        self._kappa = self.material.kappa

    @property
    def n_entries(self):
        return self.dofmap.n_entries

    def local_deformed(self, q):
        """Per-patch deformed control points (P, 25, 2) from global q."""
        return np.ascontiguousarray(self.dofmap.gather(q))

    def energy(self, q):
        """Total strain energy and the minimum det F over all points.

        Does not raise on inversion; callers check min_det <= 0 (the line
        search uses this to reject steps).
        """
        defc = self.local_deformed(q)
        out = np.zeros(2)
        min_det = np.inf
        for p in range(self.n_patches):
            kernels.energy_min_det(
                self.h[p], self.wdet[p], defc[p], self._mu, self._kappa, out
            )
            min_det = min(min_det, out[1])
        return out[0], min_det

    def residual(self, q):
        """Gradient of the energy w.r.t. global positions, shape (G, 2)."""
        defc = self.local_deformed(q)
        local = np.zeros((self.n_patches, 25, 2))
        for p in range(self.n_patches):
            status = kernels.residual(
                self.h[p], self.wdet[p], defc[p], self._mu, self._kappa, local[p]
            )
            if status:
                raise InversionError("det F <= 0 in patch %d" % p)
        return self.dofmap.scatter_add(local)

    def hessian(self, q):
        """Sparse symmetric energy Hessian over all 2G scalar entries."""
        defc = self.local_deformed(q)
        blocks = np.zeros((self.n_patches, 50, 50))
        scratch = np.zeros((25, 2))
        for p in range(self.n_patches):
            status = kernels.hessian(
                self.h[p], self.wdet[p], defc[p], self._mu, self._kappa,
                blocks[p], scratch,
            )
            if status:
                raise InversionError("det F <= 0 in patch %d" % p)
        n = self.n_entries
        H = sparse.coo_matrix(
            (blocks.ravel(), (self._rows, self._cols)), shape=(n, n)
        )
        return H.tocsr()

    def mixed_vjp(self, q, lam_global):
        """lam contracted with d(residual)/d(reference coords), per patch.

        lam_global is (G, 2) with zeros on constrained groups' entries;
        the result is (P, 25, 2), ready to chain with the geometry
        Jacobian's patch-major rows.
        """
        defc = self.local_deformed(q)
        lam_local = np.ascontiguousarray(self.dofmap.gather(lam_global))
        out = np.zeros((self.n_patches, 25, 2))
        for p in range(self.n_patches):
            status = kernels.mixed_vjp(
                self.dB, self.quad.weights, self.X_local[p], defc[p],
                lam_local[p], self._mu, self._kappa, out[p],
            )
            if status:
                raise InversionError("det F <= 0 in patch %d" % p)
        return out


def assemble_energy(system, q):
    """Strain energy at q; raises InversionError if any det F <= 0."""
    psi, min_det = system.energy(q)
    if min_det <= 0.0:
        raise InversionError("det F <= 0")
    return psi


def assemble_residual(system, q):
    """Energy gradient restricted to the free entries."""
    return system.residual(q).ravel()[system.dofmap.free]


def assemble_hessian(system, q):
    """Energy Hessian restricted to the free-free block, CSR."""
    H = system.hessian(q)
    free = system.dofmap.free
    return H[free][:, free].tocsr()
