"""Tensor-product finite-volume mesh for the 2D (x, z) device cross section.

The third dimension (width w) is carried as an extrusion factor inside the
face and box measures, so edge transmissibilities are in cm and box volumes
in cm^3 and the discrete contact current comes out in ampere.

Nodes are indexed k = ix * nz + iz with x ascending (contacts at the first
and last column) and z ascending from -h to the illuminated surface z = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .device import DeviceGeometry

MM_TO_CM = 0.1


@dataclass(frozen=True, slots=True, eq=False)
class Mesh2D:
    """Voronoi boxes of a tensor grid.

    x, z        node coordinates [cm], strictly increasing
    width       extrusion width [cm]
    volumes     box volumes [cm^3], positive, summing to l*h*w
    edge_k/l    node indices of each edge, oriented +x / +z
    edge_trans  transmissibility s/h of each edge [cm] (face area over length)
    """

    x: np.ndarray
    z: np.ndarray
    width: float
    volumes: np.ndarray = field(init=False)
    box_bounds_x: np.ndarray = field(init=False)
    box_bounds_z: np.ndarray = field(init=False)
    edge_k: np.ndarray = field(init=False)
    edge_l: np.ndarray = field(init=False)
    edge_trans: np.ndarray = field(init=False)
    contact1_nodes: np.ndarray = field(init=False)
    contact2_nodes: np.ndarray = field(init=False)
    contact2_edges: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        z = np.asarray(self.z, dtype=np.float64)
        if x.ndim != 1 or z.ndim != 1 or x.size < 3 or z.size < 2:
            raise ValueError("need at least 3 x nodes and 2 z nodes")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(z) <= 0):
            raise ValueError("node coordinates must be strictly increasing")
        if self.width <= 0:
            raise ValueError("width must be positive")
        for name, arr in (("x", x), ("z", z)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

        nx, nz = x.size, z.size
        bx = np.concatenate([[x[0]], 0.5 * (x[1:] + x[:-1]), [x[-1]]])
        bz = np.concatenate([[z[0]], 0.5 * (z[1:] + z[:-1]), [z[-1]]])
        dx_box = np.diff(bx)
        dz_box = np.diff(bz)
        vol = (np.outer(dx_box, dz_box) * self.width).ravel()

        idx = np.arange(nx * nz).reshape(nx, nz)
        # horizontal edges (ix -> ix+1), faces dz_box * width, length dx
        hk = idx[:-1, :].ravel()
        hl = idx[1:, :].ravel()
        ht = (np.tile(dz_box, nx - 1) * self.width
              / np.repeat(np.diff(x), nz))
        # vertical edges (iz -> iz+1), faces dx_box * width, length dz
        vk = idx[:, :-1].ravel()
        vl = idx[:, 1:].ravel()
        vt = (np.repeat(dx_box, nz - 1) * self.width
              / np.tile(np.diff(z), nx))

        object.__setattr__(self, "volumes", vol)
        object.__setattr__(self, "box_bounds_x", bx)
        object.__setattr__(self, "box_bounds_z", bz)
        object.__setattr__(self, "edge_k", np.concatenate([hk, vk]))
        object.__setattr__(self, "edge_l", np.concatenate([hl, vl]))
        object.__setattr__(self, "edge_trans", np.concatenate([ht, vt]))
        # Contact 1 (grounded reference) spans the high-x column, contact 2
        # (the loaded terminal) the low-x column; the label assignment fixes
        # the measurement polarity of the photovoltage.
        object.__setattr__(self, "contact1_nodes", idx[-1, :].copy())
        object.__setattr__(self, "contact2_nodes", idx[0, :].copy())
        # horizontal edges whose near node lies in the loaded contact column
        object.__setattr__(self, "contact2_edges", np.arange(nz))
        for name in ("volumes", "box_bounds_x", "box_bounds_z", "edge_k",
                     "edge_l", "edge_trans", "contact1_nodes",
                     "contact2_nodes", "contact2_edges"):
            getattr(self, name).flags.writeable = False

    @property
    def nx(self) -> int:
        return self.x.size

    @property
    def nz(self) -> int:
        return self.z.size

    @property
    def n_nodes(self) -> int:
        return self.x.size * self.z.size

    def node_x_um(self) -> np.ndarray:
        """x coordinate of every node [um]."""
        return np.repeat(self.x * 1e4, self.z.size)


def build_mesh(geom: DeviceGeometry, nx: int = 384, nz: int = 8,
               z_ratio: float = 1.4) -> Mesh2D:
    """Mesh the cross section [-l/2, l/2] x [-h, 0]: uniform in x, geometric
    grading in z with steps growing by z_ratio away from the illuminated
    surface z = 0."""
    if nx < 3 or nz < 2:
        raise ValueError("nx >= 3 and nz >= 2 required")
    l_cm = geom.length * MM_TO_CM
    h_cm = geom.height * MM_TO_CM
    x = np.linspace(-0.5 * l_cm, 0.5 * l_cm, nx)
    steps = z_ratio ** np.arange(nz - 1)
    steps *= h_cm / steps.sum()
    z = np.concatenate([[-h_cm], -h_cm + np.cumsum(steps)])
    z[-1] = 0.0
    return Mesh2D(x=x, z=z, width=geom.width * MM_TO_CM)
