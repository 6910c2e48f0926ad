"""ASCII PLY reading/writing for point clouds and triangle meshes.

Point clouds carry x y z plus an optional per-point scalar channel named
``error``; meshes carry vertices and triangular faces.
"""

from __future__ import annotations

import numpy as np


def write_ply_points(path, points: np.ndarray, error: np.ndarray | None = None):
    points = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property double x", "property double y", "property double z"]
    if error is not None:
        lines.append("property double error")
    lines.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i, p in enumerate(points):
            row = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if error is not None:
                row += f" {error[i]:.17g}"
            fh.write(row + "\n")


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        props = []
        while True:
            line = fh.readline().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property") and n is not None:
                props.append(line.split()[-1])
            elif line.startswith("element"):
                props_done = True
            elif line == "end_header":
                break
        data = np.loadtxt(fh, max_rows=n).reshape(n, len(props))
    pts = data[:, :3]
    err = data[:, props.index("error")] if "error" in props else None
    return pts, err


def write_ply_mesh(path, vertices: np.ndarray, faces: np.ndarray):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(vertices)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {len(faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
