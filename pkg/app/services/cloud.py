# ==============================================================================
# Point-cloud container, nearest-neighbour search, Chamfer distance and the
# xyz / ply ascii readers and writers.
# ==============================================================================

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from app.services import diffcore as dc
from app.services.errors import CloudError, CloudFormatError

# Below this many points a brute-force scan is used instead of the kd-tree.
BRUTE_FORCE_BELOW = 64
FORMATS = ("xyz", "ply")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    occupancy: np.ndarray = None

    def __post_init__(self):
        points = np.array(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise CloudError(f"points must be N x 3, got shape {points.shape}")
        if points.shape[0] < 1:
            raise CloudError("point cloud is empty")
        if not np.all(np.isfinite(points)):
            raise CloudError("point cloud has non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        if self.occupancy is not None:
            occupancy = np.array(self.occupancy, dtype=bool)
            if occupancy.shape != (points.shape[0],):
                raise CloudError(f"occupancy labels have shape {occupancy.shape}, expected ({points.shape[0]},)")
            occupancy.setflags(write=False)
            object.__setattr__(self, "occupancy", occupancy)

    def __len__(self):
        return self.points.shape[0]

    def subset(self, indices):
        occupancy = None if self.occupancy is None else self.occupancy[indices]
        return PointCloud(self.points[indices], occupancy)


def _coordinates(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    points = np.asarray(cloud, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise CloudError(f"expected a non-empty N x 3 array, got shape {points.shape}")
    return points


class KdTree:
    """Exact nearest-neighbour index over a snapshot of a cloud."""

    def __init__(self, cloud):
        points = np.array(_coordinates(cloud), dtype=float)
        points.setflags(write=False)
        self.points = points
        self._tree = cKDTree(points) if len(points) >= BRUTE_FORCE_BELOW else None

    def __len__(self):
        return len(self.points)

    def nearest(self, queries):
        """(squared distances, indices) of the single nearest point for each query row."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if self._tree is None:
            d2 = np.sum((queries[:, None, :] - self.points[None, :, :]) ** 2, axis=-1)
            idx = np.argmin(d2, axis=1)
            return d2[np.arange(len(queries)), idx], idx
        dist, idx = self._tree.query(queries, k=1)
        return dist ** 2, idx


def nearest_k(tree, p, k):
    """Indices of the k closest points to p, ascending by distance, ties to the lower index."""
    n = len(tree)
    if k < 1 or k > n:
        raise CloudError(f"nearest_k: k={k} outside [1, {n}]")
    p = np.asarray(p, dtype=float).reshape(3)
    if tree._tree is None or k == n:
        candidates = np.arange(n)
    else:
        dist, _ = tree._tree.query(p, k=k)
        radius = float(np.max(dist))
        candidates = np.asarray(sorted(tree._tree.query_ball_point(p, r=radius * (1.0 + 1e-9) + 1e-12)))
    d2 = np.sum((tree.points[candidates] - p) ** 2, axis=1)
    order = np.lexsort((candidates, d2))
    return candidates[order][:k]


def _as_coordinate_tensor(cloud):
    if isinstance(cloud, dc.Tensor):
        return cloud
    return dc.tensor(_coordinates(cloud))


def chamfer(A, B):
    """Mean squared nearest-neighbour distance A->B plus B->A.

    Accepts PointClouds, arrays or coordinate tensors; the nearest-neighbour
    assignment is fixed during backward.
    """
    a, b = _as_coordinate_tensor(A), _as_coordinate_tensor(B)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise CloudError("chamfer: empty cloud")
    _, a_to_b = KdTree(b.data).nearest(a.data)
    _, b_to_a = KdTree(a.data).nearest(b.data)
    forward = dc.sub(a, dc.take_rows(b, a_to_b))
    backward = dc.sub(b, dc.take_rows(a, b_to_a))
    forward_term = dc.mean(dc.reduce_sum(dc.mul(forward, forward), axis=1))
    backward_term = dc.mean(dc.reduce_sum(dc.mul(backward, backward), axis=1))
    return dc.add(forward_term, backward_term)


def chamfer_value(A, B):
    return chamfer(A, B).item()


def centroid(P):
    points = _coordinates(P)
    if len(points) == 0:
        raise CloudError("centroid of an empty cloud")
    return np.mean(points, axis=0)


# --- file I/O ---

def _resolve_format(path, fmt):
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    if fmt not in FORMATS:
        raise CloudError(f"unsupported cloud format '{fmt}' for {path}; expected one of {FORMATS}")
    return fmt


def save_cloud(path, cloud, fmt=None, labels=None):
    """Writes xyz or ascii ply with 9 significant digits, optionally with a region column."""
    fmt = _resolve_format(path, fmt)
    points = cloud.points
    if labels is not None:
        labels = np.asarray(labels, dtype=int)
        if labels.shape != (len(points),):
            raise CloudError(f"labels have shape {labels.shape}, expected ({len(points)},)")
    lines = []
    if fmt == "ply":
        lines += ["ply", "format ascii 1.0", f"element vertex {len(points)}",
                  "property float x", "property float y", "property float z"]
        if labels is not None:
            lines.append("property int region")
        lines.append("end_header")
    for i, p in enumerate(points):
        row = " ".join(f"{v:.9g}" for v in p)
        if labels is not None:
            row += f" {labels[i]}"
        lines.append(row)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    logging.info(f"Wrote {len(points)} points to {path} ({fmt})")


def load_cloud(path, fmt=None, with_labels=False):
    """Reads an xyz or ascii ply file; returns the cloud, or (cloud, labels) with_labels."""
    fmt = _resolve_format(path, fmt)
    text = Path(path).read_text().splitlines()
    if fmt == "xyz":
        points, labels = _parse_xyz(path, text)
    else:
        points, labels = _parse_ply(path, text)
    cloud = PointCloud(points)
    return (cloud, labels) if with_labels else cloud


def _parse_floats(path, line_no, tokens):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise CloudFormatError(path, line_no, f"cannot parse numbers from {' '.join(tokens)!r}") from None


def _parse_xyz(path, lines):
    points, labels = [], []
    width = None
    for line_no, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) not in (3, 4) or (width is not None and len(tokens) != width):
            raise CloudFormatError(path, line_no, f"expected {width or '3 or 4'} columns, got {len(tokens)}")
        width = len(tokens)
        points.append(_parse_floats(path, line_no, tokens[:3]))
        if width == 4:
            try:
                labels.append(int(tokens[3]))
            except ValueError:
                raise CloudFormatError(path, line_no, f"region label {tokens[3]!r} is not an integer") from None
    if not points:
        raise CloudFormatError(path, len(lines), "no points found")
    return np.array(points), (np.array(labels) if width == 4 else None)


def _parse_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(path, 1, "missing 'ply' magic")
    elements = []  # [name, count, [property names]]
    line_no = 1
    while True:
        line_no += 1
        if line_no > len(lines):
            raise CloudFormatError(path, line_no, "header ends without end_header")
        tokens = lines[line_no - 1].split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise CloudFormatError(path, line_no, f"only ascii ply is supported, got {' '.join(tokens[1:])}")
        elif tokens[0] == "element" and len(tokens) == 3:
            try:
                elements.append([tokens[1], int(tokens[2]), []])
            except ValueError:
                raise CloudFormatError(path, line_no, f"bad element count {tokens[2]!r}") from None
        elif tokens[0] == "property" and elements:
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            break
        else:
            raise CloudFormatError(path, line_no, f"unexpected header line {lines[line_no - 1]!r}")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise CloudFormatError(path, line_no, "no vertex element in header")
    props = vertex[2]
    if not all(axis in props for axis in ("x", "y", "z")):
        raise CloudFormatError(path, line_no, f"vertex element lacks x/y/z properties: {props}")
    columns = [props.index(axis) for axis in ("x", "y", "z")]
    region_col = props.index("region") if "region" in props else None

    points, labels = [], []
    for name, count, element_props in elements:
        for _ in range(count):
            line_no += 1
            if line_no > len(lines):
                raise CloudFormatError(path, line_no, f"file ends before {count} '{name}' rows were read")
            tokens = lines[line_no - 1].split()
            if name != "vertex":
                continue  # faces and other elements are discarded
            if len(tokens) != len(element_props):
                raise CloudFormatError(path, line_no, f"expected {len(element_props)} vertex values, got {len(tokens)}")
            values = _parse_floats(path, line_no, tokens)
            points.append([values[c] for c in columns])
            if region_col is not None:
                labels.append(int(values[region_col]))
    for extra_no in range(line_no + 1, len(lines) + 1):
        if lines[extra_no - 1].strip():
            raise CloudFormatError(path, extra_no, "data beyond the declared element counts (vertex count mismatch)")
    if not points:
        raise CloudFormatError(path, line_no, "no vertices")
    return np.array(points), (np.array(labels) if region_col is not None else None)
