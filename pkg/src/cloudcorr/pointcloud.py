"""Point-cloud data model, file parsers/writers, geometry utilities and
synthetic training-pair generators.

File grammars (ascii only):
  XYZ  one "x y z" triple per line, '#' comment lines and blank lines skipped
  PLY  "ply" / "format ascii 1.0", an "element vertex N" with float or double
       properties x, y, z (other properties and elements are skipped)
  OFF  literal "OFF" header, then "V F E" counts, then V vertex lines; faces
       are parsed past and discarded
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ParseError(ValueError):
    """Malformed point-cloud file; carries the 1-based offending line."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeometryError(ValueError):
    """Degenerate geometry (e.g. all points identical)."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


@dataclass(eq=False)
class PointCloud:
    """Ordered list of n 3-D points; row order is significant."""

    points: np.ndarray
    name: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"point cloud needs shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 2:
            raise GeometryError(f"point cloud needs at least 2 points, got {pts.shape[0]}")
        if not np.isfinite(pts).all():
            raise GeometryError("point cloud contains non-finite coordinates")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(eq=False)
class ShapePair:
    """Source/target clouds of equal size, optionally with the true matching.

    ``gt[i] = j`` means source point i corresponds to target point j.
    """

    source: PointCloud
    target: PointCloud
    gt: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        if self.source.n != self.target.n:
            raise ContractError(
                f"pair clouds must be the same size, got {self.source.n} and {self.target.n}"
            )
        if self.gt is not None:
            gt = np.asarray(self.gt, dtype=np.intp)
            if not is_bijection(gt, self.source.n):
                raise ContractError("ground-truth correspondence is not a bijection")
            self.gt = gt

    @property
    def n(self) -> int:
        return self.source.n


def is_bijection(indices: np.ndarray, n: int) -> bool:
    idx = np.asarray(indices)
    return idx.shape == (n,) and np.array_equal(np.sort(idx), np.arange(n))


# ---------------------------------------------------------------------------
# parsers and writers


def _as_text(data) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def _parse_triple(tokens: list[str], lineno: int) -> list[float]:
    if len(tokens) != 3:
        raise ParseError(f"expected 3 coordinates, got {len(tokens)}", lineno)
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {tokens!r}", lineno) from None


def parse_xyz(data, name: str | None = None) -> PointCloud:
    """Parse XYZ text: one whitespace-separated triple per line."""
    rows = []
    for lineno, raw in enumerate(_as_text(data).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rows.append(_parse_triple(line.split(), lineno))
    if len(rows) < 2:
        raise ParseError(f"file holds {len(rows)} points, need at least 2")
    return PointCloud(np.array(rows), name=name)


def write_xyz(cloud: PointCloud) -> str:
    lines = [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in cloud.points]
    return "\n".join(lines) + "\n"


def parse_ply_ascii(data, name: str | None = None) -> PointCloud:
    """Parse an ascii-1.0 PLY, extracting x/y/z from the vertex element."""
    lines = _as_text(data).splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    in_vertex_element = False
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:] != ["ascii", "1.0"]:
                raise ParseError(f"unsupported format {' '.join(tokens[1:])!r}", lineno)
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertex = int(tokens[2])
                except (IndexError, ValueError):
                    raise ParseError("bad 'element vertex' count", lineno) from None
        elif tokens[0] == "property" and in_vertex_element:
            if len(tokens) < 3:
                raise ParseError("bad property line", lineno)
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or n_vertex is None:
        raise ParseError("header ended before 'end_header' or vertex element")
    try:
        cx, cy, cz = props.index("x"), props.index("y"), props.index("z")
    except ValueError:
        raise ParseError("vertex element lacks x, y, z properties") from None

    rows = []
    lineno = body_start
    for raw in lines[body_start:]:
        lineno += 1
        if len(rows) == n_vertex:
            break
        tokens = raw.strip().split()
        if not tokens:
            continue
        if len(tokens) < len(props):
            raise ParseError(f"vertex line has {len(tokens)} values, expected {len(props)}", lineno)
        try:
            rows.append([float(tokens[cx]), float(tokens[cy]), float(tokens[cz])])
        except ValueError:
            raise ParseError("non-numeric vertex value", lineno) from None
    if len(rows) != n_vertex:
        raise ParseError(f"truncated file: {len(rows)} of {n_vertex} vertices present")
    return PointCloud(np.array(rows), name=name)


def write_ply_ascii(cloud: PointCloud) -> str:
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {cloud.n}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    body = [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in cloud.points]
    return "\n".join(header + body) + "\n"


def parse_off(data, name: str | None = None) -> PointCloud:
    """Parse an OFF mesh; faces are discarded."""
    lines = []
    for lineno, raw in enumerate(_as_text(data).splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append((lineno, line))
    if not lines or lines[0][1] != "OFF":
        raise ParseError("missing 'OFF' header", lines[0][0] if lines else 1)
    if len(lines) < 2:
        raise ParseError("missing counts line after OFF header")
    counts_line, counts_text = lines[1]
    tokens = counts_text.split()
    if len(tokens) != 3:
        raise ParseError("counts line must be 'V F E'", counts_line)
    try:
        n_vertex = int(tokens[0])
    except ValueError:
        raise ParseError("non-integer vertex count", counts_line) from None
    vertex_lines = lines[2 : 2 + n_vertex]
    if len(vertex_lines) < n_vertex:
        raise ParseError(f"truncated file: {len(vertex_lines)} of {n_vertex} vertices present")
    rows = [_parse_triple(text.split(), lineno) for lineno, text in vertex_lines]
    return PointCloud(np.array(rows), name=name)


def write_off(cloud: PointCloud) -> str:
    body = [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in cloud.points]
    return "\n".join(["OFF", f"{cloud.n} 0 0"] + body) + "\n"


_PARSERS = {".xyz": parse_xyz, ".ply": parse_ply_ascii, ".off": parse_off}


def load_cloud(path) -> PointCloud:
    """Load a cloud from disk, picking the parser by file extension."""
    import pathlib

    p = pathlib.Path(path)
    parser = _PARSERS.get(p.suffix.lower())
    if parser is None:
        raise ParseError(f"unknown point-cloud extension {p.suffix!r} for {p}")
    return parser(p.read_text(encoding="utf-8"), name=p.stem)


# ---------------------------------------------------------------------------
# geometry utilities


def normalize_unit(cloud: PointCloud) -> PointCloud:
    """Center the cloud at the origin and scale the farthest point to norm 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius < 1e-12:
        raise GeometryError("cannot normalize a degenerate cloud (all points identical)")
    return PointCloud(pts / radius, name=cloud.name)


def _as_rows(obj) -> np.ndarray:
    if isinstance(obj, PointCloud):
        return obj.points
    arr = np.asarray(getattr(obj, "data", obj), dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"expected a matrix of row vectors, got shape {arr.shape}")
    return arr


def knn_indices(query, base, k: int, exclude_self: bool | None = None) -> np.ndarray:
    """Indices of the k nearest base rows per query row, (n_query, k).

    Neighbors are ordered by ascending distance, ties by lower index. When
    query and base are the same set (same object, or exclude_self=True) each
    row's own index is excluded.
    """
    q = _as_rows(query)
    b = _as_rows(base)
    if exclude_self is None:
        exclude_self = query is base
    if k < 1 or k >= b.shape[0]:
        raise ContractError(f"knn needs 1 <= k < n, got k={k}, n={b.shape[0]}")
    d2 = ((q * q).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * q @ b.T)
    if exclude_self:
        if q.shape[0] != b.shape[0]:
            raise ContractError("exclude_self needs query and base of equal size")
        np.fill_diagonal(d2, np.inf)
    # stable sort keeps equal distances in index order
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def fps_sample(cloud, m: int) -> np.ndarray:
    """Farthest point sampling: m indices, deterministically seeded at index 0.

    Each next index maximizes the minimum distance to the already chosen set;
    distance ties pick the lower index.
    """
    pts = _as_rows(cloud)
    n = pts.shape[0]
    if m < 1 or m > n:
        raise ContractError(f"fps needs 1 <= m <= n, got m={m}, n={n}")
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = 0
    dmin = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dmin))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        dmin = np.minimum(dmin, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


# ---------------------------------------------------------------------------
# synthetic pairs


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn uniformly over SO(3) (random unit quaternion)."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    w = a * np.sin(2 * np.pi * u2)
    x = a * np.cos(2 * np.pi * u2)
    y = b * np.sin(2 * np.pi * u3)
    z = b * np.cos(2 * np.pi * u3)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def assemble_pair(base: PointCloud, moved: np.ndarray, order: np.ndarray, name=None) -> ShapePair:
    """Build a pair whose target rows are ``moved`` shuffled by ``order``.

    ``order[j] = i`` places moved point i at target row j, so the recorded
    ground truth is the inverse permutation.
    """
    target = PointCloud(moved[order], name=None if name is None else name + "_target")
    gt = np.argsort(order)  # gt[i] = row of target holding moved[i]
    return ShapePair(source=base, target=target, gt=gt, name=name)


def rigid_pair(base: PointCloud, rotation, translation, order) -> ShapePair:
    moved = base.points @ np.asarray(rotation).T + np.asarray(translation)
    return assemble_pair(base, moved, np.asarray(order, dtype=np.intp), name=base.name)


def synth_rigid_pair(base: PointCloud, seed: int) -> ShapePair:
    """Random rigid pair: uniform rotation, translation in [-0.5, 0.5]^3, row shuffle."""
    rng = np.random.default_rng(seed)
    rotation = random_rotation(rng)
    translation = rng.uniform(-0.5, 0.5, size=3)
    order = rng.permutation(base.n)
    return rigid_pair(base, rotation, translation, order)


def bend_points(pts: np.ndarray, amplitude: float, frequency: float, phase: float) -> np.ndarray:
    """Sinusoidal bend along x driven by y; a shear, hence always a bijection."""
    bent = pts.copy()
    bent[:, 0] += amplitude * np.sin(frequency * pts[:, 1] + phase)
    return bent


def synth_nonrigid_pair(base: PointCloud, bend_amplitude: float, seed: int) -> ShapePair:
    """Smoothly deformed pair: sinusoidal bend plus row shuffle."""
    rng = np.random.default_rng(seed)
    frequency = rng.uniform(1.5, 3.5)
    phase = rng.uniform(0.0, 2 * np.pi)
    moved = bend_points(base.points, bend_amplitude, frequency, phase)
    order = rng.permutation(base.n)
    return assemble_pair(base, moved, order, name=base.name)


def random_blob(n: int, rng: np.random.Generator, lobes: int = 4) -> PointCloud:
    """Normalized asymmetric blob: sphere directions with smooth radial bumps.

    The bumps give every region a distinctive local curvature signature,
    which is what makes synthetic correspondence learnable at desk scale.
    """
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.ones(n)
    for _ in range(lobes):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        sharpness = rng.uniform(2.0, 6.0)
        height = rng.uniform(0.2, 0.5)
        radii += height * np.exp(sharpness * (dirs @ axis - 1.0))
    return normalize_unit(PointCloud(dirs * radii[:, None]))
