"""Text file formats for clouds, displacement fields, and correspondences.

Labeled cloud file, one point per line plus `#` header records:

    # structure <id> <name>
    # support <id> <x> <y> <z>
    # landmark <id> <x> <y> <z>
    <x> <y> <z> <label>

Displacement field file: one `dx dy dz` per line, aligned to source point
order. Correspondence file: one `u v score` per line. All values are
printed with 9 significant digits, so writers are byte-deterministic.
"""

from __future__ import annotations

import json
import hashlib
from pathlib import Path

import numpy as np

from .errors import CloudFormatError
from .geom import CorrespondenceSet, DisplacementField, LabeledCloud


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def _fmt3(vec) -> str:
    return " ".join(_fmt(v) for v in vec)


def write_cloud(cloud: LabeledCloud, path) -> None:
    lines = []
    for sid, name in enumerate(cloud.structure_names):
        lines.append(f"# structure {sid} {name}")
    for sid in range(cloud.num_structures):
        lines.append(f"# support {sid} {_fmt3(cloud.support_points[sid])}")
    for sid, pos in zip(cloud.landmark_labels, cloud.landmark_points):
        lines.append(f"# landmark {int(sid)} {_fmt3(pos)}")
    for p, lab in zip(cloud.points, cloud.labels):
        lines.append(f"{_fmt3(p)} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> LabeledCloud:
    names: dict[int, str] = {}
    supports: dict[int, np.ndarray] = {}
    lm_labels: list[int] = []
    lm_points: list[list[float]] = []
    pts: list[list[float]] = []
    labels: list[int] = []

    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            if line.startswith("#"):
                fields = line[1:].split()
                if not fields:
                    continue
                kind = fields[0]
                if kind == "structure":
                    names[int(fields[1])] = " ".join(fields[2:])
                elif kind == "support":
                    supports[int(fields[1])] = np.array([float(v) for v in fields[2:5]])
                elif kind == "landmark":
                    lm_labels.append(int(fields[1]))
                    lm_points.append([float(v) for v in fields[2:5]])
                # Unknown comment records are ignored.
            else:
                fields = line.split()
                pts.append([float(v) for v in fields[:3]])
                labels.append(int(fields[3]))
        except (ValueError, IndexError) as exc:
            raise CloudFormatError(f"{path}:{lineno}: cannot parse {line!r}") from exc

    if not names:
        raise CloudFormatError(f"{path}: no '# structure' header records")
    k = max(names) + 1
    if sorted(names) != list(range(k)):
        raise CloudFormatError(f"{path}: structure ids must cover 0..{k - 1}")
    if sorted(supports) != list(range(k)):
        raise CloudFormatError(f"{path}: need one '# support' record per structure")

    return LabeledCloud(
        points=np.array(pts, dtype=np.float64).reshape(-1, 3),
        labels=np.array(labels, dtype=np.int64),
        structure_names=tuple(names[i] for i in range(k)),
        support_points=np.stack([supports[i] for i in range(k)]),
        landmark_labels=np.array(lm_labels, dtype=np.int64),
        landmark_points=np.array(lm_points, dtype=np.float64).reshape(-1, 3),
    )


def write_field(field: DisplacementField, path) -> None:
    lines = [_fmt3(v) for v in field.vectors]
    Path(path).write_text("\n".join(lines) + "\n")


def read_field(path) -> DisplacementField:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(v) for v in line.split()[:3]])
        except (ValueError, IndexError) as exc:
            raise CloudFormatError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    return DisplacementField(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_correspondences(corr: CorrespondenceSet, path) -> None:
    lines = [f"{int(u)} {int(v)} {_fmt(s)}" for (u, v), s in zip(corr.pairs, corr.scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_correspondences(path) -> CorrespondenceSet:
    pairs = []
    scores = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            fields = line.split()
            pairs.append((int(fields[0]), int(fields[1])))
            scores.append(float(fields[2]))
        except (ValueError, IndexError) as exc:
            raise CloudFormatError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    return CorrespondenceSet(
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        scores=np.array(scores, dtype=np.float64),
    )


def write_json(payload, path) -> None:
    """Canonical JSON (sorted keys, fixed separators) for reproducible runs."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(payload) -> str:
    """Stable hash of a JSON-serializable configuration record."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
