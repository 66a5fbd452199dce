"""Study-data container: classes, students, friendship edges, derived arrays.

CSV layout
----------
classes.csv   class_id,z              one row per class, z in {1,2,3}
students.csv  student_id,class_id,m,y,<covariates...>
edges.csv     student_a,student_b     undirected, within class, no self loops

Covariate columns are every column after the first four in students.csv.
Binary columns are kept as coded; continuous columns are standardized when
the container is built, and the centering/scale pairs are stored so raw
units can be recovered or new rows mapped onto the same scale.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Raised when input files violate the design's structural rules."""


@dataclass(frozen=True)
class Student:
    student_id: str
    class_id: str
    m_obs: int
    y_obs: int
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class ClassRoom:
    class_id: str
    z: int
    member_ids: tuple[str, ...]


@dataclass(frozen=True)
class CovariateSpec:
    """Names, coding kinds, and model-inclusion masks for covariate columns.

    ``kinds`` entries are "binary" or "continuous"; only continuous columns
    are standardized. ``strata_mask`` marks columns entering the stratum
    membership model, ``outcome_mask`` those entering the outcome model.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    strata_mask: tuple[bool, ...]
    outcome_mask: tuple[bool, ...]

    def __post_init__(self):
        k = len(self.names)
        if not (len(self.kinds) == len(self.strata_mask) == len(self.outcome_mask) == k):
            raise ValidationError("covariate spec fields must have equal length")
        for kind in self.kinds:
            if kind not in ("binary", "continuous"):
                raise ValidationError(f"unknown covariate kind {kind!r}")

    @classmethod
    def infer(cls, names, columns):
        """Infer kinds from the data; include every column in both models."""
        kinds = []
        for j in range(len(names)):
            vals = set(columns[:, j].tolist())
            kinds.append("binary" if vals <= {0.0, 1.0} else "continuous")
        k = len(names)
        return cls(tuple(names), tuple(kinds), (True,) * k, (True,) * k)


class FriendshipNetwork:
    """Undirected within-class friendship graph over student ids.

    Edges are stored as sorted id pairs; duplicates and reversed copies
    collapse to one edge.
    """

    def __init__(self, edges):
        pairs = set()
        for a, b in edges:
            if a == b:
                raise ValidationError(f"self loop on student {a!r}")
            pairs.add((a, b) if a < b else (b, a))
        self.edges = frozenset(pairs)
        adj: dict[str, set[str]] = {}
        for a, b in pairs:
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        self._adj = {k: tuple(sorted(v)) for k, v in adj.items()}

    def neighbors_of(self, student_id: str) -> tuple[str, ...]:
        return self._adj.get(student_id, ())

    def degree(self, student_id: str) -> int:
        return len(self._adj.get(student_id, ()))

    def __len__(self):
        return len(self.edges)

    def __eq__(self, other):
        return isinstance(other, FriendshipNetwork) and self.edges == other.edges

    def __hash__(self):
        return hash(self.edges)


@dataclass(frozen=True, eq=False)
class StudyData:
    """Validated study with derived arrays used by the model and estimands.

    Students keep their file order; ``class_idx``, ``z``, ``m_obs``, ``y_obs``,
    ``s_obs`` and the design matrices are aligned to that order. ``x_strata``
    and ``x_outcome`` hold the standardized columns selected by the covariate
    spec masks. Neighbor lists are stored in compressed form
    (``nbr_indptr``/``nbr_indices``) with indices sorted within each student.
    """

    students: tuple[Student, ...]
    classes: tuple[ClassRoom, ...]
    network: FriendshipNetwork
    covariate_spec: CovariateSpec
    # derived, filled in __post_init__
    student_ids: tuple[str, ...] = field(init=False)
    class_ids: tuple[str, ...] = field(init=False)
    class_idx: np.ndarray = field(init=False)
    z: np.ndarray = field(init=False)
    z_class: np.ndarray = field(init=False)
    m_obs: np.ndarray = field(init=False)
    y_obs: np.ndarray = field(init=False)
    x_raw: np.ndarray = field(init=False)
    x_all: np.ndarray = field(init=False)
    x_strata: np.ndarray = field(init=False)
    x_outcome: np.ndarray = field(init=False)
    cov_center: np.ndarray = field(init=False)
    cov_scale: np.ndarray = field(init=False)
    nbr_indptr: np.ndarray = field(init=False)
    nbr_indices: np.ndarray = field(init=False)
    degree: np.ndarray = field(init=False)
    s_obs: np.ndarray = field(init=False)

    def __post_init__(self):
        _validate_structure(self.students, self.classes, self.network, self.covariate_spec)
        sid = [s.student_id for s in self.students]
        cid = [c.class_id for c in self.classes]
        sindex = {s: i for i, s in enumerate(sid)}
        cindex = {c: j for j, c in enumerate(cid)}
        set_ = object.__setattr__
        set_(self, "student_ids", tuple(sid))
        set_(self, "class_ids", tuple(cid))
        set_(self, "class_idx", np.array([cindex[s.class_id] for s in self.students], dtype=np.int64))
        set_(self, "z_class", np.array([c.z for c in self.classes], dtype=np.int64))
        set_(self, "z", self.z_class[self.class_idx])
        set_(self, "m_obs", np.array([s.m_obs for s in self.students], dtype=np.int64))
        set_(self, "y_obs", np.array([s.y_obs for s in self.students], dtype=np.int64))
        x_raw = np.array([s.covariates for s in self.students], dtype=float)
        x_raw = x_raw.reshape(len(self.students), len(self.covariate_spec.names))
        set_(self, "x_raw", x_raw)
        center = np.zeros(x_raw.shape[1])
        scale = np.ones(x_raw.shape[1])
        for j, kind in enumerate(self.covariate_spec.kinds):
            if kind == "continuous":
                center[j] = x_raw[:, j].mean() if len(x_raw) else 0.0
                sd = x_raw[:, j].std() if len(x_raw) else 0.0
                scale[j] = sd if sd > 0 else 1.0
        x_all = (x_raw - center) / scale
        set_(self, "cov_center", center)
        set_(self, "cov_scale", scale)
        set_(self, "x_all", x_all)
        set_(self, "x_strata", x_all[:, np.array(self.covariate_spec.strata_mask, dtype=bool)])
        set_(self, "x_outcome", x_all[:, np.array(self.covariate_spec.outcome_mask, dtype=bool)])
        # compressed neighbor lists, row-sorted for reproducible iteration
        nbrs = [
            np.array(sorted(sindex[t] for t in self.network.neighbors_of(s)), dtype=np.int64)
            for s in sid
        ]
        indptr = np.zeros(len(sid) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(v) for v in nbrs])
        set_(self, "nbr_indptr", indptr)
        set_(self, "nbr_indices", np.concatenate(nbrs) if sid else np.zeros(0, dtype=np.int64))
        set_(self, "degree", np.diff(indptr))
        set_(self, "s_obs", self.neighbor_mean(self.m_obs))
        for name in ("class_idx", "z_class", "z", "m_obs", "y_obs", "x_raw", "x_all",
                     "x_strata", "x_outcome", "cov_center", "cov_scale",
                     "nbr_indptr", "nbr_indices", "degree", "s_obs"):
            getattr(self, name).setflags(write=False)

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def neighbor_mean(self, values: np.ndarray) -> np.ndarray:
        """Mean of ``values`` over each student's friends; 0 for the friendless.

        This is the mediator construction: applied to treatment indicators it
        gives each student's share of friends who took up the visit.
        """
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_students,):
            raise ValueError("values must be one number per student")
        if len(self.nbr_indices):
            # trailing pad keeps reduceat in range for degree-0 students at
            # the end; their (meaningless) segment sums are masked below
            padded = np.append(values[self.nbr_indices], 0.0)
            totals = np.add.reduceat(padded, self.nbr_indptr[:-1])
        else:
            totals = np.zeros(self.n_students)
        totals = np.where(self.degree > 0, totals, 0.0)
        return totals / np.maximum(self.degree, 1)

    def students_in_class(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.class_idx == j)


def _validate_structure(students, classes, network, spec):
    # a fully empty study is a legal degenerate (zero likelihood terms);
    # students without classes are not
    if students and not classes:
        raise ValidationError("no classes")
    seen_c = set()
    for c in classes:
        if c.class_id in seen_c:
            raise ValidationError(f"duplicate class id {c.class_id!r}")
        seen_c.add(c.class_id)
        if c.z not in (1, 2, 3):
            raise ValidationError(f"class {c.class_id!r}: arm must be 1, 2 or 3, got {c.z!r}")
    seen_s = {}
    for s in students:
        if s.student_id in seen_s:
            raise ValidationError(f"duplicate student id {s.student_id!r}")
        seen_s[s.student_id] = s
        if s.class_id not in seen_c:
            raise ValidationError(f"student {s.student_id!r}: unknown class {s.class_id!r}")
        if s.m_obs not in (0, 1):
            raise ValidationError(f"student {s.student_id!r}: m must be 0 or 1")
        if s.y_obs < 0:
            raise ValidationError(f"student {s.student_id!r}: y must be a nonnegative count")
        if len(s.covariates) != len(spec.names):
            raise ValidationError(
                f"student {s.student_id!r}: expected {len(spec.names)} covariates, "
                f"got {len(s.covariates)}"
            )
    for c in classes:
        if not c.member_ids:
            raise ValidationError(f"class {c.class_id!r} has no students")
        for sid in c.member_ids:
            if sid not in seen_s or seen_s[sid].class_id != c.class_id:
                raise ValidationError(f"class {c.class_id!r} roster does not match student rows")
    for a, b in network.edges:
        if a not in seen_s or b not in seen_s:
            raise ValidationError(f"edge ({a!r}, {b!r}) references unknown student")
        if seen_s[a].class_id != seen_s[b].class_id:
            raise ValidationError(f"edge ({a!r}, {b!r}) crosses classes; friendships are within class")


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = [row for row in reader if row and any(f.strip() for f in row)]
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    if not rows:
        raise ValidationError(f"{path}: empty file")
    return rows


def _int_field(raw, what, path, line):
    try:
        v = int(raw)
    except ValueError:
        raise ValidationError(f"{path} line {line}: {what} must be an integer, got {raw!r}") from None
    return v


def load_study(class_file, student_file, edge_file, covariate_spec: CovariateSpec | None = None) -> StudyData:
    """Read the three CSVs, validate them, and build a :class:`StudyData`.

    Raises :class:`ValidationError` on malformed rows or rule violations and
    ``OSError`` if a file cannot be read.
    """
    crows = _read_rows(class_file)
    if [h.strip() for h in crows[0][:2]] != ["class_id", "z"]:
        raise ValidationError(f"{class_file}: header must be class_id,z")
    classes_raw = []
    for ln, row in enumerate(crows[1:], start=2):
        if len(row) != 2:
            raise ValidationError(f"{class_file} line {ln}: expected 2 fields, got {len(row)}")
        classes_raw.append((row[0].strip(), _int_field(row[1].strip(), "z", class_file, ln)))

    srows = _read_rows(student_file)
    header = [h.strip() for h in srows[0]]
    if header[:4] != ["student_id", "class_id", "m", "y"]:
        raise ValidationError(f"{student_file}: header must start with student_id,class_id,m,y")
    cov_names = header[4:]
    students = []
    for ln, row in enumerate(srows[1:], start=2):
        if len(row) != len(header):
            raise ValidationError(
                f"{student_file} line {ln}: expected {len(header)} fields, got {len(row)}"
            )
        covs = []
        for name, raw in zip(cov_names, row[4:]):
            try:
                covs.append(float(raw))
            except ValueError:
                raise ValidationError(
                    f"{student_file} line {ln}: covariate {name!r} must be numeric, got {raw!r}"
                ) from None
        students.append(
            Student(
                student_id=row[0].strip(),
                class_id=row[1].strip(),
                m_obs=_int_field(row[2].strip(), "m", student_file, ln),
                y_obs=_int_field(row[3].strip(), "y", student_file, ln),
                covariates=tuple(covs),
            )
        )

    erows = _read_rows(edge_file)
    if [h.strip() for h in erows[0][:2]] != ["student_a", "student_b"]:
        raise ValidationError(f"{edge_file}: header must be student_a,student_b")
    edges = []
    for ln, row in enumerate(erows[1:], start=2):
        if len(row) != 2:
            raise ValidationError(f"{edge_file} line {ln}: expected 2 fields, got {len(row)}")
        edges.append((row[0].strip(), row[1].strip()))

    members: dict[str, list[str]] = {}
    for s in students:
        members.setdefault(s.class_id, []).append(s.student_id)
    classes = tuple(
        ClassRoom(class_id=c, z=z, member_ids=tuple(members.get(c, ())))
        for c, z in classes_raw
    )
    if covariate_spec is None:
        x = np.array([s.covariates for s in students], dtype=float).reshape(len(students), len(cov_names))
        covariate_spec = CovariateSpec.infer(cov_names, x)
    elif tuple(covariate_spec.names) != tuple(cov_names):
        raise ValidationError(
            f"covariate spec names {covariate_spec.names} do not match file columns {tuple(cov_names)}"
        )
    try:
        network = FriendshipNetwork(edges)
    except ValidationError as e:
        raise ValidationError(f"{edge_file}: {e}") from None
    return StudyData(students=tuple(students), classes=classes, network=network,
                     covariate_spec=covariate_spec)


def write_study(data: StudyData, out_dir) -> dict[str, str]:
    """Write classes/students/edges CSVs (raw covariate units); return paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    p = out / "classes.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "z"])
        for c in data.classes:
            w.writerow([c.class_id, c.z])
    paths["classes"] = str(p)
    p = out / "students.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "class_id", "m", "y", *data.covariate_spec.names])
        for s in data.students:
            w.writerow([s.student_id, s.class_id, s.m_obs, s.y_obs,
                        *(repr(v) for v in s.covariates)])
    paths["students"] = str(p)
    p = out / "edges.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["student_a", "student_b"])
        for a, b in sorted(data.network.edges):
            w.writerow([a, b])
    paths["edges"] = str(p)
    return paths


def neighbor_share(m_values, network: FriendshipNetwork, student_id: str) -> float:
    """Share of a student's friends with ``m_values[friend] == 1``.

    ``m_values`` maps student id to a 0/1 uptake indicator. Students with no
    friends get 0.0 and a logged warning, since their share is a convention
    rather than an observed average.
    """
    nbrs = network.neighbors_of(student_id)
    if not nbrs:
        logger.warning("student %s has no friends; mediator set to 0.0", student_id)
        return 0.0
    try:
        vals = [m_values[t] for t in nbrs]
    except KeyError as e:
        raise ValidationError(f"no uptake value for student {e.args[0]!r}") from None
    return float(sum(vals)) / len(nbrs)


def cluster_ratio_mean(values: dict, data: StudyData) -> float:
    """Ratio estimator over clusters: total of per-student values over total N.

    With ``values[student] =`` that student's class size this is the expected
    class size of a randomly chosen student, which upweights large classes
    relative to the plain mean of class sizes.
    """
    if data.n_students == 0:
        raise ValidationError("no students")
    total = 0.0
    for s in data.students:
        try:
            total += values[s.student_id]
        except KeyError:
            raise ValidationError(f"no value for student {s.student_id!r}") from None
    return total / data.n_students


def validation_report(data: StudyData) -> dict:
    """Structured summary: arm sizes, degree distribution, isolated students."""
    arms = {}
    for zval in (1, 2, 3):
        in_arm = data.z_class == zval
        arms[str(zval)] = {
            "classes": int(in_arm.sum()),
            "students": int((data.z == zval).sum()),
        }
    deg = data.degree
    hist = {str(k): int((deg == k).sum()) for k in range(int(deg.max()) + 1)} if len(deg) else {}
    isolated = [data.student_ids[i] for i in np.flatnonzero(deg == 0)]
    return {
        "n_students": data.n_students,
        "n_classes": data.n_classes,
        "arms": arms,
        "n_edges": len(data.network),
        "degree_hist": hist,
        "isolated_students": isolated,
        "mean_degree": float(deg.mean()) if len(deg) else 0.0,
        "covariates": {
            "names": list(data.covariate_spec.names),
            "kinds": list(data.covariate_spec.kinds),
            "strata_model": [n for n, m in zip(data.covariate_spec.names, data.covariate_spec.strata_mask) if m],
            "outcome_model": [n for n, m in zip(data.covariate_spec.names, data.covariate_spec.outcome_mask) if m],
        },
    }
