"""The two-dimensional granularity grid and labelings over all its points."""

from dataclasses import dataclass

from .errors import ValidationError
from .hmm import Granularity


@dataclass(frozen=True)
class GranularityGrid:
    temporal_values: tuple
    phonetic_values: tuple
    gaussians_per_state: int = 4

    def __post_init__(self):
        t = tuple(int(v) for v in self.temporal_values)
        p = tuple(int(v) for v in self.phonetic_values)
        object.__setattr__(self, "temporal_values", t)
        object.__setattr__(self, "phonetic_values", p)
        for name, vals in (("temporal", t), ("phonetic", p)):
            if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValidationError(f"{name} values must be non-empty and strictly increasing")
        for point in self.points():
            self.granularity(point)

    @property
    def shape(self):
        return len(self.temporal_values), len(self.phonetic_values)

    def points(self):
        """All (m, n) pairs, m-major."""
        return [(m, n) for m in self.temporal_values for n in self.phonetic_values]

    def granularity(self, point):
        return Granularity(point[0], point[1], self.gaussians_per_state)

    def neighbors(self, point):
        """Adjacent points along each axis; None at a grid edge.

        Keys: ``phon_lower`` (m, n_{k-1}), ``phon_upper`` (m, n_{k+1}),
        ``temp_lower`` (m_{k-1}, n), ``temp_upper`` (m_{k+1}, n).
        """
        m, n = point
        i = self.temporal_values.index(m)
        j = self.phonetic_values.index(n)
        tv, pv = self.temporal_values, self.phonetic_values
        return {
            "phon_lower": (m, pv[j - 1]) if j > 0 else None,
            "phon_upper": (m, pv[j + 1]) if j + 1 < len(pv) else None,
            "temp_lower": (tv[i - 1], n) if i > 0 else None,
            "temp_upper": (tv[i + 1], n) if i + 1 < len(tv) else None,
        }

    def to_dict(self):
        return {"temporal_values": list(self.temporal_values),
                "phonetic_values": list(self.phonetic_values),
                "gaussians_per_state": self.gaussians_per_state}


def point_key(point):
    return f"{point[0]}x{point[1]}"


def parse_point(key):
    m, n = key.split("x")
    return int(m), int(n)


class GridLabeling:
    """Decoded (or relabeled) pattern sequences for every grid point and
    utterance: ``labels[(m, n)][utterance_id] -> Labeling``."""

    def __init__(self, labels, relabeled=False):
        self.labels = {pt: dict(per_utt) for pt, per_utt in labels.items()}
        self.relabeled = relabeled

    def __getitem__(self, point):
        return self.labels[point]

    @property
    def points(self):
        return list(self.labels)

    def utterances(self, point=None):
        point = point if point is not None else next(iter(self.labels))
        return list(self.labels[point])

    def omega(self, point, utterance_id, l):
        """The l-th segment ``(pattern, start, end)`` of an utterance."""
        return self.labels[point][utterance_id].segments[l]

    def check_complete(self, grid):
        missing = set(grid.points()) - set(self.labels)
        if missing:
            raise ValidationError(f"labels missing for grid points {sorted(missing)}")
        utts = None
        for pt in grid.points():
            these = set(self.labels[pt])
            if utts is None:
                utts = these
            elif these != utts:
                raise ValidationError(f"grid point {pt} covers a different utterance set")

    def with_labels(self, point, per_utt):
        new = dict(self.labels)
        new[point] = dict(per_utt)
        return GridLabeling(new, self.relabeled)
