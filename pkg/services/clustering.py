"""
Center-wise clustering of rater styles for RaterLab.

Clusters are the raters' known centers; no clustering algorithm is run.
Scatter is the mean member-to-centroid distance (Davies-Bouldin with q=1,
Euclidean p=2) and the radius is the largest member-to-centroid distance.
"""
import itertools
from collections import Counter
from typing import Dict, List, Mapping, Sequence

import numpy as np

from services.errors import ClusteringError
from services.models import CentroidDistance, ClusterReport, StylePoint, StyleTable
from utils.logger import get_logger

logger = get_logger(__name__)


def group_by_center(points: Sequence[StylePoint]) -> Dict[str, List[StylePoint]]:
    """center_id -> member points, sorted by center id."""
    grouped: Dict[str, List[StylePoint]] = {}
    for point in points:
        grouped.setdefault(point.center_id, []).append(point)
    return dict(sorted(grouped.items()))


def points_from_style_table(table: StyleTable) -> List[StylePoint]:
    """One (bias, consistency) point per rater."""
    return [
        StylePoint(rater_id=row.rater_id, center_id=row.center_id, coords=(row.bias, row.consistency))
        for row in table.rows
    ]


def _coords(members: Sequence[StylePoint]) -> np.ndarray:
    return np.array([p.coords for p in members], dtype=np.float64)


def _centroid_scatter(members: Sequence[StylePoint]):
    coords = _coords(members)
    centroid = coords.mean(axis=0)
    distances = np.linalg.norm(coords - centroid, axis=1)
    return centroid, distances


def _check_distinct_clusters(clusters: Mapping[str, Sequence[StylePoint]]) -> None:
    multisets = {}
    for name, members in clusters.items():
        key = tuple(sorted(Counter(tuple(p.coords) for p in members).items()))
        if key in multisets:
            raise ClusteringError(f"clusters {multisets[key]!r} and {name!r} have identical members")
        multisets[key] = name


def davies_bouldin(clusters: Mapping[str, Sequence[StylePoint]]) -> float:
    """
    Davies-Bouldin index: ``(1/k) sum_i max_{j != i} (S_i + S_j) / M_ij``.

    Args:
        clusters: cluster name -> member points (at least two clusters)

    Returns:
        DB index (lower is better)

    Raises:
        ClusteringError: fewer than two clusters, an empty cluster, identical
            clusters or coincident centroids
    """
    if len(clusters) < 2:
        raise ClusteringError(f"Davies-Bouldin needs at least 2 clusters, got {len(clusters)}")
    if any(len(members) == 0 for members in clusters.values()):
        raise ClusteringError("empty cluster")
    _check_distinct_clusters(clusters)

    names = list(clusters)
    stats = [_centroid_scatter(clusters[name]) for name in names]
    centroids = np.array([c for c, _ in stats])
    scatter = np.array([d.mean() for _, d in stats])

    ratios = np.zeros((len(names), len(names)))
    for i, j in itertools.permutations(range(len(names)), 2):
        separation = float(np.linalg.norm(centroids[i] - centroids[j]))
        if separation == 0.0:
            raise ClusteringError(f"clusters {names[i]!r} and {names[j]!r} share a centroid")
        ratios[i, j] = (scatter[i] + scatter[j]) / separation
    np.fill_diagonal(ratios, -np.inf)
    return float(ratios.max(axis=1).mean())


def cluster_report(points: Sequence[StylePoint]) -> ClusterReport:
    """
    Centroids, radii, pairwise centroid distances and DB index of the
    center-wise grouping.

    Args:
        points: Style points; each is grouped by its center id

    Returns:
        ClusterReport; ``db_index`` is None (and flagged) when undefined
    """
    if not points:
        raise ClusteringError("no style points")
    clusters = group_by_center(points)

    centroids, radii, scatter, sizes = {}, {}, {}, {}
    for name, members in clusters.items():
        centroid, distances = _centroid_scatter(members)
        centroids[name] = (float(centroid[0]), float(centroid[1]))
        # A singleton sits on its own centroid.
        radii[name] = float(distances.max()) if len(members) > 1 else 0.0
        scatter[name] = float(distances.mean()) if len(members) > 1 else 0.0
        sizes[name] = len(members)

    distances = [
        CentroidDistance(
            center_a=a,
            center_b=b,
            distance=float(np.linalg.norm(np.subtract(centroids[a], centroids[b]))),
        )
        for a, b in itertools.combinations(clusters, 2)
    ]

    flags: List[str] = []
    db_index = None
    try:
        db_index = davies_bouldin(clusters)
    except ClusteringError as e:
        flags.append(f"db_index_undefined: {e}")
        logger.warning(f"Davies-Bouldin index undefined: {e}")

    return ClusterReport(
        centroids=centroids,
        radii=radii,
        scatter=scatter,
        sizes=sizes,
        distances=distances,
        db_index=db_index,
        n_clusters=len(clusters),
        flags=flags,
    )
