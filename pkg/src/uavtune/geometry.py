"""Planar segment intersection tests used for interaction counting.

Scenario difficulty is proxied by how many other agents' straight
start-to-goal paths cross an agent's own path, counted in the horizontal
plane.  Closed segments are used and collinear overlap counts as an
intersection, so two agents swapping positions along the same line
register one mutual interaction.
"""

from __future__ import annotations

import numpy as np


def orientation(p, q, r) -> int:
    """0 if collinear, 1 for clockwise, -1 for counter-clockwise."""
    val = (q[1] - p[1]) * (r[0] - q[0]) - (q[0] - p[0]) * (r[1] - q[1])
    if val == 0.0:
        return 0
    return 1 if val > 0 else -1


def _on_segment(p, q, r) -> bool:
    """Whether collinear point q lies within the bounding box of segment pr."""
    return (
        min(p[0], r[0]) <= q[0] <= max(p[0], r[0])
        and min(p[1], r[1]) <= q[1] <= max(p[1], r[1])
    )


def segments_intersect(a1, a2, b1, b2) -> bool:
    """Whether closed 2D segments a1-a2 and b1-b2 share any point."""
    a1, a2, b1, b2 = (np.asarray(p, dtype=float)[:2] for p in (a1, a2, b1, b2))
    if np.array_equal(a1, a2) or np.array_equal(b1, b2):
        raise ValueError("degenerate (zero-length) segment")

    o1 = orientation(a1, a2, b1)
    o2 = orientation(a1, a2, b2)
    o3 = orientation(b1, b2, a1)
    o4 = orientation(b1, b2, a2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and _on_segment(a1, b1, a2):
        return True
    if o2 == 0 and _on_segment(a1, b2, a2):
        return True
    if o3 == 0 and _on_segment(b1, a1, b2):
        return True
    if o4 == 0 and _on_segment(b1, a2, b2):
        return True
    return False


def crossing_point(a1, a2, b1, b2):
    """Representative intersection point of two crossing segments, or None.

    Proper crossings return the exact line intersection; collinear overlaps
    return the midpoint of the shared portion (marker use only).
    """
    if not segments_intersect(a1, a2, b1, b2):
        return None
    a1, a2, b1, b2 = (np.asarray(p, dtype=float)[:2] for p in (a1, a2, b1, b2))
    da, db = a2 - a1, b2 - b1
    denom = da[0] * db[1] - da[1] * db[0]
    if denom != 0.0:
        t = ((b1[0] - a1[0]) * db[1] - (b1[1] - a1[1]) * db[0]) / denom
        return a1 + t * da
    # collinear overlap: project all endpoints on the shared direction
    axis = da / np.linalg.norm(da)
    coords = sorted([float(axis @ (p - a1)) for p in (a1, a2, b1, b2)])
    mid = 0.5 * (coords[1] + coords[2])
    return a1 + mid * axis


def interaction_count(starts: np.ndarray, goals: np.ndarray, agent: int) -> int:
    """Number of other agents whose straight path crosses the given agent's."""
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    count = 0
    for j in range(starts.shape[0]):
        if j == agent:
            continue
        if segments_intersect(starts[agent], goals[agent], starts[j], goals[j]):
            count += 1
    return count


def interaction_counts(starts: np.ndarray, goals: np.ndarray) -> np.ndarray:
    """Interaction count for every agent."""
    n = np.atleast_2d(starts).shape[0]
    return np.array([interaction_count(starts, goals, i) for i in range(n)])
