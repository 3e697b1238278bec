"""Independent reference implementations used to check the fast paths.

The marching oracle steps along each beam in small increments and tests the
point-to-obstacle relationship at every sample: containment for circles, a
side-sign flip within the segment's extent for segments. It shares no code or
algebra with the closed-form intersection kernels.
"""

from __future__ import annotations

import math

import numpy as np

from navgym.geometry import Circle, Pose, ScannerSpec, Segment


def _march(pose: Pose, obstacles, spec: ScannerSpec, step: float, u_slack: float,
           beam_chunk: int) -> np.ndarray:
    """One marching pass. u_slack widens (positive) or shrinks (negative) the
    accepted along-segment extent by that many marching steps; a beam grazing a
    segment endpoint is accepted by a positive slack and rejected by a negative
    one, which is how the bracket below isolates endpoint cases."""
    ts = np.arange(0.0, spec.max_range + step, step)
    n = spec.num_beams
    result = np.full(n, spec.max_range)
    for lo in range(0, n, beam_chunk):
        hi = min(lo + beam_chunk, n)
        angles = np.array([spec.beam_bearing(j, pose.heading) for j in range(lo, hi)])
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (K,2)
        px = pose.position.x + ts[None, :] * dirs[:, 0:1]  # (K,T)
        py = pose.position.y + ts[None, :] * dirs[:, 1:2]
        best = np.full(hi - lo, spec.max_range)
        for ob in obstacles:
            if isinstance(ob, Circle):
                inside = (px - ob.center.x) ** 2 + (py - ob.center.y) ** 2 <= ob.radius**2
                hit_any = inside.any(axis=1)
                first = np.argmax(inside, axis=1)
                t_hit = np.where(hit_any, ts[first], np.inf)
            else:
                ex = ob.b.x - ob.a.x
                ey = ob.b.y - ob.a.y
                rx = px - ob.a.x
                ry = py - ob.a.y
                side = ex * ry - ey * rx  # (K,T)
                u = (rx * ex + ry * ey) / (ex * ex + ey * ey)
                seg_len = math.hypot(ex, ey)
                u_tol = u_slack * step / seg_len
                crossing = (side[:, :-1] * side[:, 1:] <= 0.0) & (
                    (np.abs(side[:, :-1]) > 0.0) | (np.abs(side[:, 1:]) > 0.0)
                )
                in_extent = (u[:, 1:] >= -u_tol) & (u[:, 1:] <= 1.0 + u_tol)
                hit = crossing & in_extent
                hit_any = hit.any(axis=1)
                first = np.argmax(hit, axis=1)
                t_hit = np.where(hit_any, ts[first + 1], np.inf)
            best = np.minimum(best, t_hit)
        result[lo:hi] = np.minimum(best, spec.max_range)
    return result


def marching_scan(pose: Pose, obstacles, spec: ScannerSpec, step: float = 0.001,
                  beam_chunk: int = 256) -> np.ndarray:
    """Brute-force scan: march each beam in `step` increments to max_range."""
    return _march(pose, obstacles, spec, step, u_slack=2.0, beam_chunk=beam_chunk)


def marching_scan_bracket(pose: Pose, obstacles, spec: ScannerSpec, step: float = 0.001,
                          beam_chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(lower, upper) marching bounds on the true scan.

    A marched ray cannot decide sub-step questions at segment endpoints, so the
    lower bound accepts endpoint-grazing crossings and the upper bound rejects
    them; the exact ranges satisfy lower - step <= true <= upper + step, and the
    two bounds coincide away from endpoints."""
    loose = _march(pose, obstacles, spec, step, u_slack=2.0, beam_chunk=beam_chunk)
    tight = _march(pose, obstacles, spec, step, u_slack=-2.0, beam_chunk=beam_chunk)
    return loose, tight


def brute_force_returns(rewards, gamma: float, bootstrap: float = 0.0,
                        terminal: bool = True) -> np.ndarray:
    """Direct discounted suffix sums: R_i = sum_k gamma^k r_{i+k} (+ tail)."""
    n = len(rewards)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for k in range(i, n):
            acc += (gamma ** (k - i)) * float(rewards[k])
        if not terminal:
            acc += (gamma ** (n - i)) * float(bootstrap)
        out[i] = acc
    return out
