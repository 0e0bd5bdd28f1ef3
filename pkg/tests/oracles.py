"""Slow, obviously-correct reference implementations used by the tests.

None of these call into the library code they check.
"""

import math
from collections import deque

import numpy as np


def erode_bruteforce(mask, radius):
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
               if dy * dy + dx * dx <= radius * radius]
    out = np.zeros_like(mask)
    for r in range(rows):
        for c in range(cols):
            ok = True
            for dy, dx in offsets:
                rr, cc = r + dy, c + dx
                if not (0 <= rr < rows and 0 <= cc < cols and mask[rr, cc]):
                    ok = False
                    break
            out[r, c] = ok
    return out


def components_floodfill(mask):
    """8-connected components as lists of pixels, in raster order of their first pixel."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r in range(rows):
        for c in range(cols):
            if mask[r, c] and not seen[r, c]:
                comp = []
                queue = deque([(r, c)])
                seen[r, c] = True
                while queue:
                    y, x = queue.popleft()
                    comp.append((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < rows and 0 <= xx < cols and mask[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                queue.append((yy, xx))
                comps.append(comp)
    return comps


def largest_component_floodfill(mask):
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    comps = components_floodfill(mask)
    if comps:
        best = comps[0]
        for comp in comps[1:]:
            if len(comp) > len(best):
                best = comp
        for y, x in best:
            out[y, x] = True
    return out


def iou_pixels(a, b, scale=1):
    """IoU of integer boxes (x, y, w, h) by counting unit cells (optionally subdivided)."""
    def cells(box):
        x, y, w, h = (int(round(v * scale)) for v in box)
        return {(i, j) for i in range(x, x + w) for j in range(y, y + h)}
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def froc_bruteforce(preds, gts, volumes, min_dist=100.0, z_frac=0.25, unit="volume"):
    """Recompute matching from scratch at every threshold.

    preds / gts are library objects but only their plain fields are read.
    Returns a list of (threshold, avg_fp, sensitivity).
    """
    slices = {tuple(v.key): v.slices for v in volumes}
    if unit == "breast":
        denominator = len({k[:3] for k in slices})
        n_pos = len({tuple(g.volume_key)[:3] for g in gts})
    elif unit == "slice":
        denominator = sum(slices.values())
        n_pos = len(gts)
    else:
        denominator = len(slices)
        n_pos = len(gts)

    def matches(p, g):
        if tuple(p.volume_key) != tuple(g.volume_key):
            return False
        px, py = p.box.x + p.box.width / 2, p.box.y + p.box.height / 2
        gx, gy = g.box.x + g.box.width / 2, g.box.y + g.box.height / 2
        dist = math.sqrt((px - gx) ** 2 + (py - gy) ** 2)
        diag = math.sqrt(g.box.width ** 2 + g.box.height ** 2)
        if not (dist < diag / 2 or dist < min_dist):
            return False
        return abs(p.center_slice - g.center_slice) <= z_frac * slices[tuple(g.volume_key)]

    points = []
    for t in sorted({p.score for p in preds}, reverse=True):
        active = [i for i in range(len(preds)) if preds[i].score >= t]
        active.sort(key=lambda i: (-preds[i].score, i))
        claimed = set()
        fp = 0
        for i in active:
            p = preds[i]
            cands = []
            for j, g in enumerate(gts):
                if j not in claimed and matches(p, g):
                    gx, gy = g.box.x + g.box.width / 2, g.box.y + g.box.height / 2
                    px, py = p.box.x + p.box.width / 2, p.box.y + p.box.height / 2
                    cands.append((math.hypot(px - gx, py - gy), j))
            if cands:
                claimed.add(min(cands)[1])
            else:
                fp += 1
        if unit == "breast":
            hit = len({tuple(gts[j].volume_key)[:3] for j in claimed})
        else:
            hit = len(claimed)
        points.append((t, fp / denominator, hit / n_pos))
    if not points:
        points.append((math.inf, 0.0, 0.0))
    return points


def central_difference(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)
