"""Brute-force reference implementations used by the tests."""

import itertools
from collections import deque

import numpy as np


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def pairwise_ovo_auc(score_matrix, labels):
    labels = list(labels)
    classes = sorted(set(labels))
    values = []
    for i, j in itertools.combinations(classes, 2):
        rows = [k for k, y in enumerate(labels) if y in (i, j)]
        a_ij = pair_count_auc([score_matrix[k][i] for k in rows], [labels[k] == i for k in rows])
        a_ji = pair_count_auc([score_matrix[k][j] for k in rows], [labels[k] == j for k in rows])
        values.append((a_ij + a_ji) / 2)
    return sum(values) / len(values)


def surface(mask):
    out = []
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < shape[axis] or not mask[tuple(nb)]:
                    out.append(idx)
                    break
            else:
                continue
            break
    return out


def all_pairs_hausdorff(a, b, spacing):
    pa = np.array(surface(a), dtype=float) * spacing
    pb = np.array(surface(b), dtype=float) * spacing
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def flood_fill_components(mask):
    """26-connected components in raster order of their first voxel."""
    seen = np.zeros(mask.shape, bool)
    comps = []
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]
    for idx in itertools.product(*[range(n) for n in mask.shape]):
        if not mask[idx] or seen[idx]:
            continue
        comp, queue = [], deque([idx])
        seen[idx] = True
        while queue:
            v = queue.popleft()
            comp.append(v)
            for o in offsets:
                nb = tuple(a + b for a, b in zip(v, o))
                if all(0 <= c < n for c, n in zip(nb, mask.shape)) and mask[nb] and not seen[nb]:
                    seen[nb] = True
                    queue.append(nb)
        comps.append(comp)
    return comps


def largest_component_oracle(mask):
    comps = flood_fill_components(mask)
    out = np.zeros(mask.shape, np.uint8)
    if not comps:
        return out
    best = max(comps, key=len)  # first maximal in raster order
    for v in best:
        out[v] = 1
    return out
