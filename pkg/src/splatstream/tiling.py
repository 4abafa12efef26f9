"""Spatial tiling: uniform grid partition, saliency-driven agglomerative
clustering into adaptive tiles, cross-GoF matching, and motion analysis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .gaussians import MotionClass, Tile, ValidationError


@dataclass
class UniformTile:
    cell: tuple            # (ix, iy, iz) grid coordinates
    primitive_ids: np.ndarray
    bbox: tuple            # (lo, hi)
    saliency: float = 0.0

    def centroid(self, cloud):
        return cloud.positions[self.primitive_ids].mean(axis=0)


def uniform_partition(cloud, grid):
    """Grid the scene bbox and bucket primitives by center position.

    Empty cells are dropped; the returned tiles are ordered by flattened
    cell index so co-located cells align across GoFs sharing a bbox.
    """
    nx, ny, nz = (int(g) for g in grid)
    if nx < 1 or ny < 1 or nz < 1:
        raise ValidationError("grid dimensions must be >= 1")
    if len(cloud) == 0:
        raise ValidationError("cannot partition an empty scene")
    lo, hi = cloud.bbox()
    extent = np.maximum(hi - lo, 1e-12)
    dims = np.array([nx, ny, nz])
    cells = np.floor((cloud.positions - lo) / extent * dims).astype(int)
    cells = np.clip(cells, 0, dims - 1)
    flat = cells[:, 0] * ny * nz + cells[:, 1] * nz + cells[:, 2]
    tiles = []
    for key in np.unique(flat):
        ids = np.flatnonzero(flat == key)
        ix, iy, iz = key // (ny * nz), (key // nz) % ny, key % nz
        cell_lo = lo + extent * np.array([ix, iy, iz]) / dims
        cell_hi = lo + extent * (np.array([ix, iy, iz]) + 1) / dims
        tiles.append(UniformTile(cell=(int(ix), int(iy), int(iz)),
                                 primitive_ids=ids, bbox=(cell_lo, cell_hi)))
    return tiles


def partition_with_bbox(cloud, grid, lo, hi):
    """Uniform partition against a fixed bbox (shared across GoFs)."""
    nx, ny, nz = (int(g) for g in grid)
    if nx < 1 or ny < 1 or nz < 1:
        raise ValidationError("grid dimensions must be >= 1")
    extent = np.maximum(np.asarray(hi, float) - np.asarray(lo, float), 1e-12)
    dims = np.array([nx, ny, nz])
    cells = np.floor((cloud.positions - lo) / extent * dims).astype(int)
    cells = np.clip(cells, 0, dims - 1)
    flat = cells[:, 0] * ny * nz + cells[:, 1] * nz + cells[:, 2]
    tiles = []
    for key in np.unique(flat):
        ids = np.flatnonzero(flat == key)
        ix, iy, iz = key // (ny * nz), (key // nz) % ny, key % nz
        cell_lo = lo + extent * np.array([ix, iy, iz]) / dims
        cell_hi = lo + extent * (np.array([ix, iy, iz]) + 1) / dims
        tiles.append(UniformTile(cell=(int(ix), int(iy), int(iz)),
                                 primitive_ids=ids, bbox=(cell_lo, cell_hi)))
    return tiles


def _face_adjacent(cell_a, cell_b):
    d = np.abs(np.array(cell_a) - np.array(cell_b))
    return d.sum() == 1


@dataclass
class TileGraph:
    """Clusters of uniform tiles with face adjacency and mean saliency."""

    clusters: list          # list[set[int]] of uniform tile indices
    adjacency: set          # frozenset pairs of cluster indices
    scores: list            # per-cluster saliency
    sizes: list             # per-cluster primitive counts

    @staticmethod
    def from_tiles(tiles, scores):
        if len(scores) != len(tiles):
            raise ValidationError("need one score per tile")
        clusters = [{i} for i in range(len(tiles))]
        adjacency = set()
        for i in range(len(tiles)):
            for j in range(i + 1, len(tiles)):
                if _face_adjacent(tiles[i].cell, tiles[j].cell):
                    adjacency.add(frozenset((i, j)))
        sizes = [len(t.primitive_ids) for t in tiles]
        return TileGraph(clusters, adjacency, list(map(float, scores)), sizes)


def cluster(graph, target_count):
    """Greedy agglomerative merge of the most saliency-similar adjacent pair.

    Ties break on smaller combined primitive count, then lowest member tile
    id. Merging continues until `target_count` clusters remain, or until no
    adjacent pair exists (disconnected graphs stop early with a warning).
    """
    if target_count < 1:
        raise ValidationError("target_count must be >= 1")
    if target_count > len(graph.clusters):
        raise ValidationError("target_count exceeds initial cluster count")
    clusters = [set(c) for c in graph.clusters]
    scores = list(graph.scores)
    sizes = list(graph.sizes)
    adjacency = set(graph.adjacency)
    alive = set(range(len(clusters)))

    while len(alive) > target_count:
        best = None
        for pair in adjacency:
            i, j = sorted(pair)
            lo_i, lo_j = min(clusters[i]), min(clusters[j])
            key = (abs(scores[i] - scores[j]), sizes[i] + sizes[j],
                   min(lo_i, lo_j), max(lo_i, lo_j))
            if best is None or key < best[0]:
                best = (key, i, j)
        if best is None:
            warnings.warn("tile graph disconnected: stopping at "
                          f"{len(alive)} clusters (target {target_count})")
            break
        _, i, j = best
        total = sizes[i] + sizes[j]
        scores[i] = (scores[i] * sizes[i] + scores[j] * sizes[j]) / total
        sizes[i] = total
        clusters[i] |= clusters[j]
        alive.discard(j)
        new_adj = set()
        for pair in adjacency:
            a, b = tuple(pair)
            a = i if a == j else a
            b = i if b == j else b
            if a != b:
                new_adj.add(frozenset((a, b)))
        adjacency = new_adj
        clusters[j] = set()
    kept = sorted(alive, key=lambda c: min(clusters[c]))
    return TileGraph([clusters[c] for c in kept], set(), [scores[c] for c in kept],
                     [sizes[c] for c in kept])


def adaptive_tiles(cloud, uniform, clustered, gof_index):
    """Materialize clustered cells as adaptive tiles over the primitive store."""
    tiles = []
    for tid, (members, score) in enumerate(zip(clustered.clusters, clustered.scores)):
        ids = np.sort(np.concatenate([uniform[m].primitive_ids for m in sorted(members)]))
        los = np.stack([uniform[m].bbox[0] for m in members])
        his = np.stack([uniform[m].bbox[1] for m in members])
        tiles.append(Tile(id=tid, gof_index=gof_index,
                          bbox=(los.min(axis=0), his.max(axis=0)),
                          primitive_ids=ids, saliency=float(score),
                          member_cells=tuple(sorted(uniform[m].cell for m in members))))
    return tiles


@dataclass
class MotionRecord:
    tile_id: int
    matched_tile_id: int
    displacement: np.ndarray
    motion_class: MotionClass = MotionClass.STATIC
    group_id: int = -1


def match_tiles(tiles_a, tiles_b, cloud_a, cloud_b):
    """Greedy one-to-one pairing by closest saliency score.

    Candidate pairs are sorted by |score difference| ascending, ties by
    centroid distance; surplus tiles on either side stay unmatched.
    """
    cands = []
    for i, ta in enumerate(tiles_a):
        ca = ta.centroid(cloud_a)
        for j, tb in enumerate(tiles_b):
            dist = float(np.linalg.norm(tb.centroid(cloud_b) - ca))
            cands.append((abs(ta.saliency - tb.saliency), dist, i, j))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    unmatched_a = [i for i in range(len(tiles_a)) if i not in used_a]
    unmatched_b = [j for j in range(len(tiles_b)) if j not in used_b]
    return sorted(pairs), unmatched_a, unmatched_b


def classify_motion(pairs, tiles_a, tiles_b, cloud_a, cloud_b, eps_static, eps_high):
    """Bucket matched tiles by displacement magnitude (boundaries inclusive low)."""
    records = []
    for i, j in pairs:
        d = tiles_b[j].centroid(cloud_b) - tiles_a[i].centroid(cloud_a)
        mag = float(np.linalg.norm(d))
        if mag <= eps_static:
            cls = MotionClass.STATIC
        elif mag <= eps_high:
            cls = MotionClass.LOW_DYNAMIC
        else:
            cls = MotionClass.HIGH_DYNAMIC
        records.append(MotionRecord(tile_id=i, matched_tile_id=j,
                                    displacement=d, motion_class=cls))
    return records


def motion_cosine(v_a, v_b):
    """Cosine similarity; zero vectors match zero vectors (1) and nothing else."""
    na, nb = np.linalg.norm(v_a), np.linalg.norm(v_b)
    if na < 1e-12 and nb < 1e-12:
        return 1.0
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(v_a, v_b) / (na * nb))


def _tiles_adjacent(tile_a, tile_b):
    cells_a = set(tile_a.member_cells)
    for cell in tile_b.member_cells:
        for axis in range(3):
            for step in (-1, 1):
                other = list(cell)
                other[axis] += step
                if tuple(other) in cells_a:
                    return True
    return False


def group_low_dynamic(records, tiles, tau=0.9):
    """Union adjacent low-dynamic tiles with cosine-similar motion vectors.

    Each group shares one deformation field; group ids are assigned densely
    by lowest member tile id. Non-low-dynamic records keep group_id -1.
    """
    low = [r for r in records if r.motion_class is MotionClass.LOW_DYNAMIC]
    parent = {r.tile_id: r.tile_id for r in low}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    by_id = {r.tile_id: r for r in low}
    ids = sorted(by_id)
    for a_pos, a in enumerate(ids):
        for b in ids[a_pos + 1:]:
            if not _tiles_adjacent(tiles[a], tiles[b]):
                continue
            if motion_cosine(by_id[a].displacement, by_id[b].displacement) >= tau:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = sorted({find(i) for i in ids})
    group_of_root = {root: g for g, root in enumerate(roots)}
    for r in low:
        r.group_id = group_of_root[find(r.tile_id)]
    return records
