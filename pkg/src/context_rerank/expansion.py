"""Contextual instance expansion: find co-traveler pairs for a target pair.

Candidates are every cross pair of non-target persons between the probe
scene and the gallery scene; the top-K highest-scoring one-to-one matches
become the context pairs, replicated at random when fewer than K exist.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .embeddings import Instance, Scene
from .errors import UsageError

DEFAULT_K = 3


@dataclass(frozen=True)
class ContextPair:
    probe_ctx: Instance
    gallery_ctx: Instance
    score: float


@dataclass(frozen=True)
class ExpandedPair:
    """A target pair plus exactly K context pairs (replicated if scarce).

    ``degenerate`` marks targets with zero context candidates; callers fall
    back to plain pair similarity for those.
    """

    target: tuple  # (probe Instance, gallery Instance)
    contexts: tuple  # K ContextPair entries, descending score
    k: int
    degenerate: bool = False


def enumerate_candidates(probe_scene: Scene, probe: Instance, gallery_scene: Scene, gallery: Instance):
    """Cross product of non-target persons between the two scenes."""
    if probe not in probe_scene.instances:
        raise UsageError(f"probe {probe.instance_id} is not in scene {probe_scene.scene_id}")
    if gallery not in gallery_scene.instances:
        raise UsageError(f"gallery {gallery.instance_id} is not in scene {gallery_scene.scene_id}")
    probe_others = [i for i in probe_scene.instances if i.instance_id != probe.instance_id]
    gallery_others = [i for i in gallery_scene.instances if i.instance_id != gallery.instance_id]
    return [(p, g) for p in probe_others for g in gallery_others]


def select_top_k(candidates, scorer, k: int):
    """Greedy one-to-one matching by descending score.

    Repeatedly takes the best-scoring candidate whose probe and gallery
    members are both unused; ties break by (probe id, gallery id). Returns
    at most k ContextPairs, sorted by descending score.
    """
    if k < 1:
        raise UsageError(f"context K must be >= 1, got {k}")
    scored = [
        (p, g, float(scorer(p, g))) for p, g in candidates
    ]
    scored.sort(key=lambda t: (-t[2], t[0].instance_id, t[1].instance_id))
    chosen = []
    used_probe = set()
    used_gallery = set()
    for p, g, s in scored:
        if p.instance_id in used_probe or g.instance_id in used_gallery:
            continue
        chosen.append(ContextPair(p, g, s))
        used_probe.add(p.instance_id)
        used_gallery.add(g.instance_id)
        if len(chosen) == k:
            break
    return chosen


def _pair_rng(seed: int, probe: Instance, gallery: Instance) -> np.random.Generator:
    # stable per-pair stream so expansion order never depends on call order
    tag = f"{probe.instance_id}|{gallery.instance_id}".encode()
    return np.random.default_rng((seed, zlib.crc32(tag)))


def expand(
    probe_scene: Scene,
    probe: Instance,
    gallery_scene: Scene,
    gallery: Instance,
    scorer,
    k: int = DEFAULT_K,
    seed: int = 0,
) -> ExpandedPair:
    """Top-K context selection with random replication when contexts are scarce."""
    candidates = enumerate_candidates(probe_scene, probe, gallery_scene, gallery)
    chosen = select_top_k(candidates, scorer, k)
    if not chosen:
        return ExpandedPair(target=(probe, gallery), contexts=(), k=k, degenerate=True)
    if len(chosen) < k:
        rng = _pair_rng(seed, probe, gallery)
        extra = [chosen[i] for i in rng.integers(0, len(chosen), size=k - len(chosen))]
        chosen = sorted(chosen + extra, key=lambda c: (-c.score, c.probe_ctx.instance_id, c.gallery_ctx.instance_id))
    return ExpandedPair(target=(probe, gallery), contexts=tuple(chosen), k=k)
