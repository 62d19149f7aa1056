"""Episode sampling and the RDFT/IDFT/ADFT pseudo-episode division schemes.

A support grid is indexed [class k][shot j]; shot columns keep their sampling
order, so all three splitters are pure functions of (support, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class CapacityError(ValueError):
    """The sample pool cannot supply the requested episode."""


class ShotCountError(ValueError):
    """A division scheme was asked to split a single-shot support set."""


@dataclass(frozen=True)
class Sample:
    features: np.ndarray          # (mel bins, frames)
    class_id: int
    source_id: str
    waveform: object = None       # optional Waveform, kept for ADFT augmentation


@dataclass
class Episode:
    support: list                 # [K][N] grid of Samples
    query: list                   # flat list of Samples
    way: int
    shot: int

    def support_column(self, j):
        return [row[j] for row in self.support]


@dataclass
class PseudoEpisode:
    support: list                 # [K][N'] grid
    query: list                   # one Sample per class, len K
    origin: str                   # RDFT | IDFT | ADFT
    index: int


# augmentation fallbacks during adft_split, reset via reset_warning_counters()
WARNING_COUNTERS = {"adft_augment_failures": 0}


def reset_warning_counters():
    for k in WARNING_COUNTERS:
        WARNING_COUNTERS[k] = 0


def sample_episode(pool, way, shot, queries, rng):
    """Draw a K-way-N-shot episode from {class_id: [Sample, ...]}.

    Classes uniform without replacement; per class, shot+queries samples
    without replacement, the first `shot` forming the support column order.
    """
    classes = sorted(pool)
    if len(classes) < way:
        raise CapacityError(f"need {way} classes, pool has {len(classes)}")
    short = [c for c in classes if len(pool[c]) < shot + queries]
    if short:
        raise CapacityError(
            f"classes {short} have fewer than {shot + queries} samples")
    chosen = rng.choice(len(classes), size=way, replace=False)
    support, query = [], []
    for c_idx in chosen:
        cls = classes[int(c_idx)]
        picks = rng.choice(len(pool[cls]), size=shot + queries, replace=False)
        samples = [pool[cls][int(i)] for i in picks]
        support.append(samples[:shot])
        query.extend(samples[shot:])
    return Episode(support=support, query=query, way=way, shot=shot)


def _require_multishot(shot, scheme):
    if shot < 2:
        raise ShotCountError(f"{scheme} needs at least 2 shots, got {shot}")


def rdft_split(support):
    """Rotate each shot column out as the pseudo query; N episodes of K-way-(N-1)-shot."""
    way, shot = len(support), len(support[0])
    _require_multishot(shot, "RDFT")
    out = []
    for j in range(shot):
        grid = [[row[t] for t in range(shot) if t != j] for row in support]
        query = [row[j] for row in support]
        out.append(PseudoEpisode(grid, query, "RDFT", j))
    return out


def idft_split(support):
    """Grow the pseudo support left-to-right; query is always the next unseen column."""
    way, shot = len(support), len(support[0])
    _require_multishot(shot, "IDFT")
    out = []
    for t in range(1, shot):
        grid = [row[:t] for row in support]
        query = [row[t] for row in support]
        out.append(PseudoEpisode(grid, query, "IDFT", t - 1))
    return out


def adft_split(support, augmenter=None, rng=None):
    """RDFT plus one replicated column, restoring a K-way-N-shot pseudo support.

    Episode j replicates column (j-1) mod N; with an augmenter the copy is
    transformed, and on augmenter failure the raw copy is kept and a warning
    counter incremented.
    """
    way, shot = len(support), len(support[0])
    _require_multishot(shot, "ADFT")
    out = []
    for j in range(shot):
        rep = (j - 1) % shot
        grid = []
        for row in support:
            extra = row[rep]
            if augmenter is not None:
                try:
                    extra = augmenter(extra, rng)
                except Exception:
                    WARNING_COUNTERS["adft_augment_failures"] += 1
            grid.append([row[t] for t in range(shot) if t != j] + [extra])
        query = [row[j] for row in support]
        out.append(PseudoEpisode(grid, query, "ADFT", j))
    return out


def split_support(support, scheme, augmenter=None, rng=None):
    if scheme == "rdft":
        return rdft_split(support)
    if scheme == "idft":
        return idft_split(support)
    if scheme == "adft":
        return adft_split(support, augmenter=augmenter, rng=rng)
    raise ValueError(f"unknown division scheme: {scheme}")


def export_manifest(episode_id, episode):
    """Line records `episode-id, role, class-id, shot-index, source-id` for debugging."""
    lines = []
    for k, row in enumerate(episode.support):
        for j, s in enumerate(row):
            lines.append(f"{episode_id},support,{s.class_id},{j},{s.source_id}")
    for s in episode.query:
        lines.append(f"{episode_id},query,{s.class_id},-1,{s.source_id}")
    return "\n".join(lines)
