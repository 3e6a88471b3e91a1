"""Ranked differential shared by all rankers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RankedDifferential:
    """Every disease exactly once, score descending, ties broken by ascending disease id."""

    disease_ids: tuple[int, ...]
    scores: tuple[float, ...]

    def top(self, k: int) -> list[tuple[int, float]]:
        return list(zip(self.disease_ids[:k], self.scores[:k]))

    def position(self, disease_id: int) -> int:
        return self.disease_ids.index(disease_id)


def rank_order(disease_ids, keys) -> np.ndarray:
    """Indices sorting ``keys`` descending with ties by ascending id.

    ``keys`` may be 1-D (one case) or 2-D (cases x diseases); ids must be sorted ascending so a
    stable sort on the negated key gives the tie rule.
    """
    keys = np.asarray(keys)
    ids = np.asarray(disease_ids)
    if np.any(np.diff(ids) <= 0):
        raise ValueError("disease ids must be strictly increasing")
    return np.argsort(-keys, axis=-1, kind="stable")


def make_ranked(disease_ids, scores, keys=None) -> RankedDifferential:
    keys = scores if keys is None else keys
    order = rank_order(disease_ids, keys)
    ids = np.asarray(disease_ids)[order]
    sc = np.asarray(scores)[order]
    return RankedDifferential(tuple(int(i) for i in ids), tuple(sc.tolist()))
