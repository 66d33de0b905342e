"""Rank feature maps by how differently they respond with/without an AU.

For one action unit and one feature map, take the top-n peak activations
over images containing the unit (R) and over images without it (Q),
pair them rank-wise, and accumulate both directions of an epsilon-floored
KL-style sum. The map with the largest symmetric distance is the unit's
detector candidate.

Activations are used as raw values floored at epsilon, not true
probabilities; pass normalize=True to rescale each list to sum 1 first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError, DatasetManifest
from .harvest import ActivationDB, partition_by_au, top_n

EPSILON = 1e-8


def _as_response(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if (arr < 0).any():
        raise ValueError("activation responses must be nonnegative")
    return arr


def kl_term(r, q, eps: float = EPSILON, normalize: bool = False) -> float:
    """Sum of r_k * log(r_k / q_k) over rank-paired values.

    Both lists are floored at eps before the log so exact zeros stay
    finite. With normalize=True each list is first rescaled to sum 1.
    """
    r = _as_response(r)
    q = _as_response(q)
    if r.shape != q.shape:
        raise ValueError(f"length mismatch: {r.size} vs {q.size}")
    if normalize:
        if r.sum() > 0:
            r = r / r.sum()
        if q.sum() > 0:
            q = q / q.sum()
    r = np.maximum(r, eps)
    q = np.maximum(q, eps)
    return float(np.sum(r * np.log(r / q)))


@dataclass(frozen=True)
class ResponsePair:
    """Rank-aligned top-n responses from the with/without-AU image sets."""

    r: np.ndarray
    q: np.ndarray
    n: int

    def __post_init__(self):
        for name, arr in (("r", self.r), ("q", self.q)):
            if (np.diff(arr) > 0).any():
                raise ValueError(f"{name} values must be sorted descending")
        if self.r.shape != self.q.shape:
            raise ValueError("response lists must have equal length")


def make_response_pair(r_values, q_values, n: int) -> ResponsePair:
    """Truncate both descending lists to a common rank count <= n."""
    r = _as_response(r_values)
    q = _as_response(q_values)
    k = min(n, r.size, q.size)
    if k == 0:
        raise ValueError("cannot pair empty response lists")
    return ResponsePair(r=r[:k], q=q[:k], n=k)


def symmetric_distance(pair, q=None, eps: float = EPSILON,
                       normalize: bool = False) -> float:
    """kl_term(R, Q) + kl_term(Q, R); symmetric by construction.

    Takes either a ResponsePair or two explicit rank-paired lists.
    """
    if q is None:
        r, q = pair.r, pair.q
    else:
        r = pair
    return kl_term(r, q, eps, normalize) + kl_term(q, r, eps, normalize)


@dataclass
class AUDistanceProfile:
    """Per-map distances for one action unit plus the winning map."""

    au_id: int
    distances: np.ndarray
    argmax_map: int
    n: int
    provenance: dict[str, str]

    @property
    def argmax_distance(self) -> float:
        return float(self.distances[self.argmax_map])


def profile(db: ActivationDB, manifest: DatasetManifest, au_id: int, n: int = 9,
            normalize: bool = False) -> AUDistanceProfile:
    """Distance of one AU on every feature map, via rank-paired top-n.

    Partitions smaller than n shrink both lists to the shorter length
    (with a warning) so the pairing stays rank-aligned.
    """
    if db.num_images != len(manifest):
        raise DataError(
            f"activation db covers {db.num_images} images, manifest has {len(manifest)}"
        )
    with_au, without = partition_by_au(manifest, au_id)
    if not without:
        raise DataError(f"action unit {au_id} present in every image; no contrast set")
    available = min(len(with_au), len(without))
    if available < n:
        warnings.warn(
            f"AU {au_id}: only {available} images on the smaller side, using n={available}",
            stacklevel=2,
        )
    distances = np.zeros(db.num_maps)
    for j in range(db.num_maps):
        r = [rec.value for rec in top_n(db, j, with_au, n)]
        q = [rec.value for rec in top_n(db, j, without, n)]
        pair = make_response_pair(r, q, n)
        distances[j] = symmetric_distance(pair, normalize=normalize)
    argmax = int(np.argmax(distances))  # ties resolve to the smallest index
    provenance = dict(db.provenance)
    provenance["n"] = str(n)
    return AUDistanceProfile(au_id=au_id, distances=distances, argmax_map=argmax,
                             n=n, provenance=provenance)


def profile_all(db: ActivationDB, manifest: DatasetManifest, au_ids, n: int = 9,
                normalize: bool = False) -> list[AUDistanceProfile]:
    return [profile(db, manifest, au_id, n, normalize) for au_id in sorted(au_ids)]


def save_profile_csv(prof: AUDistanceProfile, path) -> None:
    lines = ["map,distance"]
    for j, d in enumerate(prof.distances):
        lines.append(f"{j},{repr(float(d))}")
    lines.append(f"argmax,{prof.argmax_map},{repr(prof.argmax_distance)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_profile_csv(path) -> tuple[np.ndarray, int]:
    """Distances and argmax map back from a profile CSV."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "map,distance":
        raise DataError(f"{path}: not a profile csv")
    body = [ln for ln in lines[1:] if ln]
    if not body or not body[-1].startswith("argmax,"):
        raise DataError(f"{path}: missing argmax summary line")
    distances = np.array([float(ln.split(",")[1]) for ln in body[:-1]])
    argmax = int(body[-1].split(",")[1])
    return distances, argmax
