"""Run a dataset through the network and record per-map peak activations.

For every (image, feature map) pair of the chosen layer the database
keeps the spatial maximum of the pooled activation and where it
occurred. All downstream association analysis works from this table,
so it is persisted as CSV with provenance hashes of the checkpoint and
manifest that produced it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import model as model_mod
from .data import DataError, DatasetManifest
from .model import Network


@dataclass(frozen=True)
class ActivationRecord:
    image_id: int
    map_index: int
    value: float
    row: int
    col: int


class ActivationDB:
    """Peak activations for one (network, dataset) pair, indexed both ways."""

    def __init__(self, image_ids: list[int], values: np.ndarray, rows: np.ndarray,
                 cols: np.ndarray, layer: int, provenance: dict[str, str]):
        self.image_ids = list(image_ids)
        self.values = values
        self.rows = rows
        self.cols = cols
        self.layer = layer
        self.provenance = dict(provenance)
        self._index_of = {img: i for i, img in enumerate(self.image_ids)}

    @property
    def num_images(self) -> int:
        return len(self.image_ids)

    @property
    def num_maps(self) -> int:
        return self.values.shape[1]

    def record(self, image_id: int, map_index: int) -> ActivationRecord:
        i = self._index_of[image_id]
        return ActivationRecord(
            image_id=image_id,
            map_index=map_index,
            value=float(self.values[i, map_index]),
            row=int(self.rows[i, map_index]),
            col=int(self.cols[i, map_index]),
        )

    # ------------------------------------------------------- persistence

    def save(self, path) -> None:
        lines = [self._header_line(), "image_id,map,value,row,col"]
        for i, img in enumerate(self.image_ids):
            for j in range(self.num_maps):
                lines.append(
                    f"{img},{j},{repr(float(self.values[i, j]))},"
                    f"{int(self.rows[i, j])},{int(self.cols[i, j])}"
                )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def _header_line(self) -> str:
        fields = " ".join(f"{k}={v}" for k, v in sorted(self.provenance.items()))
        return f"# auprobe-activation-db v=1 layer={self.layer} {fields}"

    @classmethod
    def load(cls, path, expect_checkpoint: str | None = None,
             expect_manifest: str | None = None) -> "ActivationDB":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"activation db not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# auprobe-activation-db"):
            raise DataError(f"{path}: not an activation db")
        tokens = lines[0].split()[2:]
        meta = dict(t.split("=", 1) for t in tokens if "=" in t)
        layer = int(meta.pop("layer", "0"))
        meta.pop("v", None)
        if expect_checkpoint is not None and meta.get("checkpoint") != expect_checkpoint:
            raise DataError(f"{path}: produced by a different checkpoint")
        if expect_manifest is not None and meta.get("manifest") != expect_manifest:
            raise DataError(f"{path}: produced by a different manifest")
        if len(lines) < 2 or lines[1] != "image_id,map,value,row,col":
            raise DataError(f"{path}: missing column header")
        by_image: dict[int, dict[int, tuple[float, int, int]]] = {}
        for ln, line in enumerate(lines[2:], start=3):
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataError(f"{path} line {ln}: expected 5 fields")
            img, j = int(parts[0]), int(parts[1])
            by_image.setdefault(img, {})[j] = (float(parts[2]), int(parts[3]), int(parts[4]))
        if not by_image:
            raise DataError(f"{path}: empty activation db")
        image_ids = sorted(by_image)
        maps = sorted(by_image[image_ids[0]])
        num_maps = len(maps)
        if maps != list(range(num_maps)):
            raise DataError(f"{path}: map indices are not dense")
        values = np.zeros((len(image_ids), num_maps))
        rows = np.zeros((len(image_ids), num_maps), dtype=np.int32)
        cols = np.zeros((len(image_ids), num_maps), dtype=np.int32)
        for i, img in enumerate(image_ids):
            if sorted(by_image[img]) != maps:
                raise DataError(f"{path}: image {img} has a different map set")
            for j in maps:
                values[i, j], rows[i, j], cols[i, j] = by_image[img][j]
        return cls(image_ids, values, rows, cols, layer, meta)


def harvest(net: Network, manifest: DatasetManifest, layer: int | None = None,
            threads: int = 1) -> ActivationDB:
    """One record per (image, map) under the deterministic eval transform."""
    if len(manifest) == 0:
        raise DataError("cannot harvest an empty manifest")
    if layer is None:
        layer = len(net.convs)
    if not 1 <= layer <= len(net.convs):
        raise DataError(f"layer {layer} outside 1..{len(net.convs)}")
    size = net.config.input_size
    dtype = net.config.np_dtype
    num_maps = net.config.conv_channels[layer - 1]

    def one(i: int):
        img = data_mod.load_image(manifest, i)
        x = data_mod.eval_transform(img, size, dtype=dtype)
        fmap = net.stage_outputs(x)[layer - 1]
        flat = fmap.reshape(num_maps, -1)
        arg = flat.argmax(axis=1)  # first max in row-major order on ties
        vals = flat[np.arange(num_maps), arg]
        r, c = np.unravel_index(arg, fmap.shape[1:])
        return vals.astype(np.float64), r.astype(np.int32), c.astype(np.int32)

    n = len(manifest)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    values = np.stack([r[0] for r in results])
    rows = np.stack([r[1] for r in results])
    cols = np.stack([r[2] for r in results])
    provenance = {
        "checkpoint": model_mod.checkpoint_hash(net),
        "manifest": manifest.content_hash(),
        "input_size": str(size),
        "conv_channels": ";".join(str(c) for c in net.config.conv_channels),
        "kernel_size": str(net.config.kernel_size),
    }
    return ActivationDB(list(range(n)), values, rows, cols, layer, provenance)


def top_n(db: ActivationDB, map_index: int, subset, n: int) -> list[ActivationRecord]:
    """The n largest peak activations of one map over an image subset.

    Sorted by value descending; equal values order by smaller image id.
    Returns fewer than n records when the subset is smaller than n.
    """
    ids = sorted(set(int(i) for i in subset))
    if not ids:
        raise DataError("top_n needs a nonempty image subset")
    if not 0 <= map_index < db.num_maps:
        raise DataError(f"map {map_index} outside 0..{db.num_maps - 1}")
    missing = [i for i in ids if i not in db._index_of]
    if missing:
        raise DataError(f"image ids not in activation db: {missing[:5]}")
    records = [db.record(i, map_index) for i in ids]
    records.sort(key=lambda r: (-r.value, r.image_id))
    return records[: min(n, len(records))]


def partition_by_au(manifest: DatasetManifest, au_id: int) -> tuple[set[int], set[int]]:
    """Image ids (manifest row indices) with and without one action unit."""
    with_au = {i for i, row in enumerate(manifest.rows) if au_id in row.au_set}
    without = set(range(len(manifest))) - with_au
    if not with_au:
        raise DataError(f"action unit {au_id} absent from the entire dataset")
    return with_au, without
