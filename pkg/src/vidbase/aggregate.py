"""Fixed-length video descriptors from frame features: mean, standard
deviation, and per-dimension Top-K ordinal statistics."""

import struct
from dataclasses import dataclass

import numpy as np

from .preprocess import fit_whitening

AGG_MAGIC = b"YT8MAGG0"

COMPONENT_ORDER = ("mean", "std", "topk")
DEFAULT_TOP_K = 5


@dataclass
class VideoDescriptor:
    values: np.ndarray
    layout: tuple  # ((name, offset, length), ...)

    def component(self, name):
        for comp, off, length in self.layout:
            if comp == name:
                return self.values[off:off + length]
        raise KeyError(name)


def aggregate_mean_std(frames):
    """Per-dimension mean and population (1/F) standard deviation."""
    x = np.asarray(frames, dtype=np.float64)
    mean = x.mean(axis=0)
    std = np.sqrt(np.mean((x - mean) ** 2, axis=0))
    return mean, std


def aggregate_topk(frames, k):
    """K largest values per dimension, descending; when F < K the missing
    slots are padded with that dimension's minimum observed value."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(frames, dtype=np.float64)
    n_frames, dim = x.shape
    ordered = -np.sort(-x, axis=0)
    if n_frames >= k:
        top = ordered[:k]
    else:
        pad = np.repeat(ordered[-1:], k - n_frames, axis=0)
        top = np.concatenate([ordered, pad], axis=0)
    return top.T.reshape(k * dim)  # dim-major: K values per dimension


def build_descriptor(frames, k=DEFAULT_TOP_K, components=COMPONENT_ORDER):
    """Concatenate the enabled components in fixed [mean; std; topk] order."""
    components = tuple(components)
    if not components:
        raise ValueError("at least one component required")
    unknown = set(components) - set(COMPONENT_ORDER)
    if unknown:
        raise ValueError("unknown components: %s" % sorted(unknown))

    mean, std = aggregate_mean_std(frames)
    parts, layout, offset = [], [], 0
    for name in COMPONENT_ORDER:
        if name not in components:
            continue
        if name == "mean":
            block = mean
        elif name == "std":
            block = std
        else:
            block = aggregate_topk(frames, k)
        parts.append(block)
        layout.append((name, offset, len(block)))
        offset += len(block)
    return VideoDescriptor(values=np.concatenate(parts), layout=tuple(layout))


def fit_global_normalizer(descriptors, d_out=None):
    """Whitening transform over descriptor space (center -> whiten; apply
    with apply_whitening(..., l2_normalize=True))."""
    sample = np.asarray([d.values for d in descriptors], dtype=np.float64)
    if d_out is None:
        d_out = sample.shape[1]
    return fit_whitening(sample, d_out)


def write_descriptors(path, video_ids, matrix, layout):
    """Descriptor file: magic, dim, layout table, then per-video id + values."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(AGG_MAGIC)
        fh.write(struct.pack("<IQH", matrix.shape[1], matrix.shape[0], len(layout)))
        for name, off, length in layout:
            tag = name.encode("utf-8")
            fh.write(struct.pack("<H", len(tag)))
            fh.write(tag)
            fh.write(struct.pack("<II", off, length))
        for vid, row in zip(video_ids, matrix):
            v = vid.encode("utf-8")
            fh.write(struct.pack("<H", len(v)))
            fh.write(v)
            fh.write(np.asarray(row, dtype="<f4").tobytes())


def read_descriptors(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != AGG_MAGIC:
        raise ValueError("bad magic in %s" % path)
    dim, count, n_layout = struct.unpack_from("<IQH", data, 8)
    off = 8 + 14
    layout = []
    for _ in range(n_layout):
        (tag_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + tag_len].decode("utf-8")
        off += tag_len
        comp_off, comp_len = struct.unpack_from("<II", data, off)
        off += 8
        layout.append((name, comp_off, comp_len))
    video_ids = []
    rows = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        (vid_len,) = struct.unpack_from("<H", data, off)
        off += 2
        video_ids.append(data[off:off + vid_len].decode("utf-8"))
        off += vid_len
        rows[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
        off += 4 * dim
    return video_ids, rows, tuple(layout)
