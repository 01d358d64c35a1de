"""Chart tables, the binary feature-file format, and the toy chart encoder.

The model consumes a chart as a feature sequence: an [L×d] real matrix whose
rows are token features ordered the way a reader scans the chart, top-left to
bottom-right.  Two producers exist:

- :func:`load_features` reads a precomputed matrix from a feature file, so
  features produced by an external vision encoder can be evaluated here;
- :class:`ChartEncoder` builds the matrix from a ground-truth chart table by
  linearizing it into tokens and running a small trainable encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteValue, ParamStore, ShapeMismatch, Tensor
from .decoding import Vocab
from .layers import TokenEncoder


class ChartError(Exception):
    pass


class FormatError(ChartError):
    pass


class EmptyChart(ChartError):
    pass


@dataclass
class ChartSpec:
    """Ground-truth bar chart: named series over named categories."""

    title: str
    x_label: str
    y_label: str
    series_names: list[str]
    category_names: list[str]
    values: np.ndarray  # [series x categories]
    legend_pos: str = "bottom right"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.series_names), len(self.category_names)):
            raise ShapeMismatch(
                f"values shape {self.values.shape} vs {len(self.series_names)} series "
                f"x {len(self.category_names)} categories"
            )
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteValue("chart values contain NaN or Inf")

    def to_record(self) -> dict:
        return {
            "title": self.title,
            "x_label": self.x_label,
            "y_label": self.y_label,
            "series_names": list(self.series_names),
            "category_names": list(self.category_names),
            "values": self.values.tolist(),
            "legend_pos": self.legend_pos,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ChartSpec":
        return cls(
            title=rec["title"],
            x_label=rec["x_label"],
            y_label=rec["y_label"],
            series_names=list(rec["series_names"]),
            category_names=list(rec["category_names"]),
            values=np.asarray(rec["values"], dtype=np.float64),
            legend_pos=rec.get("legend_pos", "bottom right"),
        )


# ------------------------------------------------------------- feature files

_MAGIC = b"CVFS"
_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_TAGS = {"<f4": 0, "<f8": 1}


def save_features(path: str, features: np.ndarray, dtype: str = "<f8") -> None:
    """Write an [L×d] matrix: magic `CVFS`, version u16, L u32, d u32,
    dtype tag u8 (0 = f32, 1 = f64), then the row-major little-endian payload."""
    if dtype not in _TAGS:
        raise FormatError(f"unsupported dtype {dtype!r}")
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise FormatError(f"features must be a non-empty 2D matrix, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HIIB", _VERSION, arr.shape[0], arr.shape[1], _TAGS[dtype]))
        f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_features(path: str) -> np.ndarray:
    """Read a feature file back to an f64 [L×d] matrix, validating the header,
    payload size, and finiteness."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 15:
        raise FormatError(f"{path}: truncated header")
    version, rows, cols, tag = struct.unpack("<HIIB", raw[4:15])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: empty matrix {rows}x{cols}")
    dtype = _DTYPES[tag]
    nbytes = rows * cols * np.dtype(dtype).itemsize
    payload = raw[15:]
    if len(payload) != nbytes:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header promises {nbytes}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{path}: non-finite feature value")
    return arr


# ------------------------------------------------------------- linearization


def spec_tokens(spec: ChartSpec) -> list[str]:
    """Flatten a chart into a token stream read top-left to bottom-right:
    title words, the two axis labels, the legend position, then one
    (series, category, value) cell triple per bar, row-major by series.
    Values are emitted as literals so the tokenizer splits them digit-wise."""
    if not spec.series_names or not spec.category_names:
        raise EmptyChart("chart has no series or no categories")
    tokens = list(spec.title.split())
    tokens += spec.x_label.split()
    tokens += spec.y_label.split()
    tokens += spec.legend_pos.split()
    for s, series in enumerate(spec.series_names):
        for c, cat in enumerate(spec.category_names):
            tokens += series.split()
            tokens += cat.split()
            tokens.append(format_number(spec.values[s, c]))
    return tokens


def format_number(x: float) -> str:
    """Canonical numeric rendering: six significant digits, no trailing
    zeros, integers without a decimal point."""
    return "%.6g" % float(x)


class ChartEncoder:
    """Trainable substitute for a vision encoder: tokenize the chart table,
    embed with positions, one self-attention encoder layer."""

    def __init__(self, vocab: Vocab, d: int, heads: int, store: ParamStore,
                 max_len: int = 512, prefix: str = "enc"):
        self.vocab = vocab
        self.d = d
        self.encoder = TokenEncoder(store, prefix, len(vocab), d, heads, max_len, layers=1)

    def token_ids(self, spec: ChartSpec) -> list[int]:
        ids: list[int] = []
        for tok in spec_tokens(spec):
            ids.extend(self.vocab.tokenize(tok))
        return ids

    def encode(self, spec: ChartSpec) -> Tensor:
        ids = self.token_ids(spec)
        if len(ids) > self.encoder.max_len:
            raise ShapeMismatch(
                f"chart linearizes to {len(ids)} tokens, encoder capacity {self.encoder.max_len}"
            )
        return self.encoder(ids)
