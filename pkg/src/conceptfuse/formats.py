"""On-disk formats: adapter and model binaries, dataset directories, region
masks, latent grids and evaluation CSVs.

Binary files are little-endian. Every float is stored as a 64-bit IEEE
double so round trips are bit-exact. Writes go to a temporary file in the
target directory and are renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .adapter import ConceptAdapter, DecomposedEmbedding, LoraLayer
from .errors import (
    BadMagic,
    FingerprintMismatch,
    MissingManifest,
    ParseError,
    ShapeInconsistent,
    TruncatedFile,
    VersionMismatch,
)
from .toy_diffusion import ModelConfig, ModelWeights
from .tuning import ConceptDataset

ADAPTER_MAGIC = b"EDLR"
MODEL_MAGIC = b"EDLM"
FORMAT_VERSION = 1
VALUE_LIMIT = 10.0


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def name(self, s: str):
        raw = s.encode("utf-8")
        self.pack("H", len(raw))
        self.buf.write(raw)

    def array(self, a: np.ndarray):
        self.buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def matrix(self, a: np.ndarray):
        self.pack("II", *a.shape)
        self.array(a)

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.pack("I", len(raw))
        self.buf.write(raw)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"{self.path}: file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("H")
        return self.take(n).decode("utf-8")

    def array(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def matrix(self) -> np.ndarray:
        rows, cols = self.unpack("II")
        return self.array(rows, cols)

    def text(self) -> str:
        (n,) = self.unpack("I")
        return self.take(n).decode("utf-8")


def _check_header(r: _Reader, magic: bytes):
    head = r.data[:4]
    if head != magic:
        raise BadMagic(f"{r.path}: expected magic {magic!r}, found {head!r}")
    r.take(4)
    (version,) = r.unpack("H")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{r.path}: format version {version}, this build reads {FORMAT_VERSION}")


def _write_embedding(w: _Writer, emb: DecomposedEmbedding):
    w.name(emb.concept_name)
    w.pack("II", *emb.v_rand.shape)
    w.array(emb.v_rand)
    w.array(emb.v_class)


def _read_embedding(r: _Reader) -> DecomposedEmbedding:
    name = r.name()
    layers, dim = r.unpack("II")
    return DecomposedEmbedding(name, r.array(layers, dim), r.array(layers, dim))


# ---------------------------------------------------------------------------
# adapters


def adapter_to_bytes(adapter: ConceptAdapter) -> bytes:
    w = _Writer()
    w.buf.write(ADAPTER_MAGIC)
    w.pack("HQ", FORMAT_VERSION, adapter.base_fingerprint)
    w.pack("I", len(adapter.lora_layers))
    for name, layer in adapter.lora_layers.items():
        d, k = layer.shape
        w.name(name)
        w.pack("IIId", d, layer.rank, k, layer.scale)
        w.array(layer.B)
        w.array(layer.A)
    _write_embedding(w, adapter.embedding)
    w.text(json.dumps(adapter.metadata, sort_keys=True))
    return w.getvalue()


def adapter_from_bytes(data: bytes, path="<bytes>", expected_fingerprint: int | None = None) -> ConceptAdapter:
    r = _Reader(data, path)
    _check_header(r, ADAPTER_MAGIC)
    (fingerprint,) = r.unpack("Q")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatch(
            f"{path}: adapter targets base {fingerprint:016x}, expected {expected_fingerprint:016x}"
        )
    (count,) = r.unpack("I")
    layers = {}
    for _ in range(count):
        name = r.name()
        d, rank, k, scale = r.unpack("IIId")
        B = r.array(d, rank)
        A = r.array(rank, k)
        layers[name] = LoraLayer(name, B, A, scale)
    emb = _read_embedding(r)
    try:
        meta = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"metadata block is not valid JSON: {exc}", path) from exc
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes", path)
    return ConceptAdapter(layers, emb, fingerprint, meta)


def save_adapter(adapter: ConceptAdapter, path) -> None:
    atomic_write(path, adapter_to_bytes(adapter))


def load_adapter(path, base: ModelWeights | None = None) -> ConceptAdapter:
    """Read an adapter; with ``base`` given, its fingerprint must match."""
    data = Path(path).read_bytes()
    expected = base.fingerprint() if base is not None else None
    return adapter_from_bytes(data, path, expected)


# ---------------------------------------------------------------------------
# models


def model_to_bytes(model: ModelWeights) -> bytes:
    w = _Writer()
    w.buf.write(MODEL_MAGIC)
    w.pack("H", FORMAT_VERSION)
    w.text(json.dumps(model.config.to_dict(), sort_keys=True))
    w.pack("I", len(model.layers))
    for name, arr in model.layers.items():
        w.name(name)
        w.matrix(arr)
    w.pack("I", len(model.vocab))
    for tok, vec in model.vocab.items():
        w.name(tok)
        w.pack("I", vec.shape[0])
        w.array(vec)
    w.pack("I", len(model.concepts))
    for emb in model.concepts.values():
        _write_embedding(w, emb)
    return w.getvalue()


def model_from_bytes(data: bytes, path="<bytes>") -> ModelWeights:
    r = _Reader(data, path)
    _check_header(r, MODEL_MAGIC)
    try:
        cfg = ModelConfig(**json.loads(r.text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"bad model config block: {exc}", path) from exc
    (count,) = r.unpack("I")
    layers = {}
    for _ in range(count):
        name = r.name()
        layers[name] = r.matrix()
    (count,) = r.unpack("I")
    vocab = {}
    for _ in range(count):
        tok = r.name()
        (dim,) = r.unpack("I")
        vocab[tok] = r.array(dim)
    (count,) = r.unpack("I")
    concepts = {}
    for _ in range(count):
        emb = _read_embedding(r)
        concepts[emb.concept_name] = emb
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes", path)
    return ModelWeights(layers, cfg, vocab, concepts)


def save_model(model: ModelWeights, path) -> None:
    atomic_write(path, model_to_bytes(model))


def load_model(path) -> ModelWeights:
    return model_from_bytes(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# grids and datasets


def parse_grid(text: str, path="<grid>") -> np.ndarray:
    """Comma-separated rows, one per line, into a ``(rows, cols, 1)`` latent."""
    rows = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        row = []
        for j, cell in enumerate(line.split(","), start=1):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell.strip()!r}", path, i, j) from None
            if not np.isfinite(v) or abs(v) > VALUE_LIMIT:
                raise ParseError(f"value {v} outside [-{VALUE_LIMIT:g}, {VALUE_LIMIT:g}]", path, i, j)
            row.append(v)
        rows.append(row)
    if not rows:
        raise ParseError("empty grid", path)
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ShapeInconsistent(f"{path}: rows have differing lengths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)[:, :, None]


def format_grid(latent: np.ndarray) -> str:
    z = np.asarray(latent, dtype=np.float64)
    z = z.reshape(z.shape[0], -1)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in z)


def save_grid(latent: np.ndarray, path) -> None:
    atomic_write(path, format_grid(latent))


def load_grid(path) -> np.ndarray:
    return parse_grid(Path(path).read_text(), path)


MANIFEST = "manifest.json"


def load_dataset(directory) -> ConceptDataset:
    """Read a concept dataset directory.

    ``manifest.json`` holds ``concept`` and ``caption`` (and optionally
    ``class`` and an explicit ``images`` list); every other ``*.csv`` file is
    one image grid.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise MissingManifest(f"{directory}: no {MANIFEST}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", manifest_path) from exc
    for key in ("concept", "caption"):
        if key not in manifest:
            raise ParseError(f"missing field {key!r}", manifest_path)
    names = manifest.get("images") or sorted(p.name for p in directory.glob("*.csv"))
    if not names:
        raise ShapeInconsistent(f"{directory}: no image grids")
    images = []
    for name in names:
        grid = load_grid(directory / name)
        if images and grid.shape != images[0].shape:
            raise ShapeInconsistent(
                f"{directory / name}: grid is {grid.shape[0]}x{grid.shape[1]}, "
                f"expected {images[0].shape[0]}x{images[0].shape[1]}"
            )
        images.append(grid)
    return ConceptDataset(images, manifest["caption"].split(), manifest["concept"], manifest.get("class"))


def save_dataset(data: ConceptDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(data.images):
        name = f"img{i:03d}.csv"
        save_grid(img, directory / name)
        names.append(name)
    manifest = {"concept": data.concept_name, "caption": " ".join(data.caption_template), "images": names}
    if data.class_token is not None:
        manifest["class"] = data.class_token
    atomic_write(directory / MANIFEST, json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# region masks


def encode_mask(mask: np.ndarray) -> str:
    """Header ``h w`` then alternating run lengths, starting with a run of zeros."""
    m = np.asarray(mask).astype(bool)
    flat = m.reshape(-1)
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return f"{m.shape[0]} {m.shape[1]}\n{' '.join(map(str, runs))}\n"


def decode_mask(text: str, path="<mask>") -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty mask file", path)
    try:
        h, w = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("header must be 'h w'", path, 1) from None
    runs = []
    for i, line in enumerate(lines[1:], start=2):
        for j, tok in enumerate(line.split(), start=1):
            try:
                n = int(tok)
            except ValueError:
                raise ParseError(f"bad run length {tok!r}", path, i, j) from None
            if n < 0:
                raise ParseError(f"negative run length {n}", path, i, j)
            runs.append(n)
    if sum(runs) != h * w:
        raise ShapeInconsistent(f"{path}: runs cover {sum(runs)} cells, header says {h}x{w}={h * w}")
    flat = np.concatenate([np.full(n, i % 2, dtype=np.int64) for i, n in enumerate(runs)] or [np.zeros(0, int)])
    return flat.reshape(h, w)


def save_mask(mask: np.ndarray, path) -> None:
    atomic_write(path, encode_mask(mask))


def load_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_text(), path)


# ---------------------------------------------------------------------------
# evaluation reports

CSV_HEADER = ["concept", "alignment_single", "alignment_fused", "change"]


def report_to_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for name, row in report.per_concept.items():
        writer.writerow([name, repr(row.alignment_single), repr(row.alignment_fused), repr(row.change)])
    return buf.getvalue()


def report_from_csv(text: str, method: str = ""):
    from .evaluation import ConceptAlignment, EvalReport

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {header}")
    rows = {}
    for i, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 4:
            raise ParseError(f"expected 4 fields, got {len(rec)}", row=i)
        try:
            single, fused, change = (float(v) for v in rec[1:])
        except ValueError as exc:
            raise ParseError(str(exc), row=i) from None
        rows[rec[0]] = ConceptAlignment(single, fused, change)
    return EvalReport(rows, method)
