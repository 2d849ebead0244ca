"""Synthetic multi-domain data, file formats, and leave-one-domain-out splits.

Inputs are split into two disjoint sets of positions.  The invariant set
carries the class signal: a class prototype plus Gaussian noise, identical
in distribution for every domain.  The nuisance set carries domain
information only: each domain applies its own scale and offset pattern to
noise there, plus a domain-wide style offset.  ``shift_strength`` scales
every domain-dependent term, so ``shift_strength=0`` gives identically
distributed domains.

In image mode (``dims=(C, H, W)``) the invariant positions are the left
``W // 2`` columns and the nuisance positions the rest; in vector mode
(``dims=(D,)``) the first ``D // 2`` features are invariant.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DataError
from .rng import stream

FORMAT_VERSION = 1
CSV_MAGIC = "# ddlab-dataset"
BIN_MAGIC = b"DDLABDATA"


@dataclass(frozen=True)
class DataSpec:
    n_domains: int = 4
    num_classes: int = 4
    dims: tuple[int, ...] = (1, 12, 12)
    samples_per_domain_per_class: int = 200
    shift_strength: float = 2.0
    noise: float = 1.0
    class_sep: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_domains < 3:
            raise ConfigError("n_domains must be >= 3 (two sources and one target)")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.dims) not in (1, 3) or min(self.dims) < 1:
            raise ConfigError(f"dims must be (C,H,W) or (D,), got {self.dims}")
        if len(self.dims) == 3 and self.dims[2] < 2 or len(self.dims) == 1 and self.dims[0] < 2:
            raise ConfigError("need at least two positions to split invariant and nuisance parts")
        if self.samples_per_domain_per_class < 1:
            raise ConfigError("samples_per_domain_per_class must be >= 1")
        if self.shift_strength < 0 or self.noise < 0:
            raise ConfigError("shift_strength and noise must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "DataSpec":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown data spec key(s): {', '.join(unknown)}")
        kw = {}
        for key, value in raw.items():
            try:
                if key == "dims":
                    if isinstance(value, str):
                        value = [int(v) for v in value.lower().replace("x", ",").split(",") if v.strip()]
                    kw[key] = tuple(int(v) for v in value)
                elif key in ("shift_strength", "noise", "class_sep"):
                    kw[key] = float(value)
                else:
                    kw[key] = int(value)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for data spec key {key!r}: {value!r}") from None
        return cls(**kw)


@dataclass
class DomainDataset:
    X: np.ndarray
    y: np.ndarray
    domains: np.ndarray
    domain_names: list[str]
    num_classes: int
    params: dict = field(default_factory=dict)
    ids: np.ndarray | None = None
    role: str = "all"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.y), dtype=np.int64)
        n = len(self.y)
        if len(self.X) != n or len(self.domains) != n or len(self.ids) != n:
            raise DataError("X, y, domains, ids lengths differ")
        if n and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError("class label out of range")
        if n and (self.domains.min() < 0 or self.domains.max() >= len(self.domain_names)):
            raise DataError("domain label out of range")
        if not np.all(np.isfinite(self.X)):
            raise DataError("features must be finite")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.X.shape[1:])

    def subset(self, idx, role: str | None = None) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainDataset(self.X[idx], self.y[idx], self.domains[idx], list(self.domain_names),
                             self.num_classes, dict(self.params), self.ids[idx], role or self.role)

    def by_domain(self) -> dict[int, "DomainDataset"]:
        return {int(k): self.subset(np.flatnonzero(self.domains == k)) for k in np.unique(self.domains)}

    def domain_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            k = int(name_or_index)
            if not 0 <= k < len(self.domain_names):
                raise IndexError(f"domain index {k} out of range")
            return k
        if str(name_or_index).isdigit():
            return self.domain_index(int(name_or_index))
        try:
            return self.domain_names.index(str(name_or_index))
        except ValueError:
            raise IndexError(f"unknown domain {name_or_index!r}; known: {self.domain_names}") from None


def position_masks(dims: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks over one sample for invariant and nuisance positions."""
    inv = np.zeros(dims, dtype=bool)
    if len(dims) == 3:
        inv[:, :, : dims[2] // 2] = True
    else:
        inv[: dims[0] // 2] = True
    return inv, ~inv


def generator_params(spec: DataSpec) -> dict[str, np.ndarray]:
    """The fixed parameters behind ``generate``: prototypes and domain styles.

    ``prototypes`` is shared by all domains, which makes class-conditional
    means on invariant positions equal across domains by construction.
    """
    rng = stream(spec.seed, "data-gen")
    dims = spec.dims
    protos = rng.normal(size=(spec.num_classes,) + dims)
    protos /= np.sqrt((protos**2).mean(axis=tuple(range(1, protos.ndim)), keepdims=True))
    k = spec.n_domains
    s = spec.shift_strength
    log_scale = s * 0.35 * rng.normal(size=k)
    offsets = s * rng.normal(size=(k,) + dims)
    style = s * rng.normal(size=k)
    return {"prototypes": protos, "scale": np.exp(log_scale), "offset": offsets, "style": style}


def generate(spec: DataSpec) -> DomainDataset:
    params = generator_params(spec)
    inv, nui = position_masks(spec.dims)
    rng = stream(spec.seed, "data-sample")
    n_per = spec.samples_per_domain_per_class
    Xs, ys, ds = [], [], []
    for k in range(spec.n_domains):
        for c in range(spec.num_classes):
            noise = spec.noise * rng.normal(size=(n_per,) + spec.dims)
            x = np.where(inv, spec.class_sep * params["prototypes"][c] + noise,
                         params["scale"][k] * noise + params["offset"][k] + params["style"][k])
            Xs.append(x)
            ys.append(np.full(n_per, c))
            ds.append(np.full(n_per, k))
    provenance = {"spec": spec.to_dict(), "format_version": FORMAT_VERSION}
    return DomainDataset(np.concatenate(Xs), np.concatenate(ys), np.concatenate(ds),
                         [f"domain{k}" for k in range(spec.n_domains)], spec.num_classes, provenance)


def split_leave_one_out(ds: DomainDataset, target, val_fraction: float = 0.1, seed: int = 0) -> dict[str, DomainDataset]:
    """``{"train", "val", "target"}`` with the target domain held out entirely.

    Each source domain contributes ``floor(n_k * val_fraction)`` randomly
    chosen samples to ``val``.
    """
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    t = ds.domain_index(target)
    rng = stream(seed, "split")
    train_idx, val_idx = [], []
    for k in range(len(ds.domain_names)):
        if k == t:
            continue
        idx = np.flatnonzero(ds.domains == k)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(np.floor(len(idx) * val_fraction))
        val_idx.append(np.sort(idx[:n_val]))
        train_idx.append(np.sort(idx[n_val:]))
    return {
        "train": ds.subset(np.concatenate(train_idx), "train"),
        "val": ds.subset(np.concatenate(val_idx), "val"),
        "target": ds.subset(np.flatnonzero(ds.domains == t), "target"),
    }


# file formats ---------------------------------------------------------------


def _header(ds: DomainDataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "n_samples": len(ds),
        "dims": list(ds.dims),
        "domain_names": ds.domain_names,
        "num_classes": ds.num_classes,
        "params": ds.params,
    }


def save_csv(ds: DomainDataset, path) -> None:
    """Header comment lines, a column line, then ``domain_id,class_id,values``.

    Values use ``repr`` so every float64 round-trips exactly.
    """
    h = _header(ds)
    flat = ds.X.reshape(len(ds), -1)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{CSV_MAGIC} v{FORMAT_VERSION}\n")
        fh.write(f"# n_samples={h['n_samples']}\n")
        fh.write(f"# dims={'x'.join(map(str, h['dims']))}\n")
        fh.write(f"# domains={','.join(h['domain_names'])}\n")
        fh.write(f"# num_classes={h['num_classes']}\n")
        fh.write(f"# params={json.dumps(h['params'], sort_keys=True)}\n")
        fh.write("domain_id,class_id," + ",".join(f"f{i}" for i in range(flat.shape[1])) + "\n")
        for d, c, row in zip(ds.domains, ds.y, flat):
            fh.write(f"{d},{c}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path) -> DomainDataset:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not lines or not lines[0].startswith(CSV_MAGIC):
        raise DataError(f"{path}: missing dataset header")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition("=")
        meta[key] = value
        i += 1
    try:
        dims = tuple(int(v) for v in meta["dims"].split("x"))
        names = meta["domains"].split(",")
        num_classes = int(meta["num_classes"])
        params = json.loads(meta.get("params", "{}"))
        n = int(meta["n_samples"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad header ({exc})") from exc
    rows = lines[i + 1:]
    if len(rows) != n:
        raise DataError(f"{path}: header says {n} samples, found {len(rows)}")
    arr = np.array([[float(v) for v in r.split(",")] for r in rows]) if rows else np.zeros((0, 2 + int(np.prod(dims))))
    return DomainDataset(arr[:, 2:].reshape((n,) + dims), arr[:, 1].astype(np.int64), arr[:, 0].astype(np.int64),
                         names, num_classes, params)


def save_binary(ds: DomainDataset, path) -> None:
    hbytes = json.dumps(_header(ds), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(ds.domains.astype("<i8").tobytes())
        fh.write(ds.y.astype("<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())


def load_binary(path) -> DomainDataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not blob.startswith(BIN_MAGIC):
        raise DataError(f"{path}: not a binary dataset")
    off = len(BIN_MAGIC)
    version, hlen = struct.unpack_from("<HI", blob, off)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    off += struct.calcsize("<HI")
    h = json.loads(blob[off:off + hlen])
    off += hlen
    n, dims = h["n_samples"], tuple(h["dims"])
    size = int(np.prod(dims))
    if len(blob) != off + 16 * n + 8 * n * size:
        raise DataError(f"{path}: payload size does not match header")
    d = np.frombuffer(blob, "<i8", n, off)
    y = np.frombuffer(blob, "<i8", n, off + 8 * n)
    X = np.frombuffer(blob, "<f8", n * size, off + 16 * n).reshape((n,) + dims)
    return DomainDataset(X.copy(), y.copy(), d.copy(), h["domain_names"], h["num_classes"], h["params"])


def load(path) -> DomainDataset:
    with open(path, "rb") as fh:
        head = fh.read(len(BIN_MAGIC))
    return load_binary(path) if head == BIN_MAGIC else load_csv(path)
