"""Per-node labeled symbol datasets: chirp symbols through the channel.

Each record is one received, downsampled symbol with its transmitted bit
and the impairment draw that produced it.  Impairments are drawn i.i.d.
per symbol so the augmentation ranges are densely covered.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .channel import (ChannelRealization, ImpairmentSpec, RayleighModelConfig,
                      apply_channel, identity_channel)
from .chirp import ChirpParams, downsample, generate_chirp
from .errors import ConfigurationError, ParseError
from .receiver import LabeledBatch

DATASET_MAGIC = b"UWDS"
DATASET_VERSION = 1

CHANNEL_TAGS = ("identity", "rayleigh")


def _check_range(name, rng_pair):
    lo, hi = rng_pair
    if hi < lo:
        raise ConfigurationError(f"{name} range ({lo}, {hi}) is not well ordered")


@dataclass(frozen=True)
class DatasetSpec:
    """Synthesis recipe for one node's local dataset."""

    n_symbols: int = 1250
    split: float = 0.8               # train fraction; 1250 -> 1000 + 250
    chirp: ChirpParams = field(default_factory=ChirpParams)
    snr_db_range: tuple = (np.inf, np.inf)
    sto_range: tuple = (0.0, 0.0)    # samples at the full rate
    speed_range: tuple = (0.0, 0.0)  # m/s
    channel_tag: str = "identity"
    rayleigh: RayleighModelConfig = None
    seed: int = 0

    def __post_init__(self):
        if self.n_symbols < 2:
            raise ConfigurationError("need at least 2 symbols to split")
        _check_range("snr", self.snr_db_range)
        _check_range("sto", self.sto_range)
        _check_range("speed", self.speed_range)
        n_train = int(round(self.n_symbols * self.split))
        if not 0 < n_train < self.n_symbols:
            raise ConfigurationError(
                f"split={self.split} leaves an empty train or test part")
        if self.channel_tag not in CHANNEL_TAGS:
            raise ConfigurationError(f"unknown channel tag {self.channel_tag!r}")
        if self.channel_tag == "rayleigh" and self.rayleigh is None:
            object.__setattr__(self, "rayleigh", RayleighModelConfig(
                Ts=1.0 / self.chirp.bandwidth, fd=5.0))

    @property
    def n_train(self) -> int:
        return int(round(self.n_symbols * self.split))

    @property
    def n_test(self) -> int:
        return self.n_symbols - self.n_train


@dataclass(frozen=True)
class SymbolSet:
    """A labeled batch plus the per-record impairment metadata."""

    batch: LabeledBatch
    snr_db: np.ndarray
    sto_samples: np.ndarray
    rel_speed: np.ndarray
    channel_tag: np.ndarray  # tag-table indices
    tag_table: tuple

    def __len__(self) -> int:
        return len(self.batch)


def _draw(rng, lo, hi):
    if lo == hi:
        return lo
    return rng.uniform(lo, hi)


def synthesize_symbol(bit: int, spec: DatasetSpec, snr_db: float, sto: float,
                      speed: float, channel: ChannelRealization,
                      noise_seed: int) -> np.ndarray:
    """One received, downsampled symbol as a float64 vector of length N1."""
    tx = generate_chirp(spec.chirp, "down" if bit else "up")
    imp = ImpairmentSpec(snr_db=snr_db, sto_samples=sto, rel_speed=speed)
    rx = apply_channel(tx, channel, imp, seed=noise_seed)
    return downsample(rx, spec.chirp.lam).samples


def build_node_dataset(spec: DatasetSpec):
    """Deterministically synthesize the node dataset; returns (train, test)
    SymbolSet pairs with disjoint records."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    n = spec.n_symbols
    n1 = spec.chirp.n1
    samples = np.empty((n, n1))
    labels = np.empty(n)
    snr = np.empty(n, dtype=np.float32)
    sto = np.empty(n, dtype=np.float32)
    speed = np.empty(n, dtype=np.float32)
    if spec.channel_tag == "identity":
        base_channel = identity_channel(Ts=1.0 / spec.chirp.fs)
    symbol_dur = spec.chirp.T
    for i in range(n):
        bit = int(rng.random() < 0.5)
        snr_i = _draw(rng, *spec.snr_db_range)
        sto_i = _draw(rng, *spec.sto_range)
        speed_i = _draw(rng, *spec.speed_range)
        noise_seed = int(rng.integers(0, 2 ** 63 - 1))
        if spec.channel_tag == "rayleigh":
            cir_seed = int(rng.integers(0, 2 ** 63 - 1))
            channel = _rayleigh_for_symbol(spec, symbol_dur, cir_seed)
        else:
            channel = base_channel
        try:
            samples[i] = synthesize_symbol(bit, spec, snr_i, sto_i, speed_i,
                                           channel, noise_seed)
        except Exception as exc:
            raise type(exc)(f"record {i}: {exc}") from exc
        labels[i] = bit
        snr[i], sto[i], speed[i] = snr_i, sto_i, speed_i
    # samples are stored as f32 in the dataset container; quantize here so
    # save/load round-trips are bit-identical
    samples = samples.astype(np.float32).astype(np.float64)
    tag_idx = np.full(n, CHANNEL_TAGS.index(spec.channel_tag), dtype=np.uint16)
    tag_table = CHANNEL_TAGS

    def subset(sl):
        return SymbolSet(LabeledBatch(samples[sl], labels[sl]),
                         snr[sl], sto[sl], speed[sl], tag_idx[sl], tag_table)

    k = spec.n_train
    return subset(slice(0, k)), subset(slice(k, n))


def _rayleigh_for_symbol(spec: DatasetSpec, duration: float, seed: int):
    from .channel import rayleigh_cir
    cfg = spec.rayleigh
    # tap spacing snapped to an integer number of samples at the chirp rate
    step = max(1, int(round(cfg.Ts * spec.chirp.fs)))
    cfg = replace(cfg, Ts=step / spec.chirp.fs)
    return rayleigh_cir(cfg, duration, spec.chirp.fs, seed)


@dataclass(frozen=True)
class DomainShift:
    """Replacement impairment ranges for a target (emergency) task."""

    snr_db_range: tuple = None
    sto_range: tuple = None
    speed_range: tuple = None
    require_disjoint: bool = True


def _disjoint(a, b) -> bool:
    return a[1] < b[0] or b[1] < a[0]


def shift_domain(spec: DatasetSpec, delta: DomainShift) -> DatasetSpec:
    """Spec for a shifted task whose ranges lie outside the source ranges."""
    changes = {}
    for name in ("snr_db_range", "sto_range", "speed_range"):
        new = getattr(delta, name)
        if new is None:
            continue
        _check_range(name, new)
        if delta.require_disjoint and not _disjoint(getattr(spec, name), new):
            raise ConfigurationError(
                f"{name} {new} overlaps the source range {getattr(spec, name)}")
        changes[name] = tuple(new)
    return replace(spec, **changes) if changes else spec


def _spec_to_json(spec: DatasetSpec, n_train: int) -> bytes:
    d = asdict(spec)
    d["chirp"] = asdict(spec.chirp)
    d["rayleigh"] = asdict(spec.rayleigh) if spec.rayleigh else None
    d["snr_db_range"] = [_inf_str(v) for v in spec.snr_db_range]
    d["n_train_records"] = n_train
    return json.dumps(d, sort_keys=True).encode("utf-8")


def _inf_str(v):
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def _spec_from_json(raw: bytes):
    d = json.loads(raw.decode("utf-8"))
    n_train = d.pop("n_train_records")
    d["chirp"] = ChirpParams(**d["chirp"])
    if d["rayleigh"] is not None:
        d["rayleigh"] = RayleighModelConfig(**d["rayleigh"])
    d["snr_db_range"] = tuple(float(v) for v in d["snr_db_range"])
    for key in ("sto_range", "speed_range"):
        d[key] = tuple(d[key])
    return DatasetSpec(**d), n_train


def save_dataset(path, train: SymbolSet, test: SymbolSet,
                 spec: DatasetSpec) -> None:
    """Binary container: header, records (f32 samples, u8 label, f32 snr,
    f32 sto, f32 speed, u16 tag id), tag table, then a JSON spec block."""
    n1 = train.batch.inputs.shape[1]
    sets = (train, test)
    count = sum(len(s) for s in sets)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHIQH", DATASET_MAGIC, DATASET_VERSION,
                            n1, count, spec.chirp.lam))
        for s in sets:
            for i in range(len(s)):
                f.write(s.batch.inputs[i].astype("<f4").tobytes())
                f.write(struct.pack("<BfffH", int(s.batch.labels[i]),
                                    s.snr_db[i], s.sto_samples[i],
                                    s.rel_speed[i], s.channel_tag[i]))
        f.write(struct.pack("<H", len(train.tag_table)))
        for tag in train.tag_table:
            raw = tag.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        spec_raw = _spec_to_json(spec, len(train))
        f.write(struct.pack("<I", len(spec_raw)))
        f.write(spec_raw)


def dataset_file_size(n_records: int, n1: int, tag_table, spec: DatasetSpec,
                      n_train: int) -> int:
    """Exact file size implied by the container layout."""
    header = struct.calcsize("<4sHIQH")
    record = 4 * n1 + struct.calcsize("<BfffH")
    tags = 2 + sum(2 + len(t.encode("utf-8")) for t in tag_table)
    spec_block = 4 + len(_spec_to_json(spec, n_train))
    return header + n_records * record + tags + spec_block


def load_dataset(path):
    """Returns (train, test, spec); inverse of save_dataset."""
    with open(path, "rb") as f:
        raw = f.read()
    head_fmt = "<4sHIQH"
    head_len = struct.calcsize(head_fmt)
    if len(raw) < head_len:
        raise ParseError("truncated dataset header", offset=len(raw))
    magic, version, n1, count, lam = struct.unpack_from(head_fmt, raw)
    if magic != DATASET_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != DATASET_VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    off = head_len
    record_tail = struct.calcsize("<BfffH")
    samples = np.empty((count, n1))
    labels = np.empty(count)
    snr = np.empty(count, dtype=np.float32)
    sto = np.empty(count, dtype=np.float32)
    speed = np.empty(count, dtype=np.float32)
    tag_idx = np.empty(count, dtype=np.uint16)
    for i in range(count):
        if len(raw) < off + 4 * n1 + record_tail:
            raise ParseError(f"truncated record {i}", offset=off)
        samples[i] = np.frombuffer(raw, dtype="<f4", count=n1, offset=off)
        off += 4 * n1
        label, s_db, s_sto, s_sp, tag = struct.unpack_from("<BfffH", raw, off)
        off += record_tail
        labels[i], snr[i], sto[i], speed[i], tag_idx[i] = label, s_db, s_sto, s_sp, tag
    try:
        (n_tags,) = struct.unpack_from("<H", raw, off)
        off += 2
        tags = []
        for _ in range(n_tags):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            tags.append(raw[off: off + ln].decode("utf-8"))
            off += ln
        (spec_len,) = struct.unpack_from("<I", raw, off)
        off += 4
    except struct.error as exc:
        raise ParseError(f"truncated trailer: {exc}", offset=off) from None
    if len(raw) < off + spec_len:
        raise ParseError("truncated spec block", offset=len(raw))
    spec, n_train = _spec_from_json(raw[off: off + spec_len])
    tag_table = tuple(tags)

    def subset(sl):
        return SymbolSet(LabeledBatch(samples[sl], labels[sl]),
                         snr[sl], sto[sl], speed[sl], tag_idx[sl], tag_table)

    return subset(slice(0, n_train)), subset(slice(n_train, count)), spec
