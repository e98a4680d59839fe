"""L1 training of the dual-path network: loss, Adam, loop, checkpoints.

The loop is fully deterministic under a fixed seed: epoch shuffles come from
a named RNG substream, images are bilinearly resized (not randomly cropped)
to the training patch size, and the optimizer is plain bias-corrected Adam
with no schedule, decay or clipping. Checkpoints store parameters as f32 in
a tagged binary format (magic "FDVM"); loading restores them into float64.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .degrade import DatasetManifest
from .errors import ContractError, FormatError, InputError
from .imgio import read_image
from .seeding import substream
from .tensor import Graph, Tensor, absolute, backward, bilinear_resize, mean, sub

__all__ = [
    "TrainConfig", "AdamState", "Checkpoint", "l1_loss", "adam_step",
    "train_loop", "save_checkpoint", "load_checkpoint", "weights_from_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FDVM"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 100
    patch_size: int = 64
    seed: int = 0
    checkpoint_path: str = "model.ckpt"
    checkpoint_every: int = 0    # 0: only at the end

    def validate(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ContractError(f"betas must lie in [0,1), got {self.betas}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.patch_size < 8:
            raise ContractError("epochs must be >= 0 and patch_size >= 8")
        return self


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class Checkpoint:
    version: int
    config: model_mod.ModelConfig
    params: dict                 # name -> float64 ndarray
    adam: AdamState = None
    rng_state: dict = None
    epoch: int = 0


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 at exact ties."""
    return mean(absolute(sub(pred, target)))


def adam_step(params, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update over (name, Tensor) pairs, in place."""
    b1, b2 = cfg.betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _load_pair(record, patch: int):
    """Read one (degraded, clean) pair resized to patch x patch, or None."""
    try:
        x = read_image(record.degraded_path)
        y = read_image(record.clean_path)
    except InputError as e:
        log.warning("skipping pair: %s", e)
        return None
    x = bilinear_resize(Tensor(x[None]), patch, patch).data[0]
    y = bilinear_resize(Tensor(y[None]), patch, patch).data[0]
    return x, y


def train_loop(weights: model_mod.ModelWeights, manifest: DatasetManifest,
               cfg: TrainConfig):
    """Train on the manifest's train split; returns (Checkpoint, log lines).

    Per epoch: seeded shuffle, batched forward/L1/backward/Adam. The log
    holds one "epoch<TAB>mean_loss" line per epoch.
    """
    cfg.validate()
    records = manifest.split("train")
    if not records:
        raise InputError("manifest has an empty train split")

    pairs = [_load_pair(r, cfg.patch_size) for r in records]
    pairs = [p for p in pairs if p is not None]
    if not pairs:
        raise InputError("every training pair failed to decode")

    params = model_mod.named_parameters(weights)
    state = AdamState()
    shuffle_rng = substream(cfg.seed, "shuffle")
    lines = []

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < cfg.batch_size and len(idx) < 2:
                log.info("epoch %d: dropping ragged batch of %d", epoch, len(idx))
                continue
            xb = Tensor(np.stack([pairs[i][0] for i in idx]))
            yb = Tensor(np.stack([pairs[i][1] for i in idx]))
            for _, p in params:
                p.zero_grad()
            with Graph() as g:
                out = model_mod.fdvm_forward(xb, weights)
                loss = l1_loss(out, yb)
            backward(loss, g)
            adam_step(params, state, cfg)
            losses.append(loss.item())
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        lines.append(f"{epoch}\t{epoch_loss:.17g}")
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            ckpt = _make_checkpoint(weights, state, shuffle_rng, epoch + 1)
            save_checkpoint(ckpt, cfg.checkpoint_path)

    ckpt = _make_checkpoint(weights, state, shuffle_rng, cfg.epochs)
    save_checkpoint(ckpt, cfg.checkpoint_path)
    return ckpt, lines


def _make_checkpoint(weights, state, rng, epoch) -> Checkpoint:
    params = {name: t.data.copy() for name, t in model_mod.named_parameters(weights)}
    return Checkpoint(version=CHECKPOINT_VERSION, config=weights.config,
                      params=params, adam=state,
                      rng_state=rng.bit_generator.state, epoch=epoch)


# ---------------------------------------------------------------------------
# checkpoint serialization


def _pack_named_f32(out: bytearray, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    out += struct.pack("<H", len(nb))
    out += nb
    out += struct.pack("<BB", _DTYPE_F32, arr.ndim)
    for d in arr.shape:
        out += struct.pack("<I", d)
    out += arr.astype("<f4").tobytes()


def save_checkpoint(ckpt: Checkpoint, path):
    """Write the tagged binary format; atomic via temp file + rename."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", ckpt.version)
    out += struct.pack("<I", len(ckpt.params))
    for name in ckpt.params:
        _pack_named_f32(out, name, ckpt.params[name])

    conf = json.dumps({"config": ckpt.config.to_dict(), "epoch": ckpt.epoch},
                      sort_keys=True).encode("utf-8")
    out += b"CONF" + struct.pack("<I", len(conf)) + conf

    if ckpt.adam is not None:
        body = bytearray()
        body += struct.pack("<I", ckpt.adam.t)
        body += struct.pack("<I", len(ckpt.adam.m))
        for name in ckpt.adam.m:
            _pack_named_f32(body, name, ckpt.adam.m[name])
            _pack_named_f32(body, name, ckpt.adam.v[name])
        out += b"ADAM" + struct.pack("<I", len(body)) + bytes(body)

    if ckpt.rng_state is not None:
        body = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
        out += b"RNGS" + struct.pack("<I", len(body)) + body

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated", offset=self.pos)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.buf)


def _read_named_f32(r: _Reader):
    name = r.take(r.u16()).decode("utf-8")
    dtype = r.u8()
    if dtype != _DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype}", offset=r.pos - 1)
    rank = r.u8()
    dims = tuple(r.u32() for _ in range(rank))
    n = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
    return name, arr.astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate; raises FormatError (with offset) on any damage."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    count = r.u32()
    params = {}
    for _ in range(count):
        name, arr = _read_named_f32(r)
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", offset=r.pos)
        params[name] = arr

    config = None
    epoch = 0
    adam = None
    rng_state = None
    while not r.exhausted:
        tag = r.take(4)
        body = _Reader(r.take(r.u32()))
        if tag == b"CONF":
            meta = json.loads(body.buf.decode("utf-8"))
            config = model_mod.ModelConfig.from_dict(meta["config"])
            epoch = int(meta["epoch"])
        elif tag == b"ADAM":
            adam = AdamState(t=body.u32())
            for _ in range(body.u32()):
                mname, marr = _read_named_f32(body)
                vname, varr = _read_named_f32(body)
                if vname != mname:
                    raise FormatError("ADAM section m/v name mismatch", offset=r.pos)
                adam.m[mname] = marr
                adam.v[vname] = varr
        elif tag == b"RNGS":
            rng_state = json.loads(body.buf.decode("utf-8"))
        # unknown tags are skipped for forward compatibility

    if config is None:
        raise FormatError("checkpoint is missing its CONF section", offset=r.pos)
    return Checkpoint(version=version, config=config, params=params,
                      adam=adam, rng_state=rng_state, epoch=epoch)


def weights_from_checkpoint(ckpt: Checkpoint) -> model_mod.ModelWeights:
    """Rebuild ModelWeights; every stored name must match the registry exactly."""
    weights = model_mod.build_model(ckpt.config, seed=0)
    registry = model_mod.named_parameters(weights)
    want = {name for name, _ in registry}
    have = set(ckpt.params)
    if want != have:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise FormatError(f"parameter table mismatch: missing={missing} extra={extra}")
    for name, t in registry:
        arr = ckpt.params[name]
        if arr.shape != t.data.shape:
            raise FormatError(f"parameter {name!r} has dims {arr.shape}, "
                              f"expected {t.data.shape}")
        t.data = arr.copy()
    return weights
