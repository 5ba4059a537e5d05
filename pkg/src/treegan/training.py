"""WGAN-GP training: losses, alternating updates, telemetry and checkpoints."""

from __future__ import annotations

import csv
import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core_math import Adam, Tensor, as_tensor, backward, default_dtype, grad, no_grad, norm
from .critic import Critic, CriticConfig
from .data import Batcher, hash_seed
from .treegcn import ConfigError, Generator, GeneratorConfig


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


@dataclass
class TrainConfig:
    lambda_gp: float = 10.0
    critic_steps: int = 5
    batch_size: int = 16
    total_gen_steps: int = 2000
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    eval_every: int = 0
    tail: str = "drop"
    precision: str = "float32"

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ConfigError("lambda_gp must be >= 0")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def generator_loss(latents, G: Callable, D: Callable) -> Tensor:
    """Negative mean critic score of generated clouds."""
    return -D(G(latents)).mean()


def gradient_penalty(real, fake, D: Callable, lambda_gp: float,
                     rng: np.random.Generator | None = None, u: np.ndarray | None = None) -> Tensor:
    """``lambda * mean_b (||grad D(x_hat_b)||_2 - 1)^2`` on random interpolates.

    One coefficient ``u ~ U(0, 1)`` per cloud; the norm runs over all n*3
    coordinates of that cloud. The result stays differentiable with respect
    to the critic's parameters.
    """
    real = as_tensor(real).data
    fake = as_tensor(fake).data
    if real.shape != fake.shape:
        raise ValueError(f"real batch {real.shape} and fake batch {fake.shape} differ in shape")
    B = real.shape[0]
    if u is None:
        rng = rng or np.random.default_rng()
        u = rng.uniform(0.0, 1.0, size=B)
    u = np.asarray(u, dtype=real.dtype).reshape((B,) + (1,) * (real.ndim - 1))
    x_hat = Tensor(u * real + (1.0 - u) * fake, requires_grad=True)
    (g,) = grad(D(x_hat).sum(), [x_hat], create_graph=True)
    if g is None:
        g = Tensor(np.zeros_like(x_hat.data))
    norms = norm(g, axis=tuple(range(1, real.ndim)))
    return ((norms - 1.0) ** 2).mean() * lambda_gp


def critic_loss(real_batch, latents, G: Callable, D: Callable, lambda_gp: float,
                rng: np.random.Generator | None = None,
                u: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """Mean fake score - mean real score + gradient penalty.

    The generator runs without recording, so only the critic receives gradients.
    """
    with no_grad():
        fake = G(latents).data if callable(G) else np.asarray(G)
    real = as_tensor(real_batch)
    fake_score = D(Tensor(fake)).mean()
    real_score = D(real).mean()
    loss = fake_score - real_score
    pen = None
    if lambda_gp > 0:
        pen = gradient_penalty(real.data, fake, D, lambda_gp, rng=rng, u=u)
        loss = loss + pen
    terms = {
        "fake": fake_score.item(),
        "real": real_score.item(),
        "penalty": pen.item() if pen is not None else 0.0,
    }
    return loss, terms


TELEMETRY_HEADER = ["step", "loss_gen", "loss_disc", "penalty", "wall_time", "fpd"]


@dataclass
class Record:
    step: int
    loss_gen: float
    loss_disc: float
    penalty: float
    wall_time: float
    fpd: float | None = None

    def row(self) -> list:
        return [self.step, repr(self.loss_gen), repr(self.loss_disc), repr(self.penalty),
                f"{self.wall_time:.3f}", "" if self.fpd is None else repr(self.fpd)]


class TelemetryWriter:
    """UTF-8 CSV telemetry with a fixed header, flushed per record."""

    def __init__(self, path, append: bool = False):
        path = Path(path)
        fresh = not (append and path.exists())
        self._fh = open(path, "a" if not fresh else "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        if fresh:
            self._w.writerow(TELEMETRY_HEADER)

    def write(self, rec: Record) -> None:
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_telemetry(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TELEMETRY_HEADER:
            raise ValueError(f"unexpected telemetry header {reader.fieldnames}")
        return list(reader)


class Trainer:
    """Alternating WGAN-GP optimization of a TreeGCN generator and a critic."""

    def __init__(self, data: np.ndarray, gen_config: GeneratorConfig, critic_config: CriticConfig,
                 config: TrainConfig, evaluator: Callable[[Generator], float] | None = None):
        data = np.asarray(data)
        if data.ndim != 3 or len(data) == 0:
            raise ValueError("training data must be a non-empty (N, n, 3) array")
        gen_config.validate(n_points=data.shape[1])
        self.gen_config, self.critic_config, self.config = gen_config, critic_config, config
        self.dtype = np.dtype(config.precision)
        self.data = data.astype(self.dtype)
        self.evaluator = evaluator
        with default_dtype(self.dtype):
            self.G = Generator(gen_config, np.random.default_rng(hash_seed(config.seed, 11)))
            self.D = Critic(critic_config, np.random.default_rng(hash_seed(config.seed, 12)))
        self.gen_params = self.G.parameters()
        self.critic_params = self.D.parameters()
        betas = (config.beta1, config.beta2)
        self.opt_g = Adam(self.gen_params, config.lr, betas, config.eps)
        self.opt_d = Adam(self.critic_params, config.lr, betas, config.eps)
        self.rng = np.random.default_rng(hash_seed(config.seed, 13))
        self.batcher = Batcher(len(data), config.batch_size, config.seed, config.tail)
        self.step = 0
        self.history: list[Record] = []
        self._t0 = time.perf_counter()

    def _latents(self) -> np.ndarray:
        B = self.config.batch_size
        return self.rng.standard_normal((B, self.gen_config.latent_dim)).astype(self.dtype)

    def critic_update(self) -> tuple[float, float]:
        real = self.data[self.batcher.next()]
        z = self._latents()
        u = self.rng.uniform(0.0, 1.0, size=len(real))
        loss, terms = critic_loss(real, z, self.G, self.D, self.config.lambda_gp, u=u)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"critic loss is {value} at step {self.step}")
        self.opt_d.zero_grad()
        backward(loss, self.critic_params)
        self.opt_d.step()
        return value, terms["penalty"]

    def generator_update(self) -> float:
        loss = generator_loss(self._latents(), self.G, self.D)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"generator loss is {value} at step {self.step}")
        self.opt_g.zero_grad()
        backward(loss, self.gen_params)
        self.opt_g.step()
        return value

    def train_step(self) -> Record:
        for _ in range(self.config.critic_steps):
            loss_d, pen = self.critic_update()
        loss_g = self.generator_update()
        self.step += 1
        fpd = None
        if self.evaluator is not None and self.config.eval_every and self.step % self.config.eval_every == 0:
            fpd = float(self.evaluator(self.G))
        rec = Record(self.step, loss_g, loss_d, pen, time.perf_counter() - self._t0, fpd)
        self.history.append(rec)
        return rec

    def run(self, steps: int | None = None, telemetry: TelemetryWriter | None = None,
            callback: Callable[[Record], None] | None = None) -> list[Record]:
        steps = self.config.total_gen_steps - self.step if steps is None else steps
        out = []
        for _ in range(steps):
            rec = self.train_step()
            out.append(rec)
            if telemetry is not None:
                telemetry.write(rec)
            if callback is not None:
                callback(rec)
        return out

    def sample(self, count: int, seed: int) -> np.ndarray:
        z = np.random.default_rng(seed).standard_normal((count, self.gen_config.latent_dim)).astype(self.dtype)
        with no_grad():
            return self.G(z).data

    # checkpoint state
    def checkpoint(self) -> "Checkpoint":
        tensors: dict[str, np.ndarray] = {}
        for p in self.gen_params + self.critic_params:
            tensors[p.name] = p.data
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for p in opt.params:
                tensors[f"{tag}/m/{p.name}"] = opt.m[p.name]
                tensors[f"{tag}/v/{p.name}"] = opt.v[p.name]
        meta = {
            "generator": self.gen_config.to_dict(),
            "critic": self.critic_config.to_dict(),
            "train": self.config.to_dict(),
            "step": self.step,
            "opt_g_t": self.opt_g.t,
            "opt_d_t": self.opt_d.t,
            "rng": _jsonable(self.rng.bit_generator.state),
            "batcher": self.batcher.state(),
        }
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", data: np.ndarray,
                        evaluator: Callable[[Generator], float] | None = None) -> "Trainer":
        gen_cfg, critic_cfg, train_cfg = ckpt.configs()
        tr = cls(data, gen_cfg, critic_cfg, train_cfg, evaluator)
        tr.load_state(ckpt)
        return tr

    def load_state(self, ckpt: "Checkpoint") -> None:
        for p in self.gen_params + self.critic_params:
            p.data = ckpt.tensors[p.name].copy()
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for p in opt.params:
                opt.m[p.name] = ckpt.tensors[f"{tag}/m/{p.name}"].copy()
                opt.v[p.name] = ckpt.tensors[f"{tag}/v/{p.name}"].copy()
        self.opt_g.t = int(ckpt.meta["opt_g_t"])
        self.opt_d.t = int(ckpt.meta["opt_d_t"])
        self.rng.bit_generator.state = ckpt.meta["rng"]
        self.batcher.load_state(ckpt.meta["batcher"])
        self.step = int(ckpt.meta["step"])


def train(data: np.ndarray, gen_config: GeneratorConfig, critic_config: CriticConfig,
          config: TrainConfig, evaluator=None, telemetry_path=None) -> Trainer:
    """Run ``config.total_gen_steps`` generator steps and return the trainer."""
    tr = Trainer(data, gen_config, critic_config, config, evaluator)
    writer = TelemetryWriter(telemetry_path) if telemetry_path else None
    try:
        tr.run(telemetry=writer)
    finally:
        if writer is not None:
            writer.close()
    return tr


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# ---------------------------------------------------------------- checkpoint file

CKPT_MAGIC = b"TGN1"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def configs(self) -> tuple[GeneratorConfig, CriticConfig, TrainConfig]:
        return (GeneratorConfig(**self.meta["generator"]), CriticConfig(**self.meta["critic"]),
                TrainConfig(**self.meta["train"]))

    def generator(self) -> Generator:
        """Rebuild the generator with the stored weights."""
        cfg = GeneratorConfig(**self.meta["generator"])
        dtype = np.dtype(self.meta.get("train", {}).get("precision", "float64"))
        with default_dtype(dtype):
            G = Generator(cfg, 0)
        for p in G.parameters():
            p.data = self.tensors[p.name].copy()
        return G


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("=") if arr.dtype.byteorder == ">" else arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def parse_checkpoint(blob: bytes, path: str = "<bytes>") -> Checkpoint:
    if len(blob) < 14 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a TGN1 checkpoint")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    version, meta_len = struct.unpack_from("<HI", payload, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 10
    try:
        meta = json.loads(payload[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", payload, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            count_el = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(payload, dtype=dt, count=count_el, offset=off).reshape(shape)
            off += count_el * dt.itemsize
            tensors[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} trailing bytes")
    return Checkpoint(tensors, meta)


def save_params(path, params: Sequence, meta: dict) -> None:
    """Store a bare parameter list (e.g. a feature extractor) in the checkpoint format."""
    save_checkpoint(path, Checkpoint({p.name: p.data for p in params}, meta))
