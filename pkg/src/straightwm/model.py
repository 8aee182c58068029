"""World model: patch encoder, action encoder, K-frame predictor and pooling head.

All forward passes are batched: latents are ``(N, m_v, d_v)`` nodes, action
chunks ``(N, frameskip * action_dim)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import ConfigError, DegenerateVelocity, DimensionError, FormatError

VARIANTS = ("patch", "mean", "flatten", "agg")
PARAM_GROUPS = ("encoder", "action", "predictor", "head")


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    latent_channels: int = 8  # d_v
    action_embed: int = 16  # d_a
    history: int = 3  # K
    frameskip: int = 5
    mode: str = "spatial"  # or "global"
    head_dim: int = 32  # d_h
    encoder_hidden: int = 32
    predictor_hidden: int = 256
    action_hidden: int = 32
    head_hidden: int = 64
    action_dim: int = 2
    image_size: int = 32
    channels: int = 2

    def __post_init__(self):
        problems = []
        if self.image_size % self.patch_size:
            problems.append(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.mode not in ("spatial", "global"):
            problems.append(f"mode must be spatial|global, got {self.mode!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 1:
                problems.append(f"{f.name} must be >= 1")
        if problems:
            raise ConfigError(problems)

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self):
        """m_v: number of latent tokens."""
        return self.n_patches if self.mode == "spatial" else 1

    @property
    def latent_size(self):
        return self.tokens * self.latent_channels

    @property
    def chunk_size(self):
        return self.frameskip * self.action_dim

    @property
    def obs_shape(self):
        return (self.channels, self.image_size, self.image_size)


def _param_shapes(cfg: ModelConfig):
    patch_in = cfg.channels * cfg.patch_size**2
    shapes = {
        "encoder.patch.w": ("encoder", (patch_in, cfg.encoder_hidden)),
        "encoder.patch.b": ("encoder", (cfg.encoder_hidden,)),
        "encoder.mlp1.w": ("encoder", (cfg.encoder_hidden, cfg.encoder_hidden)),
        "encoder.mlp1.b": ("encoder", (cfg.encoder_hidden,)),
        "encoder.mlp2.w": ("encoder", (cfg.encoder_hidden, cfg.latent_channels)),
        "encoder.mlp2.b": ("encoder", (cfg.latent_channels,)),
    }
    if cfg.mode == "global":
        shapes["encoder.global.w"] = ("encoder", (cfg.n_patches * cfg.latent_channels, cfg.latent_channels))
        shapes["encoder.global.b"] = ("encoder", (cfg.latent_channels,))
    pred_in = cfg.history * (cfg.latent_size + cfg.action_embed)
    shapes.update(
        {
            "action.mlp1.w": ("action", (cfg.chunk_size, cfg.action_hidden)),
            "action.mlp1.b": ("action", (cfg.action_hidden,)),
            "action.mlp2.w": ("action", (cfg.action_hidden, cfg.action_embed)),
            "action.mlp2.b": ("action", (cfg.action_embed,)),
            "predictor.mlp1.w": ("predictor", (pred_in, cfg.predictor_hidden)),
            "predictor.mlp1.b": ("predictor", (cfg.predictor_hidden,)),
            "predictor.mlp2.w": ("predictor", (cfg.predictor_hidden, cfg.latent_size)),
            "predictor.mlp2.b": ("predictor", (cfg.latent_size,)),
            "head.mlp1.w": ("head", (cfg.latent_size, cfg.head_hidden)),
            "head.mlp2.w": ("head", (cfg.head_hidden, cfg.head_dim)),
        }
    )
    return shapes


def patchify(obs: np.ndarray, patch: int) -> np.ndarray:
    """(N, C, S, S) -> (N * (S/patch)^2, C * patch^2), tokens in row-major patch order."""
    n, c, s, _ = obs.shape
    g = s // patch
    x = obs.reshape(n, c, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n * g * g, c * patch * patch)


class WorldModel:
    """Parameter bundle plus the differentiable forward passes."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: dict | None = None):
        self.config = config or ModelConfig()
        self.shapes = _param_shapes(self.config)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        missing = set(self.shapes) - set(params)
        if missing:
            raise FormatError(f"missing parameters: {sorted(missing)}")
        self.params = {}
        for name, (_, shape) in self.shapes.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {value.shape}")
            self.params[name] = ag.parameter(value, name=name)

    def _init_params(self, rng):
        out = {}
        for name, (_, shape) in self.shapes.items():
            if name.endswith(".b"):
                out[name] = np.zeros(shape)
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
                if name == "predictor.mlp2.w":
                    w *= 0.1  # start close to the residual identity map
                out[name] = w
        return out

    def group(self, name) -> list:
        return [self.params[k] for k, (g, _) in self.shapes.items() if g == name]

    def parameters(self) -> list:
        return list(self.params.values())

    def copy(self) -> "WorldModel":
        return WorldModel(self.config, params={k: p.value.copy() for k, p in self.params.items()})

    def state_dict(self):
        return {k: p.value.copy() for k, p in self.params.items()}

    def _lin(self, x, prefix):
        return ag.matmul(x, self.params[prefix + ".w"]) + self.params[prefix + ".b"]

    # forward passes

    def encode(self, obs) -> Node:
        """Observations (N, C, S, S) or (C, S, S) -> latent tokens (N, m_v, d_v)."""
        cfg = self.config
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 3:
            obs = obs[None]
        if obs.shape[1:] != cfg.obs_shape:
            raise DimensionError(f"observation shape {obs.shape[1:]} != {cfg.obs_shape}")
        n = obs.shape[0]
        x = ag.constant(patchify(obs, cfg.patch_size))
        h = ag.tanh(self._lin(x, "encoder.patch"))
        h = ag.tanh(self._lin(h, "encoder.mlp1"))
        z = ag.tanh(self._lin(h, "encoder.mlp2"))
        if cfg.mode == "global":
            z = ag.reshape(z, (n, cfg.n_patches * cfg.latent_channels))
            z = ag.tanh(self._lin(z, "encoder.global"))
        return ag.reshape(z, (n, cfg.tokens, cfg.latent_channels))

    def encode_numpy(self, obs) -> np.ndarray:
        return self.encode(obs).value

    def embed_action(self, chunk) -> Node:
        chunk = ag.as_node(chunk)
        if chunk.value.ndim == 1:
            chunk = ag.reshape(chunk, (1, -1))
        if chunk.shape[-1] != self.config.chunk_size:
            raise DimensionError(f"action chunk width {chunk.shape[-1]} != {self.config.chunk_size}")
        h = ag.tanh(self._lin(chunk, "action.mlp1"))
        return self._lin(h, "action.mlp2")

    def predict_next(self, latents, actions) -> Node:
        """One step: K history latents (each (N, m_v, d_v)) and K action chunks -> next latent."""
        cfg = self.config
        if len(latents) != cfg.history or len(actions) != cfg.history:
            raise DimensionError(f"predict_next needs exactly {cfg.history} latents and action chunks")
        latents = [ag.as_node(z) for z in latents]
        n = latents[-1].shape[0]
        parts = []
        for z, a in zip(latents, actions):
            parts.append(ag.reshape(z, (n, cfg.latent_size)))
            emb = self.embed_action(a)
            if emb.shape[0] != n:
                raise DimensionError("latent and action batch sizes differ")
            parts.append(emb)
        h = ag.tanh(self._lin(ag.concat(parts, axis=-1), "predictor.mlp1"))
        delta = self._lin(h, "predictor.mlp2")
        out = ag.reshape(latents[-1], (n, cfg.latent_size)) + delta
        return ag.reshape(out, (n, cfg.tokens, cfg.latent_channels))

    def rollout(self, latents, seed_actions, future_actions) -> list:
        """Autoregressive rollout.

        ``latents``: K history latents, oldest first. ``seed_actions``: the K-1
        chunks already applied at the older history latents. ``future_actions``:
        H chunks; chunk 0 is applied at the newest history latent. Returns the
        H predicted latents.
        """
        k = self.config.history
        if len(latents) != k or len(seed_actions) != k - 1:
            raise DimensionError(f"rollout needs {k} latents and {k - 1} seed action chunks")
        if len(future_actions) < 1:
            raise DimensionError("rollout horizon must be >= 1")
        zs = list(latents)
        acts = list(seed_actions)
        out = []
        for a in future_actions:
            acts.append(a)
            z_next = self.predict_next(zs[-k:], acts[-k:])
            out.append(z_next)
            zs.append(z_next)
        return out

    def pool(self, v) -> Node:
        """Pooling head h: (N, m_v, d_v) -> (N, d_h).

        Bias-free tanh MLP, hence odd with h(0) = 0: it cannot satisfy the
        straightening loss by emitting one constant direction for every velocity.
        """
        v = ag.as_node(v)
        n = v.shape[0]
        h = ag.tanh(ag.matmul(ag.reshape(v, (n, self.config.latent_size)), self.params["head.mlp1.w"]))
        return ag.matmul(h, self.params["head.mlp2.w"])

    # checkpoints

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        cfg = json.dumps(asdict(self.config), sort_keys=True).encode()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            value = self.params[name].value
            raw = name.encode()
            buf.write(struct.pack("<II", len(raw), value.ndim))
            buf.write(raw)
            buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
            buf.write(value.astype("<f8").tobytes())
        return buf.getvalue()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "WorldModel":
        if data[:4] != CHECKPOINT_MAGIC:
            raise FormatError("not a world-model checkpoint (bad magic)")
        try:
            config, params, off = cls._parse(data)
        except (struct.error, ValueError, UnicodeDecodeError, TypeError) as exc:
            raise FormatError(f"corrupt checkpoint: {exc}") from exc
        if off != len(data):
            raise FormatError(f"corrupt checkpoint: {len(data) - off} trailing bytes")
        return cls(config, params=params)

    @staticmethod
    def _parse(data: bytes):
        off = 4
        version, clen = struct.unpack_from("<II", data, off)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off += 8
        config = ModelConfig(**json.loads(data[off : off + clen]))
        off += clen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<II", data, off)
            off += 8
            name = data[off : off + nlen].decode()
            off += nlen
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
        return config, params, off

    @classmethod
    def load(cls, path) -> "WorldModel":
        return cls.from_bytes(Path(path).read_bytes())


CHECKPOINT_MAGIC = b"STWM"
CHECKPOINT_VERSION = 1


def _batched(z):
    z = ag.as_node(z)
    if z.value.ndim == 2:
        return ag.reshape(z, (1,) + z.shape), True
    return z, False


def _patch_cosine(v0, v1):
    """Per-sample mean of per-token cosines, over tokens that moved in both steps.

    Tokens far from the agent keep the same latent between frames; their zero
    velocity carries no direction and is left out rather than clamped.
    """
    n, m, d = v0.shape
    n0 = np.linalg.norm(v0.value, axis=-1)
    n1 = np.linalg.norm(v1.value, axis=-1)
    valid = (n0 >= ag.NORM_FLOOR) & (n1 >= ag.NORM_FLOOR)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateVelocity("no token moved in both steps")
    rows = np.flatnonzero(valid.reshape(-1))
    flat0 = ag.slice_(ag.reshape(v0, (n * m, d)), rows)
    flat1 = ag.slice_(ag.reshape(v1, (n * m, d)), rows)
    c = ag.reshape(ag.cosine(flat0, flat1, axis=-1), (len(rows), 1))
    avg = np.zeros((n, len(rows)))
    avg[rows // m, np.arange(len(rows))] = 1.0 / counts[rows // m]
    return ag.reshape(ag.matmul(ag.constant(avg), c), (n,))


def straightening_cosine(z0, z1, z2, variant="flatten", model: WorldModel | None = None) -> Node:
    """Cosine between consecutive latent velocities z1-z0 and z2-z1.

    Accepts single latents (m_v, d_v) -> scalar, or batches (N, m_v, d_v) -> (N,).
    ``agg`` needs ``model`` for its pooling head.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown straightening variant {variant!r}")
    (z0, single), (z1, _), (z2, _) = _batched(z0), _batched(z1), _batched(z2)
    v0, v1 = ag.sub(z1, z0), ag.sub(z2, z1)
    n, m, d = v0.shape
    if variant == "patch":
        c = _patch_cosine(v0, v1)
    elif variant == "mean":
        c = ag.cosine(ag.mean(v0, axis=1), ag.mean(v1, axis=1), axis=-1)
    elif variant == "flatten":
        c = ag.cosine(ag.reshape(v0, (n, m * d)), ag.reshape(v1, (n, m * d)), axis=-1)
    else:
        if model is None:
            raise ConfigError("agg variant needs a model with a pooling head")
        c = ag.cosine(model.pool(v0), model.pool(v1), axis=-1)
    return ag.reshape(c, ()) if single else c
