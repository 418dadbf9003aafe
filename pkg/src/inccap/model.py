"""A small CNN encoder + GRU decoder captioner.

Parameters live in plain numpy arrays inside :class:`ModelState`; forward passes
convert them to torch tensors so autograd can be used for training.  All the
``*_t`` functions take a ``{name: tensor}`` dict and are differentiable.

Encoder: two blocks of (3x3 conv, ReLU, 3x3 stride-2 conv, ReLU), global average
pooling, standardisation of the pooled activations (batch statistics while
training, running statistics otherwise) and a linear map to the feature vector.  Two coordinate channels are
appended to the (rescaled to [-1, 1]) image so the pooled feature can still tell
where an object sits.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, ContractViolation
from .vocab import END_ID, PAD_ID, START_ID, Vocabulary

CHECKPOINT_FORMAT = "inccap-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    image_size: int = 32
    conv_channels: tuple[int, int] = (16, 32)
    feature_dim: int = 64
    embed_dim: int = 64
    hidden_dim: int = 128
    coord_channels: bool = True

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        data = dict(data)
        if "conv_channels" in data:
            data["conv_channels"] = tuple(data["conv_channels"])
        return cls(**data)


def is_encoder(name: str) -> bool:
    return name.startswith("enc.")


def is_decoder(name: str) -> bool:
    return name.startswith("dec.")


# running statistics: updated by forward passes in training, never by gradients
STAT_PARAMS = ("enc.norm.mean", "enc.norm.var")
NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_version: int
    trainable: dict[str, np.ndarray] = field(default_factory=dict)
    # vocabulary size before the most recent expand_decoder call
    prior_vocab_size: int = 0

    def __post_init__(self):
        if not self.trainable:
            self.trainable = {k: np.ones(v.shape, dtype=bool) for k, v in self.params.items()}
        if not self.prior_vocab_size:
            self.prior_vocab_size = self.vocab_size
        if set(self.trainable) != set(self.params):
            raise ContractViolation("trainability mask must cover every parameter exactly once")
        v = self.vocab_size
        if self.params["dec.out.w"].shape[1] != v or self.params["dec.out.b"].shape[0] != v:
            raise ContractViolation("embedding rows and output columns disagree on vocabulary size")

    @property
    def vocab_size(self) -> int:
        return self.params["dec.embed"].shape[0]

    @property
    def dtype(self):
        return self.params["dec.embed"].dtype

    def copy(self) -> "ModelState":
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       trainable={k: v.copy() for k, v in self.trainable.items()})

    def astype(self, dtype) -> "ModelState":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()},
                       trainable={k: v.copy() for k, v in self.trainable.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.vocab_version}".encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def tensors(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        out = {}
        for name, arr in self.params.items():
            t = torch.from_numpy(arr.copy())
            if requires_grad and name not in STAT_PARAMS and self.trainable[name].any():
                t.requires_grad_(True)
            out[name] = t
        return out


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, vocab_size: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    c_in = config.channels + (2 if config.coord_channels else 0)
    c1, c2 = config.conv_channels
    E, H, D = config.embed_dim, config.hidden_dim, config.feature_dim
    p = {
        "enc.conv1a.w": _uniform(rng, (c1, c_in, 3, 3), np.sqrt(6 / (c_in * 9))),
        "enc.conv1a.b": np.zeros(c1),
        "enc.conv1b.w": _uniform(rng, (c1, c1, 3, 3), np.sqrt(6 / (c1 * 9))),
        "enc.conv1b.b": np.zeros(c1),
        "enc.conv2a.w": _uniform(rng, (c2, c1, 3, 3), np.sqrt(6 / (c1 * 9))),
        "enc.conv2a.b": np.zeros(c2),
        "enc.conv2b.w": _uniform(rng, (c2, c2, 3, 3), np.sqrt(6 / (c2 * 9))),
        "enc.conv2b.b": np.zeros(c2),
        "enc.norm.mean": np.zeros(c2),
        "enc.norm.var": np.ones(c2),
        "enc.fc.w": _uniform(rng, (D, c2), np.sqrt(3 / c2)),
        "enc.fc.b": np.zeros(D),
        "dec.feat.w": _uniform(rng, (E, D), 1 / np.sqrt(D)),
        "dec.feat.b": np.zeros(E),
        "dec.embed": _uniform(rng, (vocab_size, E), 0.1),
        "dec.gru.w_ih": _uniform(rng, (3 * H, E), 1 / np.sqrt(H)),
        "dec.gru.w_hh": _uniform(rng, (3 * H, H), 1 / np.sqrt(H)),
        "dec.gru.b_ih": _uniform(rng, (3 * H,), 1 / np.sqrt(H)),
        "dec.gru.b_hh": _uniform(rng, (3 * H,), 1 / np.sqrt(H)),
        "dec.out.w": _uniform(rng, (H, vocab_size), 1 / np.sqrt(H)),
        "dec.out.b": np.zeros(vocab_size),
    }
    return {k: v.astype(np.float32) for k, v in p.items()}


def init_state(config: ModelConfig, vocab: Vocabulary, seed: int) -> ModelState:
    return ModelState(config, init_params(config, len(vocab), seed), vocab.version)


# --------------------------------------------------------------------------- forward passes


def _check_images(config: ModelConfig, images: torch.Tensor):
    want = (config.channels, config.image_size, config.image_size)
    if images.dim() != 4 or tuple(images.shape[1:]) != want:
        raise ContractViolation(f"expected images of shape (B, {want[0]}, {want[1]}, {want[2]}), "
                                f"got {tuple(images.shape)}")


def encode_t(p: Mapping[str, torch.Tensor], images: torch.Tensor, config: ModelConfig,
             batch_stats: bool = False, update_stats: bool = False) -> torch.Tensor:
    """(B, C, H, W) images -> (B, feature_dim) features.

    Pooled activations are standardised with running statistics, or with the
    batch's own statistics when ``batch_stats`` (training).  ``update_stats``
    additionally folds the batch statistics into the running ones, in place.
    """
    _check_images(config, images)
    x = images.to(p["enc.fc.w"].dtype)
    if config.coord_channels:
        _, _, h, w = x.shape
        ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype).view(1, 1, h, 1)
        xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype).view(1, 1, 1, w)
        lum = x.amax(dim=1, keepdim=True)
        x = torch.cat([x, lum * ys, lum * xs], dim=1)
    for block in ("1", "2"):
        for part, stride in (("a", 1), ("b", 2)):
            name = f"enc.conv{block}{part}"
            x = F.relu(F.conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride, padding=1))
    x = x.mean(dim=(2, 3))
    if batch_stats:
        mean, var = x.mean(dim=0), x.var(dim=0, unbiased=False)
        if update_stats:
            with torch.no_grad():
                n = x.shape[0]
                unbiased = var.detach() * (n / (n - 1)) if n > 1 else var.detach()
                p["enc.norm.mean"].mul_(1 - NORM_MOMENTUM).add_(NORM_MOMENTUM * mean.detach())
                p["enc.norm.var"].mul_(1 - NORM_MOMENTUM).add_(NORM_MOMENTUM * unbiased)
    else:
        mean, var = p["enc.norm.mean"], p["enc.norm.var"]
    x = (x - mean) / torch.sqrt(var + NORM_EPS)
    return x @ p["enc.fc.w"].T + p["enc.fc.b"]


def gru_cell(p, x, h):
    gi = x @ p["dec.gru.w_ih"].T + p["dec.gru.b_ih"]
    gh = h @ p["dec.gru.w_hh"].T + p["dec.gru.b_hh"]
    i_r, i_z, i_n = gi.chunk(3, dim=1)
    h_r, h_z, h_n = gh.chunk(3, dim=1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


SCORE_BLOCK = 32


def output_scores(p, h):
    """Pre-softmax scores ``h @ W + b``.

    The product runs over zero-padded blocks of ``SCORE_BLOCK`` columns so every
    column goes through a matmul of the same shape whatever the vocabulary size.
    A single wide matmul may regroup its sums when columns are appended, and old
    tokens' scores would then drift by rounding after decoder expansion.
    """
    w = p["dec.out.w"]
    v = w.shape[1]
    blocks = F.pad(w, (0, (-v) % SCORE_BLOCK)).reshape(w.shape[0], -1, SCORE_BLOCK).transpose(0, 1)
    scores = torch.matmul(h.unsqueeze(0), blocks.contiguous()).transpose(0, 1).reshape(h.shape[0], -1)
    return scores[:, :v] + p["dec.out.b"]


def _initial_hidden(p, feats):
    x0 = feats @ p["dec.feat.w"].T + p["dec.feat.b"]
    h = torch.zeros(feats.shape[0], p["dec.gru.w_hh"].shape[1], dtype=x0.dtype)
    return gru_cell(p, x0, h)


def decode_logits_t(p: Mapping[str, torch.Tensor], feats: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    """Teacher-forced pre-softmax scores.

    ``inputs`` is (B, T) token ids, normally ``target[:, :-1]``; the result is
    (B, T, V) where step t scores the token following ``inputs[:, t]``.
    """
    h = _initial_hidden(p, feats)
    emb = F.embedding(inputs, p["dec.embed"])
    out = []
    for t in range(inputs.shape[1]):
        h = gru_cell(p, emb[:, t], h)
        out.append(output_scores(p, h))
    return torch.stack(out, dim=1)


@torch.no_grad()
def generate_t(p: Mapping[str, torch.Tensor], feats: torch.Tensor, max_len: int = 20) -> list[list[int]]:
    """Greedy decoding; start and pad are never emitted, ``end`` terminates."""
    if max_len < 1:
        raise ContractViolation("max_len must be >= 1")
    b = feats.shape[0]
    h = _initial_hidden(p, feats)
    token = torch.full((b,), START_ID, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len):
        h = gru_cell(p, F.embedding(token, p["dec.embed"]), h)
        scores = output_scores(p, h)
        scores[:, START_ID] = -torch.inf
        scores[:, PAD_ID] = -torch.inf
        token = scores.argmax(dim=1)
        for i in range(b):
            if not done[i]:
                if token[i] == END_ID:
                    done[i] = True
                else:
                    out[i].append(int(token[i]))
        if done.all():
            break
    return out


# --------------------------------------------------------------------------- numpy-facing API


def _as_batch(state: ModelState, images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images))
    return x.unsqueeze(0) if x.dim() == 3 else x


def encode(state: ModelState, image) -> np.ndarray:
    """Feature vector(s) for one (C, H, W) image or a (B, C, H, W) batch."""
    single = np.ndim(image) == 3
    with torch.no_grad():
        feats = encode_t(state.tensors(), _as_batch(state, image), state.config).numpy()
    return feats[0] if single else feats


def _check_target(state: ModelState, target) -> torch.Tensor:
    target = torch.as_tensor(np.asarray(target, dtype=np.int64))
    if target.dim() != 1 or len(target) < 2 or target[0] != START_ID or target[-1] != END_ID:
        raise ContractViolation("target must start with <start> and end with <end>")
    if int(target.max()) >= state.vocab_size or int(target.min()) < 0:
        raise ContractViolation(f"target index outside vocabulary of size {state.vocab_size}")
    return target


def decode_logits(state: ModelState, feature, target) -> np.ndarray:
    target = _check_target(state, target)
    p = state.tensors()
    feat = torch.as_tensor(np.asarray(feature, dtype=state.dtype)).reshape(1, -1)
    with torch.no_grad():
        return decode_logits_t(p, feat, target[None, :-1])[0].numpy()


def decode_train(state: ModelState, feature, target) -> np.ndarray:
    """Teacher-forced next-token distributions, one row per step (len(target) - 1 rows)."""
    logits = torch.from_numpy(decode_logits(state, feature, target))
    return torch.softmax(logits, dim=-1).numpy()


def generate(state: ModelState, feature, max_len: int = 20) -> list[int]:
    feat = torch.as_tensor(np.asarray(feature, dtype=state.dtype)).reshape(1, -1)
    return generate_t(state.tensors(), feat, max_len)[0]


def caption_images(state: ModelState, images, max_len: int = 20, batch_size: int = 64) -> list[list[int]]:
    """Encode then greedily caption a stack of images."""
    p = state.tensors()
    images = np.asarray(images)
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            feats = encode_t(p, torch.as_tensor(images[i:i + batch_size]), state.config)
            out.extend(generate_t(p, feats, max_len))
    return out


def expand_decoder(state: ModelState, new_vocab: Vocabulary, seed: int) -> ModelState:
    """Grow embedding rows and output columns to ``len(new_vocab)``.

    Existing rows/columns are copied bit-exact; new ones are drawn from a seeded
    uniform(-0.1, 0.1), new output biases start at zero.  Masks of existing
    entries are kept, new entries are trainable.
    """
    if new_vocab.version != state.vocab_version + 1:
        raise ContractViolation(f"vocabulary version {new_vocab.version} does not follow "
                                f"model version {state.vocab_version}")
    old_v, new_v = state.vocab_size, len(new_vocab)
    if new_v < old_v:
        raise ContractViolation(f"vocabulary shrank from {old_v} to {new_v}")
    grow = new_v - old_v
    rng = np.random.default_rng(seed)
    dtype = state.dtype
    params = dict(state.params)
    mask = dict(state.trainable)
    hidden = state.config.hidden_dim
    params["dec.embed"] = np.concatenate(
        [state.params["dec.embed"], rng.uniform(-0.1, 0.1, (grow, state.config.embed_dim)).astype(dtype)])
    params["dec.out.w"] = np.concatenate(
        [state.params["dec.out.w"], rng.uniform(-0.1, 0.1, (hidden, grow)).astype(dtype)], axis=1)
    params["dec.out.b"] = np.concatenate([state.params["dec.out.b"], np.zeros(grow, dtype=dtype)])
    mask["dec.embed"] = np.concatenate([state.trainable["dec.embed"], np.ones((grow, state.config.embed_dim), bool)])
    mask["dec.out.w"] = np.concatenate([state.trainable["dec.out.w"], np.ones((hidden, grow), bool)], axis=1)
    mask["dec.out.b"] = np.concatenate([state.trainable["dec.out.b"], np.ones(grow, bool)])
    params = {k: (v.copy() if v is state.params.get(k) else v) for k, v in params.items()}
    mask = {k: v.copy() for k, v in mask.items()}
    return ModelState(state.config, params, new_vocab.version, mask, prior_vocab_size=old_v)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(state: ModelState, path, rng_state=None) -> Path:
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "vocab_version": state.vocab_version,
        "prior_vocab_size": state.prior_vocab_size,
        "config": asdict(state.config),
        "rng_state": rng_state,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update({f"param/{k}": v for k, v in state.params.items()})
    arrays.update({f"mask/{k}": v for k, v in state.trainable.items()})
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, vocab: Vocabulary | None = None) -> tuple[ModelState, object]:
    """Return ``(state, rng_state)``; a vocabulary whose version differs is rejected."""
    try:
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            params = {k[6:]: data[k] for k in data.files if k.startswith("param/")}
            mask = {k[5:]: data[k] for k in data.files if k.startswith("mask/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint header {header.get('format')!r} "
                              f"v{header.get('version')}")
    state = ModelState(ModelConfig.from_dict(header["config"]), params, header["vocab_version"],
                       mask, header["prior_vocab_size"])
    if vocab is not None:
        if vocab.version != state.vocab_version or len(vocab) != state.vocab_size:
            raise CheckpointError(f"{path}: checkpoint has vocabulary version {state.vocab_version} "
                                  f"({state.vocab_size} tokens), got version {vocab.version} ({len(vocab)})")
    return state, header["rng_state"]
