"""Feed-forward next-symbol model with prunable hidden layers, plus checkpoint IO.

The network embeds a window of ``k`` symbols, concatenates the embeddings,
runs them through ``num_hidden_layers`` GeLU layers and projects to logits over
the shared vocabulary.  Only the hidden weight matrices are prunable.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .blocks import BlockPartition, Mask
from .tensor import DTYPE, NonFiniteError, Tensor, add, embedding, gelu, masked, matmul, softmax_cross_entropy

MAGIC = b"PATHW001"


class CheckpointFormatError(ValueError):
    """Malformed checkpoint or mask file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MaskMismatchError(ValueError):
    """A mask does not fit the model it is applied to."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_window: int = 8
    embed_dim: int = 16
    hidden_dim: int = 256
    num_hidden_layers: int = 2

    def __post_init__(self):
        for name in ("context_window", "embed_dim", "hidden_dim", "num_hidden_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def prunable_names(self) -> list[str]:
        return [f"hidden{i}.w" for i in range(self.num_hidden_layers)]

    def shapes(self) -> dict[str, tuple[int, int]]:
        """Parameter names and shapes in canonical order."""
        shapes = {"embed": (self.vocab_size, self.embed_dim)}
        fan_in = self.context_window * self.embed_dim
        for i in range(self.num_hidden_layers):
            shapes[f"hidden{i}.w"] = (fan_in, self.hidden_dim)
            shapes[f"hidden{i}.b"] = (1, self.hidden_dim)
            fan_in = self.hidden_dim
        shapes["out.w"] = (self.hidden_dim, self.vocab_size)
        shapes["out.b"] = (1, self.vocab_size)
        return shapes


class Model:
    """Parameters of the network as float32 arrays keyed by name."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        shapes = config.shapes()
        if list(params) != list(shapes):
            missing = sorted(set(shapes) ^ set(params))
            raise ValueError(f"parameter set does not match config: {missing or 'order differs'}")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
            if not np.all(np.isfinite(params[name])):
                raise NonFiniteError(f"{name} contains NaN or Inf")
        self.config = config
        self.params: dict[str, np.ndarray] = {n: np.array(params[n], dtype=DTYPE) for n in shapes}
        self.partitions: dict[str, BlockPartition] = {
            n: BlockPartition(*shapes[n]) for n in config.prunable_names
        }

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        params = {}
        for name, shape in config.shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=DTYPE)
            elif name == "embed":
                params[name] = rng.standard_normal(shape).astype(DTYPE)
            else:
                params[name] = (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(DTYPE)
        return cls(config, params)

    @property
    def prunable(self) -> list[str]:
        return self.config.prunable_names

    def clone(self) -> "Model":
        return Model(self.config, self.params)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(a, requires_grad=requires_grad, _check=False) for n, a in self.params.items()}

    def parameter_counts(self) -> dict:
        per_layer = {n: int(a.size) for n, a in self.params.items()}
        prunable = sum(per_layer[n] for n in self.prunable)
        return {"total": sum(per_layer.values()), "prunable": prunable, "per_layer": per_layer}

    def check_mask(self, mask: Mask) -> None:
        bad = sorted(set(mask.partitions) ^ set(self.partitions))
        bad += [n for n in mask.partitions if n in self.partitions and mask.partitions[n] != self.partitions[n]]
        if bad:
            raise MaskMismatchError(f"mask does not match model prunable layers: {bad}")

    def bitwise_equal(self, other: "Model") -> bool:
        return self.config == other.config and all(
            self.params[n].tobytes() == other.params[n].tobytes() for n in self.params
        )


def logits(model: Model, contexts: np.ndarray, mask: Mask | None = None,
           tensors: dict[str, Tensor] | None = None) -> Tensor:
    if tensors is None:
        tensors = model.tensors()
    if mask is not None:
        model.check_mask(mask)
    h = embedding(tensors["embed"], contexts)
    for i in range(model.config.num_hidden_layers):
        w = tensors[f"hidden{i}.w"]
        if mask is not None:
            w = masked(w, mask.expanded(f"hidden{i}.w"))
        h = gelu(add(matmul(h, w), tensors[f"hidden{i}.b"]))
    return add(matmul(h, tensors["out.w"]), tensors["out.b"])


def forward(model: Model, contexts: np.ndarray, targets: np.ndarray, mask: Mask | None = None,
            tensors: dict[str, Tensor] | None = None) -> tuple[Tensor, float]:
    """Cross-entropy loss tensor and argmax accuracy of f(x; m*theta)."""
    contexts = np.asarray(contexts)
    if contexts.ndim != 2 or contexts.shape[1] != model.config.context_window:
        raise ValueError(f"contexts must be (batch, {model.config.context_window}), got {contexts.shape}")
    out = logits(model, contexts, mask, tensors)
    loss = softmax_cross_entropy(out, targets)
    acc = float(np.mean(out.data.argmax(axis=1) == np.asarray(targets).reshape(-1)))
    return loss, acc


def evaluate(model: Model, contexts: np.ndarray, targets: np.ndarray, mask: Mask | None = None,
             batch_size: int = 4096) -> tuple[float, float]:
    """Mean loss and accuracy over a whole split, chunked to bound memory."""
    n = len(targets)
    loss_sum = 0.0
    hits = 0.0
    for s in range(0, n, batch_size):
        loss, acc = forward(model, contexts[s:s + batch_size], targets[s:s + batch_size], mask)
        m = min(batch_size, n - s)
        loss_sum += loss.item() * m
        hits += acc * m
    return loss_sum / n, hits / n


def apply_mask(model: Model, mask: Mask) -> Model:
    """Zero every weight in a dropped block, in place; returns the model."""
    model.check_mask(mask)
    for name in mask:
        w = model.params[name]
        w[~mask.expanded(name)] = 0.0
    return model


# --------------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    """Exact copy of every parameter; optimizer state is deliberately excluded."""

    tensors: dict[str, np.ndarray]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Checkpoint) and list(self.tensors) == list(other.tensors)
                and all(self.tensors[n].tobytes() == other.tensors[n].tobytes() for n in self.tensors))


def snapshot(model: Model) -> Checkpoint:
    return Checkpoint({n: a.copy() for n, a in model.params.items()})


def restore(checkpoint: Checkpoint, config: ModelConfig) -> Model:
    shapes = config.shapes()
    got = {n: tuple(a.shape) for n, a in checkpoint.tensors.items()}
    if got != shapes:
        raise ValueError(f"checkpoint does not fit config: expected {shapes}, got {got}")
    return Model(config, checkpoint.tensors)


def restore_into(model: Model, checkpoint: Checkpoint) -> None:
    """Overwrite ``model``'s parameters in place (used for rewinding)."""
    for n, a in checkpoint.tensors.items():
        model.params[n][...] = a


def _write_header(buf, name: str, rows: int, cols: int) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<II", rows, cols))


def _read_records(blob: bytes, payload_size):
    if blob[:8] != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    pos = 8
    while pos < len(blob):
        start = pos
        if pos + 4 > len(blob):
            raise CheckpointFormatError("truncated name length", pos)
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + nlen + 8 > len(blob):
            raise CheckpointFormatError("truncated record header", start)
        try:
            name = blob[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("name is not UTF-8", pos) from None
        pos += nlen
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        size = payload_size(rows, cols)
        if pos + size > len(blob):
            raise CheckpointFormatError(f"truncated payload for {name!r}", pos)
        yield name, rows, cols, blob[pos:pos + size], pos
        pos += size


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, a in tensors.items():
        _write_header(buf, name, *a.shape)
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for name, rows, cols, payload, pos in _read_records(blob, lambda r, c: 4 * r * c):
        arr = np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(rows, cols)
        if not np.all(np.isfinite(arr)):
            raise CheckpointFormatError(f"non-finite values in {name!r}", pos)
        out[name] = arr
    return out


def save_checkpoint(path, checkpoint: Checkpoint | Model) -> None:
    tensors = checkpoint.params if isinstance(checkpoint, Model) else checkpoint.tensors
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint(decode_tensors(Path(path).read_bytes()))


def encode_masks(masks: Mapping[str, Mask]) -> bytes:
    """Serialise masks; record names are ``<mask key>/<layer>``, rows/cols are the layer shape."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    for key, mask in masks.items():
        for layer, part in mask.partitions.items():
            _write_header(buf, f"{key}/{layer}", part.rows, part.cols)
            buf.write(mask.bits[layer].astype(np.uint8).tobytes())
    return buf.getvalue()


def decode_masks(blob: bytes) -> dict[str, Mask]:
    parts: dict[str, dict] = {}
    bits: dict[str, dict] = {}
    size = lambda r, c: BlockPartition(r, c).n_blocks if r and c else 0  # noqa: E731
    for name, rows, cols, payload, pos in _read_records(blob, size):
        key, sep, layer = name.rpartition("/")
        if not sep or rows < 1 or cols < 1:
            raise CheckpointFormatError(f"bad mask record {name!r}", pos)
        raw = np.frombuffer(payload, dtype=np.uint8)
        if raw.size and raw.max() > 1:
            raise CheckpointFormatError(f"mask bytes must be 0/1 in {name!r}", pos)
        parts.setdefault(key, {})[layer] = BlockPartition(rows, cols)
        bits.setdefault(key, {})[layer] = raw.astype(bool)
    return {k: Mask(parts[k], bits[k]) for k in parts}


def save_masks(path, masks: Mapping[str, Mask]) -> None:
    Path(path).write_bytes(encode_masks(masks))


def load_masks(path) -> dict[str, Mask]:
    return decode_masks(Path(path).read_bytes())
