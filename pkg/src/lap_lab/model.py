"""Tiny pre-norm decoder-only transformer with a layer-split forward pass.

Hidden states are indexed by layer: layer 0 is the token-plus-position
embedding, layer ``i`` the output of the ``i``-th transformer block. The
split pair :func:`forward_hidden` / :func:`forward_from` lets callers add a
perturbation after any layer before finishing the pass.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, RngStream, Tensor

PAD, BOS, EOS, SEP = 0, 1, 2, 3
CHECKPOINT_FORMAT = 1
_MASK_FILL = -1e9


class InputError(ValueError):
    """Invalid token ids, lengths or examples."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    vocab_size: int = 64
    max_seq: int = 64
    injection_layer: int | None = None
    embedding_layer: int | None = None

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"model.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractViolation("model.d_model must be divisible by model.n_heads")
        if self.injection_layer is not None and not 0 <= self.injection_layer <= self.n_layers:
            raise ContractViolation("model.injection_layer must lie in [0, n_layers]")
        if self.embedding_layer is not None and not 1 <= self.embedding_layer <= self.n_layers:
            raise ContractViolation("model.embedding_layer must lie in [1, n_layers]")

    @property
    def default_injection_layer(self) -> int:
        return self.n_layers // 2 if self.injection_layer is None else self.injection_layer

    @property
    def default_embedding_layer(self) -> int:
        return max(1, self.n_layers // 2) if self.embedding_layer is None else self.embedding_layer


class ParameterSet(dict):
    """Named weight tensors of one model, carrying the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        super().__init__(tensors)
        self.config = config

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ParameterSet":
        """Copy with some or all tensors replaced by ``arrays``."""
        unknown = set(arrays) - set(self)
        if unknown:
            raise ContractViolation(f"unknown parameter(s) {sorted(unknown)}")
        return ParameterSet(self.config, {k: Tensor(arrays[k], dtype=arrays[k].dtype) if k in arrays else self[k]
                                          for k in self})

    def tracked(self) -> "ParameterSet":
        """Fresh leaf views of the same data with gradient tracking on."""
        return ParameterSet(self.config, {k: Tensor(v.data, tracked=True, dtype=v.data.dtype) for k, v in self.items()})

    def frozen(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: Tensor(v.data, dtype=v.data.dtype) for k, v in self.items()})

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(self.config, {k: Tensor(v.data.astype(dtype), dtype=dtype) for k, v in self.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self[name].data).tobytes())
        return h.hexdigest()


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d), "pos_emb": (cfg.max_seq, d)}
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w_in": (d, 4 * d), p + "mlp.b_in": (4 * d,),
            p + "mlp.w_out": (4 * d, d), p + "mlp.b_out": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head": (d, v)})
    return shapes


def init_params(cfg: ModelConfig, rng: RngStream | int, scale: float = 0.02) -> ParameterSet:
    """GPT-2 style init: N(0, scale) weights, residual outputs shrunk by sqrt(2L)."""
    if isinstance(rng, int):
        rng = RngStream(rng)
    dtype = ad.get_dtype()
    out = {}
    for name, dims in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(dims)
        elif leaf.startswith("b"):
            arr = np.zeros(dims)
        else:
            std = scale / math.sqrt(2 * cfg.n_layers) if leaf in ("wo", "w_out") else scale
            arr = rng.child("init", name).normal(dims, std)
        out[name] = Tensor(arr.astype(dtype), dtype=dtype)
    return ParameterSet(cfg, out)


@dataclass
class HiddenState:
    layer: int
    activations: Tensor  # (positions, d_model) or (batch, positions, d_model)


@dataclass
class Example:
    x: list[int]
    y: list[int]

    def validate(self, cfg: ModelConfig | None = None) -> None:
        if len(self.x) < 1:
            raise InputError("example prompt x is empty")
        if len(self.y) < 1:
            raise InputError("example response y is empty")
        if cfg is not None and len(self.x) + len(self.y) > cfg.max_seq:
            raise InputError(f"example length {len(self.x) + len(self.y)} exceeds max_seq {cfg.max_seq}")


# --------------------------------------------------------------------------
# forward pass


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.shape[-1] > cfg.max_seq:
        raise InputError(f"sequence length {tokens.shape[-1]} exceeds max_seq {cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError(f"token id outside [0, {cfg.vocab_size})")


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise InputError("tokens must be a sequence or a (batch, positions) array")
    return arr, False


def _embed(params: ParameterSet, tokens: np.ndarray) -> Tensor:
    t = tokens.shape[1]
    return ad.embedding(params["tok_emb"], tokens) + ad.embedding(params["pos_emb"], np.arange(t))


def _causal_mask(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), _MASK_FILL, dtype=dtype), k=1)


def _block(params: ParameterSet, h: Tensor, i: int) -> Tensor:
    cfg = params.config
    b, t, d = h.dims
    nh = cfg.n_heads
    dh = d // nh
    p = f"h{i}."
    a = ad.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])

    def heads(proj: Tensor) -> Tensor:
        return proj.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)

    # no key bias: it shifts every score in a row equally and softmax ignores it
    q = heads(a @ params[p + "attn.wq"] + params[p + "attn.bq"])
    k = heads(a @ params[p + "attn.wk"])
    v = heads(a @ params[p + "attn.wv"] + params[p + "attn.bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + _causal_mask(t, h.data.dtype)
    att = ad.softmax(scores, axis=-1)
    mixed = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    h = h + (mixed @ params[p + "attn.wo"] + params[p + "attn.bo"])
    m = ad.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
    hidden = ad.gelu(m @ params[p + "mlp.w_in"] + params[p + "mlp.b_in"])
    return h + (hidden @ params[p + "mlp.w_out"] + params[p + "mlp.b_out"])


def _hidden(params: ParameterSet, tokens: np.ndarray, upto_layer: int) -> Tensor:
    h = _embed(params, tokens)
    for i in range(upto_layer):
        h = _block(params, h, i)
    return h


def _finish(params: ParameterSet, h: Tensor, from_layer: int) -> Tensor:
    for i in range(from_layer, params.config.n_layers):
        h = _block(params, h, i)
    h = ad.layer_norm(h, params["ln_f.g"], params["ln_f.b"])
    return h @ params["head"]


def _check_layer(cfg: ModelConfig, layer: int) -> None:
    if not 0 <= layer <= cfg.n_layers:
        raise ContractViolation(f"layer {layer} outside [0, {cfg.n_layers}]")


def forward_hidden(params: ParameterSet, tokens, upto_layer: int) -> HiddenState:
    """Activations after block ``upto_layer`` (after the embedding when 0)."""
    cfg = params.config
    _check_layer(cfg, upto_layer)
    arr, single = _as_batch(tokens)
    _check_tokens(cfg, arr)
    h = _hidden(params, arr, upto_layer)
    return HiddenState(upto_layer, h.reshape(h.dims[1:]) if single else h)


def forward_from(params: ParameterSet, hidden: HiddenState, from_layer: int) -> Tensor:
    """Finish the forward pass from a hidden state taken after ``from_layer``."""
    if hidden.layer != from_layer:
        raise ContractViolation(f"hidden state is from layer {hidden.layer}, not {from_layer}")
    _check_layer(params.config, from_layer)
    h = hidden.activations
    single = len(h.dims) == 2
    if single:
        h = h.reshape((1,) + h.dims)
    logits = _finish(params, h, from_layer)
    return logits.reshape(logits.dims[1:]) if single else logits


def forward(params: ParameterSet, tokens) -> Tensor:
    """Unsplit forward pass: logits of shape (positions, vocab) or batched."""
    arr, single = _as_batch(tokens)
    _check_tokens(params.config, arr)
    logits = _finish(params, _hidden(params, arr, params.config.n_layers), params.config.n_layers)
    return logits.reshape(logits.dims[1:]) if single else logits


# --------------------------------------------------------------------------
# batched teacher-forced losses


@dataclass
class Batch:
    """Right-padded teacher-forcing batch built from examples.

    Input position ``t`` holds token ``t`` of x ⊕ y and predicts token ``t+1``.
    ``loss_mask`` marks positions whose target is a response token;
    ``perturb_mask`` marks positions that may receive a perturbation.
    """

    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    perturb_mask: np.ndarray
    lengths: np.ndarray
    prompt_lengths: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]


def make_batch(examples: Sequence[Example], cfg: ModelConfig, positions: str = "prompt") -> Batch:
    if positions not in ("prompt", "full"):
        raise ContractViolation(f"positions must be 'prompt' or 'full', got {positions!r}")
    if not examples:
        raise InputError("empty batch")
    for ex in examples:
        ex.validate(cfg)
    seqs = [list(ex.x) + list(ex.y) for ex in examples]
    width = max(len(s) for s in seqs) - 1
    n = len(examples)
    tokens = np.full((n, width), PAD, dtype=np.int64)
    targets = np.full((n, width), PAD, dtype=np.int64)
    loss_mask = np.zeros((n, width), dtype=bool)
    perturb = np.zeros((n, width), dtype=bool)
    for i, (ex, s) in enumerate(zip(examples, seqs)):
        m = len(s) - 1
        tokens[i, :m] = s[:-1]
        targets[i, :m] = s[1:]
        loss_mask[i, len(ex.x) - 1:m] = True
        if positions == "prompt":
            perturb[i, :len(ex.x)] = True
        else:
            perturb[i, :m] = True
    _check_tokens(cfg, tokens)
    _check_tokens(cfg, targets)
    lengths = np.array([len(s) - 1 for s in seqs])
    prompt_lengths = np.array([len(ex.x) for ex in examples])
    return Batch(tokens, targets, loss_mask, perturb, lengths, prompt_lengths)


def batch_losses(params: ParameterSet, batch: Batch, delta: Tensor | None = None,
                 inject_layer: int | None = None) -> Tensor:
    """Per-example response-masked mean cross-entropy, shape (batch,).

    With ``delta`` (batch, positions, d_model) the perturbation is added after
    ``inject_layer`` at the batch's perturbation positions only.
    """
    cfg = params.config
    if delta is None:
        logits = _finish(params, _hidden(params, batch.tokens, cfg.n_layers), cfg.n_layers)
    else:
        layer = cfg.default_injection_layer if inject_layer is None else inject_layer
        _check_layer(cfg, layer)
        expected = batch.tokens.shape + (cfg.d_model,)
        if tuple(delta.dims) != expected:
            raise ContractViolation(f"delta dims {delta.dims} != {expected}")
        h = _hidden(params, batch.tokens, layer)
        mask = batch.perturb_mask[..., None].astype(h.data.dtype)
        logits = _finish(params, h + delta * mask, layer)
    return ad.cross_entropy(logits, batch.targets, batch.loss_mask)


def lm_loss(params: ParameterSet, example: Example) -> Tensor:
    """Mean cross-entropy over the response tokens of one example."""
    return batch_losses(params, make_batch([example], params.config)).reshape(())


def _selection(mask_row: np.ndarray, dtype) -> np.ndarray:
    idx = np.flatnonzero(mask_row)
    sel = np.zeros((mask_row.size, idx.size), dtype=dtype)
    sel[idx, np.arange(idx.size)] = 1.0
    return sel


def perturbed_lm_loss(params: ParameterSet, example: Example, delta: Tensor, inject_layer: int,
                      positions: str = "prompt") -> Tensor:
    """Response-masked loss with ``delta`` (masked positions, d_model) added after ``inject_layer``."""
    batch = make_batch([example], params.config, positions)
    n_masked = int(batch.perturb_mask[0].sum())
    if tuple(delta.dims) != (n_masked, params.config.d_model):
        raise ContractViolation(f"delta dims {delta.dims} != {(n_masked, params.config.d_model)}")
    # a 0/1 selection matmul scatters delta rows exactly into the full sequence
    full = Tensor(_selection(batch.perturb_mask[0], delta.data.dtype), dtype=delta.data.dtype) @ delta
    full = full.reshape((1,) + full.dims)
    return batch_losses(params, batch, full, inject_layer).reshape(())


def sequence_embedding(params: ParameterSet, tokens, layer: int | None = None) -> np.ndarray:
    """Hidden state of the last token after block ``layer``."""
    cfg = params.config
    layer = cfg.default_embedding_layer if layer is None else layer
    if not 1 <= layer <= cfg.n_layers:
        raise ContractViolation(f"embedding layer {layer} outside [1, {cfg.n_layers}]")
    h = forward_hidden(params, list(tokens), layer).activations
    return h.data[-1].copy()


def sequence_embeddings(params: ParameterSet, prompts: Sequence[Sequence[int]], layer: int | None = None) -> np.ndarray:
    """Batched :func:`sequence_embedding`; rows align with ``prompts``."""
    cfg = params.config
    layer = cfg.default_embedding_layer if layer is None else layer
    if not 1 <= layer <= cfg.n_layers:
        raise ContractViolation(f"embedding layer {layer} outside [1, {cfg.n_layers}]")
    tokens, lengths = _pad(prompts)
    _check_tokens(cfg, tokens)
    h = _hidden(params, tokens, layer).data
    return h[np.arange(len(prompts)), lengths - 1].copy()


# --------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "nucleus"
    p: float = 0.9
    temperature: float = 1.0
    max_new: int = 8

    def __post_init__(self):
        if self.mode not in ("greedy", "nucleus"):
            raise ContractViolation(f"decode.mode must be 'greedy' or 'nucleus', got {self.mode!r}")
        if self.max_new < 1:
            raise ContractViolation("decode.max_new must be >= 1")
        if not 0 < self.p <= 1 or self.temperature <= 0:
            raise ContractViolation("decode.p must lie in (0, 1] and temperature be positive")


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if np.any(lengths < 1):
        raise InputError("empty prompt")
    out = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def _nucleus_pick(logits: np.ndarray, p: float, temperature: float, gen: np.random.Generator) -> int:
    z = logits.astype(np.float64) / temperature
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep = order[: int(np.searchsorted(cum, p) + 1)]
    kept = probs[keep] / probs[keep].sum()
    return int(keep[gen.choice(keep.size, p=kept)])


def generate_batch(params: ParameterSet, prompts: Sequence[Sequence[int]], decode: DecodeConfig = DecodeConfig(),
                   rng: RngStream | None = None, eos: int = EOS) -> list[list[int]]:
    """Decode every prompt; returns new tokens only, EOS excluded."""
    cfg = params.config
    seqs = [list(p) for p in prompts]
    for s in seqs:
        if not s or len(s) >= cfg.max_seq:
            raise InputError(f"prompt length {len(s)} outside [1, {cfg.max_seq - 1}]")
    gens = None
    if decode.mode == "nucleus":
        rng = rng or RngStream(0)
        gens = [rng.child("decode", i).generator() for i in range(len(seqs))]
    outputs: list[list[int]] = [[] for _ in seqs]
    active = list(range(len(seqs)))
    for _ in range(decode.max_new):
        active = [i for i in active if len(seqs[i]) < cfg.max_seq]
        if not active:
            break
        tokens, lengths = _pad([seqs[i] for i in active])
        _check_tokens(cfg, tokens)
        logits = forward(params, tokens).data[np.arange(len(active)), lengths - 1]
        still = []
        for row, i in enumerate(active):
            if decode.mode == "greedy":
                tok = int(np.argmax(logits[row]))
            else:
                tok = _nucleus_pick(logits[row], decode.p, decode.temperature, gens[i])
            seqs[i].append(tok)
            if tok == eos:
                continue
            outputs[i].append(tok)
            still.append(i)
        active = still
    return outputs


def generate(params: ParameterSet, prompt: Sequence[int], decode: DecodeConfig = DecodeConfig(),
             rng: RngStream | None = None, eos: int = EOS) -> list[int]:
    return generate_batch(params, [prompt], decode, rng, eos)[0]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory: str | Path, params: ParameterSet, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus ``weights.bin`` (little-endian, index order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtype = next(iter(params.values())).data.dtype
    le = dtype.newbyteorder("<")
    index, offset, blobs = [], 0, []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype=le).tobytes()
        index.append({"name": name, "dims": list(t.dims), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": asdict(params.config),
        "dtype": np.dtype(dtype).name,
        "tensors": index,
    }
    manifest.update(extra or {})
    (directory / "weights.bin").write_bytes(b"".join(blobs))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[ParameterSet, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise InputError(f"unsupported checkpoint format {manifest.get('format_version')}")
    cfg = ModelConfig(**manifest["model_config"])
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    blob = (directory / "weights.bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["dims"])) if entry["dims"] else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"])
        native = arr.astype(dtype.newbyteorder("="), copy=True).reshape(entry["dims"])
        tensors[entry["name"]] = Tensor(native, dtype=native.dtype)
    expected = parameter_shapes(cfg)
    if set(tensors) != set(expected) or any(tuple(tensors[k].dims) != v for k, v in expected.items()):
        raise InputError("checkpoint tensors do not match the model config")
    return ParameterSet(cfg, tensors), manifest
