"""Tokenisation, a small pre-norm transformer encoder, and sentence pooling."""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError, ParameterError, ParseError
from .rng import STREAM_INIT, RngState
from .tensor import Tensor

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

TOKENIZATION_MODES = ("character", "whitespace")
POOLING_STRATEGIES = ("cls", "mean")


@dataclass(frozen=True)
class EncoderConfig:
    tokenization: str = "character"
    max_vocab: int = 8000  # includes the 4 reserved ids
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    dropout_rate: float = 0.1
    max_seq_len: int = 64
    pooling: str = "cls"
    # CLS pooling at eval time: keep the affine+tanh pooler used in training
    eval_pooler: bool = True
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.tokenization not in TOKENIZATION_MODES:
            raise ParameterError(f"tokenization must be one of {TOKENIZATION_MODES}, got {self.tokenization!r}")
        if self.pooling not in POOLING_STRATEGIES:
            raise ParameterError(f"pooling must be one of {POOLING_STRATEGIES}, got {self.pooling!r}")
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ParameterError("max_seq_len must leave room for [CLS] and [SEP]")
        if self.max_vocab <= len(RESERVED_TOKENS):
            raise ParameterError(f"max_vocab must exceed {len(RESERVED_TOKENS)} reserved ids")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def tokenize(sentence: str, mode: str) -> list[str]:
    if mode == "character":
        return list(sentence)
    return sentence.split()


@dataclass
class Vocabulary:
    tokens: list[str]  # id -> token
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ContractError("vocabulary must start with the reserved tokens")
        index = {tok: i for i, tok in enumerate(tokens) if i >= len(RESERVED_TOKENS)}
        if len(index) != len(tokens) - len(RESERVED_TOKENS):
            raise ContractError("duplicate token in vocabulary")
        return cls(tokens, index)

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{i}\t{json.dumps(tok, ensure_ascii=False)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                try:
                    i, tok = line.rstrip("\n").split("\t", 1)
                    tok = json.loads(tok)
                except ValueError as exc:
                    raise ParseError(f"bad vocabulary entry: {exc}", lineno, path) from None
                if int(i) != len(tokens):
                    raise ParseError(f"expected id {len(tokens)}, got {i}", lineno, path)
                tokens.append(tok)
        return cls.from_tokens(tokens)


def build_vocab(corpus: Iterable[str], config: EncoderConfig) -> Vocabulary:
    """Rank tokens by (frequency desc, token asc) and keep the top ``max_vocab - 4``."""
    counts = Counter()
    n_sentences = 0
    for sentence in corpus:
        n_sentences += 1
        counts.update(tokenize(sentence, config.tokenization))
    if n_sentences == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED_TOKENS:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: config.max_vocab - len(RESERVED_TOKENS)]]
    return Vocabulary.from_tokens(list(RESERVED_TOKENS) + keep)


@dataclass
class EncodedBatch:
    ids: np.ndarray  # int64 [batch, max_seq_len]
    mask: np.ndarray  # float64 {0,1} [batch, max_seq_len]

    def __len__(self):
        return self.ids.shape[0]


def encode_batch(sentences: Sequence[str], vocab: Vocabulary, max_seq_len: int, mode: str = "character") -> EncodedBatch:
    ids = np.full((len(sentences), max_seq_len), PAD, dtype=np.int64)
    for row, sentence in enumerate(sentences):
        toks = [vocab.id_of(t) for t in tokenize(sentence, mode)][: max_seq_len - 2]
        seq = [CLS, *toks, SEP]
        ids[row, : len(seq)] = seq
    return EncodedBatch(ids, (ids != PAD).astype(np.float64))


def _param_shapes(config: EncoderConfig, vocab_size: int) -> dict[str, tuple]:
    d, f = config.d_model, config.d_ff
    shapes = {
        "embeddings.token": (vocab_size, d),
        "embeddings.position": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.gain": (d,),
                p + "ln1.bias": (d,),
                p + "attn.q.weight": (d, d),
                p + "attn.q.bias": (d,),
                p + "attn.k.weight": (d, d),
                p + "attn.k.bias": (d,),
                p + "attn.v.weight": (d, d),
                p + "attn.v.bias": (d,),
                p + "attn.out.weight": (d, d),
                p + "attn.out.bias": (d,),
                p + "ln2.gain": (d,),
                p + "ln2.bias": (d,),
                p + "ffn.in.weight": (d, f),
                p + "ffn.in.bias": (f,),
                p + "ffn.out.weight": (f, d),
                p + "ffn.out.bias": (d,),
            }
        )
    shapes.update(
        {
            "final_norm.gain": (d,),
            "final_norm.bias": (d,),
            "pooler.weight": (d, d),
            "pooler.bias": (d,),
        }
    )
    return shapes


class EncoderModel:
    def __init__(self, config: EncoderConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        expected = _param_shapes(config, len(vocab))
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ContractError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def initialize(cls, config: EncoderConfig, vocab: Vocabulary, seed: int) -> "EncoderModel":
        """N(0, init_std) for embeddings and weights; zeros for biases; LN gain 1."""
        rng = RngState(seed, STREAM_INIT)
        params = {}
        for name, shape in _param_shapes(config, len(vocab)).items():
            if name.endswith(".gain"):
                values = np.ones(shape)
            elif name.endswith(".bias"):
                values = np.zeros(shape)
            else:
                values = rng.normal(shape, config.init_std)
            params[name] = Tensor(values, requires_grad=True)
        return cls(config, vocab, params)

    def parameters(self):
        return self.params.items()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].values[...] = v

    def encode(self, sentences: Sequence[str]) -> EncodedBatch:
        return encode_batch(sentences, self.vocab, self.config.max_seq_len, self.config.tokenization)

    def forward(self, batch: EncodedBatch, rng: RngState | None = None, training: bool = False) -> Tensor:
        return forward(self, batch, rng, training)

    def embed(self, sentences: Sequence[str], rng: RngState | None = None, training: bool = False, strategy: str | None = None) -> Tensor:
        """Encode, run the encoder and pool in one call."""
        batch = self.encode(sentences)
        hidden = forward(self, batch, rng, training)
        strategy = strategy or self.config.pooling
        use_pooler = training or self.config.eval_pooler
        return pool(hidden, batch.mask, strategy, self.pooler() if use_pooler else None)

    def pooler(self):
        return self.params["pooler.weight"], self.params["pooler.bias"]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def forward(model: EncoderModel, batch: EncodedBatch, rng: RngState | None, training: bool) -> Tensor:
    """Token embeddings ``[batch, seq, d_model]``.

    Trailing all-PAD columns are trimmed before the stack runs; PAD keys are
    masked out of attention and PAD queries get zero attention weight, so the
    trimmed width changes nothing for real tokens.
    """
    cfg, p = model.config, model.params
    ids, mask = batch.ids, batch.mask
    if ids.size and (ids.min() < 0 or ids.max() >= len(model.vocab)):
        raise ContractError(f"token id out of range [0, {len(model.vocab)}): min={ids.min()} max={ids.max()}")
    if ids.shape[1] > cfg.max_seq_len:
        raise ContractError(f"sequence length {ids.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ContractError("training-mode forward with dropout needs an RngState")
    used = np.flatnonzero(mask.any(axis=0))
    width = int(used[-1]) + 1 if used.size else 1
    ids, mask = ids[:, :width], mask[:, :width]
    B, L = ids.shape
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h
    rate = cfg.dropout_rate

    x = T.embedding(p["embeddings.token"], ids) + p["embeddings.position"][:L]
    x = T.dropout(x, rate, rng, training)
    x = x.reshape(B * L, d)

    key_bias = Tensor(((mask - 1.0) * 1e9)[:, None, None, :])  # 0 on tokens, -1e9 on PAD
    query_keep = Tensor(mask[:, None, :, None])
    scale = 1.0 / math.sqrt(dh)

    def heads(t):
        return t.reshape(B, L, h, dh).transpose(0, 2, 1, 3)

    for i in range(cfg.n_layers):
        q_ = f"layers.{i}."
        a = T.layer_norm(x, p[q_ + "ln1.gain"], p[q_ + "ln1.bias"], cfg.layer_norm_eps)
        q = heads(_linear(a, p[q_ + "attn.q.weight"], p[q_ + "attn.q.bias"]))
        k = heads(_linear(a, p[q_ + "attn.k.weight"], p[q_ + "attn.k.bias"]))
        v = heads(_linear(a, p[q_ + "attn.v.weight"], p[q_ + "attn.v.bias"]))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * scale + key_bias
        attn = T.softmax(scores) * query_keep
        attn = T.dropout(attn, rate, rng, training)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B * L, d)
        x = x + _linear(ctx, p[q_ + "attn.out.weight"], p[q_ + "attn.out.bias"])

        a = T.layer_norm(x, p[q_ + "ln2.gain"], p[q_ + "ln2.bias"], cfg.layer_norm_eps)
        ff = T.gelu(_linear(a, p[q_ + "ffn.in.weight"], p[q_ + "ffn.in.bias"]))
        ff = _linear(ff, p[q_ + "ffn.out.weight"], p[q_ + "ffn.out.bias"])
        x = x + T.dropout(ff, rate, rng, training)

    x = T.layer_norm(x, p["final_norm.gain"], p["final_norm.bias"], cfg.layer_norm_eps)
    return x.reshape(B, L, d)


def pool(token_embeddings: Tensor, mask: np.ndarray, strategy: str, pooler=None) -> Tensor:
    """Sentence vectors ``[batch, d_model]``.

    ``cls`` takes position 0 and, when ``pooler=(weight, bias)`` is given,
    passes it through ``tanh(x W + b)``. ``mean`` averages non-PAD positions.
    """
    mask = np.asarray(mask, dtype=np.float64)[:, : token_embeddings.shape[1]]
    if strategy == "cls":
        out = token_embeddings[:, 0, :]
        if pooler is not None:
            out = T.tanh(_linear(out, *pooler))
        return out
    if strategy == "mean":
        counts = mask.sum(axis=1)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise ContractError(f"mean pooling over an all-PAD row (row {int(empty[0])})")
        weights = Tensor((mask / counts[:, None])[:, :, None])
        return (token_embeddings * weights).sum(axis=1)
    raise ParameterError(f"unknown pooling strategy {strategy!r}")


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SIMCSE-LAB-CKPT"
CHECKPOINT_VERSION = 1


def _config_to_text(config: EncoderConfig) -> list[str]:
    return [f"{f.name}={getattr(config, f.name)!r}" for f in dataclasses.fields(config)]


def _config_from_text(lines: list[str]) -> EncoderConfig:
    import ast

    kwargs = {}
    for line in lines:
        key, _, value = line.partition("=")
        kwargs[key] = ast.literal_eval(value)
    return EncoderConfig(**kwargs)


def save_checkpoint(model: EncoderModel, path) -> None:
    """Header, then vocabulary, then little-endian float64 parameter blocks."""
    cfg_lines = _config_to_text(model.config)
    out = bytearray()
    out += CHECKPOINT_MAGIC + b"\n"
    out += f"version {CHECKPOINT_VERSION}\n".encode()
    out += f"config {len(cfg_lines)}\n".encode()
    for line in cfg_lines:
        out += (line + "\n").encode()
    out += f"vocab {len(model.vocab)}\n".encode()
    for i, tok in enumerate(model.vocab.tokens):
        out += f"{i}\t{json.dumps(tok, ensure_ascii=True)}\n".encode()
    names = sorted(model.params)
    out += f"params {len(names)}\n".encode()
    for name in names:
        values = np.ascontiguousarray(model.params[name].values, dtype="<f8")
        shape = " ".join(str(n) for n in values.shape)
        out += f"{name} {values.ndim} {shape}\n".encode()
        out += values.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> EncoderModel:
    data = Path(path).read_bytes()
    pos = 0
    lineno = 0

    def readline() -> str:
        nonlocal pos, lineno
        end = data.find(b"\n", pos)
        if end < 0:
            raise ParseError("truncated checkpoint", lineno + 1, path)
        line = data[pos:end].decode("utf-8")
        pos = end + 1
        lineno += 1
        return line

    def header(expected: str) -> int:
        key, _, n = readline().partition(" ")
        if key != expected:
            raise ParseError(f"expected section {expected!r}, got {key!r}", lineno, path)
        return int(n)

    if readline().encode() != CHECKPOINT_MAGIC:
        raise ParseError("not a simcse-lab checkpoint (bad magic)", 1, path)
    version = header("version")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", lineno, path)
    config = _config_from_text([readline() for _ in range(header("config"))])
    tokens = []
    for _ in range(header("vocab")):
        _, tok = readline().split("\t", 1)
        tokens.append(json.loads(tok))
    vocab = Vocabulary.from_tokens(tokens)
    params = {}
    for _ in range(header("params")):
        fields = readline().split(" ")
        name, ndim = fields[0], int(fields[1])
        shape = tuple(int(n) for n in fields[2 : 2 + ndim])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise ParseError(f"truncated payload for {name}", lineno, path)
        values = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        pos += nbytes
        params[name] = Tensor(values.astype(np.float64), requires_grad=True)
    return EncoderModel(config, vocab, params)
