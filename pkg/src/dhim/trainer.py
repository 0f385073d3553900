"""Minibatch Adam training with validation-precision model selection.

Each epoch shuffles the training split from a seeded stream, takes Adam
steps on the joint loss over encoder and discriminator parameters, then
scores validation precision@100 with deterministic codes against the
training pool. The best-scoring epoch's parameters are returned; training
stops after `patience` epochs without improvement.

Everything is deterministic given (corpus, config): parameter init, batch
order, per-document sampling streams, and ordered gradient reductions.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .binarize import doc_stream, median_binarize, pack_bits, threshold_bits, write_codes
from .corpus import Corpus, Document
from .encoder import EncoderParams, forward_batch, init_encoder
from .errors import ConfigError, FormatError, NumericError
from .objective import (
    AffineHead,
    DiscriminatorParams,
    MlpHead,
    init_discriminator,
    total_loss,
)
from .retrieval import CodeIndex, evaluate

log = logging.getLogger("dhim.trainer")

CHECKPOINT_MAGIC = b"DHCK"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    code_bits: int = 32
    num_filters: int = 128
    hidden: int = 256
    windows: tuple[int, ...] = (1, 3, 5)
    disc_hidden: int = 64  # 0 = plain affine discriminators
    learning_rate: float = 3e-4
    beta: float = 0.5
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    mode: str = "stochastic"
    regularizer_on: bool = True
    grad_clip: float = 5.0
    eval_k: int = 100

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (negatives need a second document)")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")
        if self.mode not in ("stochastic", "relaxed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.code_bits < 1:
            raise ValueError("code_bits must be positive")
        return self

    @property
    def effective_beta(self) -> float:
        return self.beta if self.regularizer_on else 0.0

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "windows":
                value = ",".join(str(n) for n in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            out.append(f"{f.name}={value}")
        return out

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            raw = data[f.name]
            if f.name == "windows":
                kwargs[f.name] = tuple(int(x) for x in str(raw).split(",") if x != "")
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool) or isinstance(getattr(cls, f.name), bool):
                kwargs[f.name] = str(raw).lower() in ("true", "1", "yes")
            else:
                kwargs[f.name] = str(raw)
        return cls(**kwargs)


@dataclass
class Model:
    encoder: EncoderParams
    disc: DiscriminatorParams

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        return self.encoder.tensor_items() + self.disc.tensor_items()

    def flat(self) -> dict[str, np.ndarray]:
        return dict(self.tensor_items())


def init_model(dim: int, cfg: TrainConfig) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 1)))
    encoder = init_encoder(
        dim,
        code_bits=cfg.code_bits,
        num_filters=cfg.num_filters,
        hidden=cfg.hidden,
        windows=cfg.windows,
        rng=rng,
    )
    disc = init_discriminator(cfg.code_bits, dim, hidden=cfg.disc_hidden, rng=rng)
    return Model(encoder=encoder, disc=disc)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment tensors mirroring parameter shapes, plus the step count."""

    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            moments={k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in {name!r} at step {state.step + 1}")
    state.step += 1
    correct1 = 1.0 - ADAM_BETA1 ** state.step
    correct2 = 1.0 - ADAM_BETA2 ** state.step
    for name, value in params.items():
        m, v = state.moments[name]
        g = grads[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        value -= lr * (m / correct1) / (np.sqrt(v / correct2) + ADAM_EPS)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients when their joint L2 norm exceeds max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    encoder: EncoderParams
    disc: DiscriminatorParams
    config: TrainConfig
    val_precision: float
    epoch: int

    def save(self, path) -> Path:
        path = Path(path)
        enc = self.encoder
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(enc.windows)))
            fh.write(struct.pack(f"<{len(enc.windows)}I", *enc.windows))
            fh.write(
                struct.pack(
                    "<IIIII",
                    enc.num_filters,
                    enc.code_bits,
                    enc.hidden,
                    enc.dim,
                    self.disc.hidden,
                )
            )
            for _, tensor in self.encoder.tensor_items() + self.disc.tensor_items():
                fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
            meta = self.config.to_lines() + [
                f"val_precision={self.val_precision!r}",
                f"epoch={self.epoch}",
            ]
            fh.write(struct.pack("<I", len(meta)))
            for line in meta:
                raw = line.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a DHCK checkpoint")
        version, n_windows = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported DHCK version {version}")
        off = 12
        try:
            windows = struct.unpack_from(f"<{n_windows}I", blob, off)
            off += 4 * n_windows
            num_filters, code_bits, hidden, dim, disc_hidden = struct.unpack_from(
                "<IIIII", blob, off
            )
            off += 20
        except struct.error as exc:
            raise FormatError(f"{path}: truncated header") from exc

        def take(shape):
            nonlocal off
            count = int(np.prod(shape))
            end = off + 4 * count
            if end > len(blob):
                raise FormatError(f"{path}: truncated tensor payload")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off = end
            return arr.astype(np.float64).reshape(shape)

        conv_w, conv_b = {}, {}
        for n in windows:
            conv_w[n] = take((num_filters, n, dim))
            conv_b[n] = take((num_filters,))
        encoder = EncoderParams(
            windows=tuple(int(n) for n in windows),
            conv_w=conv_w,
            conv_b=conv_b,
            mlp_w1=take((hidden, n_windows * num_filters)),
            mlp_b1=take((hidden,)),
            mlp_w2=take((code_bits, hidden)),
            mlp_b2=take((code_bits,)),
        )
        def take_head(in_dim):
            if disc_hidden == 0:
                return AffineHead(w=take((in_dim,)), b=take((1,)))
            return MlpHead(
                w1=take((disc_hidden, in_dim)),
                b1=take((disc_hidden,)),
                w2=take((disc_hidden,)),
                b2=take((1,)),
            )

        disc = DiscriminatorParams(
            local=take_head(2 * code_bits),
            cls=take_head(dim + code_bits),
        )
        try:
            (n_meta,) = struct.unpack_from("<I", blob, off)
            off += 4
            meta: dict[str, str] = {}
            for _ in range(n_meta):
                (ln,) = struct.unpack_from("<I", blob, off)
                off += 4
                if off + ln > len(blob):
                    raise FormatError(f"{path}: truncated metadata")
                key, _, value = blob[off : off + ln].decode("utf-8").partition("=")
                meta[key] = value
                off += ln
        except struct.error as exc:
            raise FormatError(f"{path}: truncated metadata block") from exc
        if off != len(blob):
            raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
        config = TrainConfig.from_mapping(meta)
        return cls(
            encoder=encoder,
            disc=disc,
            config=config,
            val_precision=float(meta.get("val_precision", "nan")),
            epoch=int(meta.get("epoch", "0")),
        )


def _snapshot(arr: np.ndarray) -> np.ndarray:
    # Round through the f32 storage format so an in-memory checkpoint and a
    # reloaded one behave identically.
    return arr.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Training and encoding
# ---------------------------------------------------------------------------

def global_logits_for(
    encoder: EncoderParams, corpus: Corpus, docs: list[Document], chunk: int = 256
) -> np.ndarray:
    """Global logit vectors for the given documents, in list order."""
    out = np.empty((len(docs), encoder.code_bits))
    for lo in range(0, len(docs), chunk):
        part = docs[lo : lo + chunk]
        cache = forward_batch(encoder, [corpus.embeddings[d.id].tokens for d in part])
        out[lo : lo + len(part)] = cache.global_logits
    return out


def _split_index(encoder: EncoderParams, corpus: Corpus, docs: list[Document]) -> CodeIndex:
    logits = global_logits_for(encoder, corpus, docs)
    words = pack_bits(threshold_bits(logits))
    return CodeIndex(
        code_bits=encoder.code_bits,
        words=words,
        ids=np.array([d.id for d in docs], dtype=np.int64),
        labels=np.array([d.label for d in docs], dtype=np.int64),
    )


def validation_precision(encoder: EncoderParams, corpus: Corpus, k: int = 100) -> float:
    """Precision@k of validation queries against the training pool."""
    pool = _split_index(encoder, corpus, corpus.train)
    queries = _split_index(encoder, corpus, corpus.val)
    report = evaluate(queries, pool, k=min(k, len(pool)))
    return report.precision


def train(corpus: Corpus, cfg: TrainConfig, epoch_callback=None) -> ModelCheckpoint:
    """Optimize on the training split; return the best-validation checkpoint."""
    cfg.validate()
    if not corpus.train:
        raise ValueError("training split is empty")
    if not corpus.val:
        raise ValueError("validation split is empty; model selection needs one")
    model = init_model(corpus.dim, cfg)
    params = model.flat()
    state = AdamState.for_params(params)
    beta = cfg.effective_beta

    best = None
    best_precision = -np.inf
    best_epoch = 0
    stale = 0
    train_docs = list(corpus.train)
    for epoch in range(1, cfg.max_epochs + 1):
        shuffle_rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 2, epoch)))
        order = shuffle_rng.permutation(len(train_docs))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch_docs = [train_docs[i] for i in order[lo : lo + cfg.batch_size]]
            if len(batch_docs) < 2:
                continue  # a trailing singleton has no negative source
            batch = [corpus.embeddings[d.id] for d in batch_docs]
            rngs = None
            if cfg.mode == "stochastic":
                rngs = [doc_stream(cfg.seed, d.id, epoch) for d in batch_docs]
            loss, grads = total_loss(
                model.encoder, model.disc, batch, beta=beta, rng=rngs, mode=cfg.mode
            )
            clip_gradients(grads, cfg.grad_clip)
            adam_step(params, grads, state, cfg.learning_rate)
            losses.append(loss)
        precision = validation_precision(model.encoder, corpus, k=cfg.eval_k)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        log.info("epoch %d: loss=%.5f val_precision=%.4f", epoch, mean_loss, precision)
        if epoch_callback is not None:
            epoch_callback(epoch, mean_loss, precision, model)
        if precision >= best_precision:
            # Ties keep the most recent (better-converged) parameters, but
            # only strict improvement resets the early-stopping clock.
            improved = precision > best_precision
            best_precision = precision
            best_epoch = epoch
            best = {name: _snapshot(arr) for name, arr in params.items()}
            if improved:
                stale = 0
                continue
        stale += 1
        if stale > cfg.patience:
            break

    best_model = _rebuild_model(model, best)
    return ModelCheckpoint(
        encoder=best_model.encoder,
        disc=best_model.disc,
        config=cfg,
        val_precision=best_precision,
        epoch=best_epoch,
    )


def _rebuild_head(prefix: str, head, values: dict[str, np.ndarray]):
    if isinstance(head, AffineHead):
        return AffineHead(w=values[f"{prefix}_w"], b=values[f"{prefix}_b"])
    return MlpHead(
        w1=values[f"{prefix}_w1"],
        b1=values[f"{prefix}_b1"],
        w2=values[f"{prefix}_w2"],
        b2=values[f"{prefix}_b2"],
    )


def _rebuild_model(template: Model, values: dict[str, np.ndarray]) -> Model:
    enc = template.encoder
    encoder = EncoderParams(
        windows=enc.windows,
        conv_w={n: values[f"conv_w{n}"] for n in enc.windows},
        conv_b={n: values[f"conv_b{n}"] for n in enc.windows},
        mlp_w1=values["mlp_w1"],
        mlp_b1=values["mlp_b1"],
        mlp_w2=values["mlp_w2"],
        mlp_b2=values["mlp_b2"],
    )
    disc = DiscriminatorParams(
        local=_rebuild_head("disc_local", template.disc.local, values),
        cls=_rebuild_head("disc_cls", template.disc.cls, values),
    )
    return Model(encoder=encoder, disc=disc)


def encode_split(
    checkpoint: ModelCheckpoint,
    corpus: Corpus,
    split: str,
    out_path,
    median_threshold: bool = False,
) -> Path:
    """Emit deterministic codes for one split as a DHCB file ordered by doc id.

    median_threshold reproduces the ablation that binarizes the real-valued
    global features against their per-bit medians instead of at logit zero.
    """
    if checkpoint.encoder.dim != corpus.dim:
        raise ConfigError(
            f"checkpoint dimension {checkpoint.encoder.dim} != corpus dimension {corpus.dim}"
        )
    docs = sorted(corpus.split(split), key=lambda d: d.id)
    if not docs:
        raise ValueError(f"split {split!r} is empty")
    logits = global_logits_for(checkpoint.encoder, corpus, docs)
    if median_threshold:
        codes = median_binarize(logits)
        words = np.stack([c.packed for c in codes])
    else:
        words = pack_bits(threshold_bits(logits))
    ids = np.array([d.id for d in docs], dtype=np.uint32)
    write_codes(out_path, checkpoint.encoder.code_bits, ids, words)
    return Path(out_path)
