"""Export token-level and CLS embeddings from a frozen pretrained encoder.

Reads a tab-separated corpus of `id<TAB>label<TAB>text` rows, runs a frozen
transformer, and writes one DHEM file: per document, the last hidden layer
vector of every ordinary token plus the first-position (CLS) vector. Special
tokens other than CLS never enter the token matrix.

Usage:
    export.py --input corpus.tsv --model bert-base-uncased --out corpus.dhem \
              --max-len 512 --batch 32
"""
from __future__ import annotations

import argparse
import logging
import re
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger("exporter")

EMBED_MAGIC = b"DHEM"
EMBED_VERSION = 1


@dataclass(frozen=True)
class RawCorpusRow:
    id: int
    label: int
    text: str


@dataclass
class ExportConfig:
    model: str
    out_path: Path
    max_len: int = 512
    batch_size: int = 32
    threads: int = 1


class ExportError(Exception):
    """Configuration or input problems that abort the export."""


_CONTRACTIONS = (
    (r"\'s", " 's"), (r"\'ve", " 've"), (r"n\'t", " n't"),
    (r"\'re", " 're"), (r"\'d", " 'd"), (r"\'ll", " 'll"),
)


def clean_text(text: str) -> str:
    """Lowercase, strip exotic characters, split punctuation and contractions."""
    text = re.sub(r"[^A-Za-z0-9(),!?\'\`]", " ", text)
    for pattern, repl in _CONTRACTIONS:
        text = re.sub(pattern, repl, text)
    for ch in (",", "!", "(", ")", "?"):
        text = text.replace(ch, f" {ch} ")
    return re.sub(r"\s{2,}", " ", text).strip().lower()


def read_rows(path) -> list[RawCorpusRow]:
    rows = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                raise ExportError(f"{path}:{lineno}: expected id<TAB>label<TAB>text")
            try:
                doc_id, label = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ExportError(f"{path}:{lineno}: {exc}") from exc
            if doc_id < 0 or doc_id in seen:
                raise ExportError(f"{path}:{lineno}: bad or duplicate id {doc_id}")
            seen.add(doc_id)
            rows.append(RawCorpusRow(id=doc_id, label=label, text=parts[2]))
    return rows


def write_embeddings(path, dim: int, records) -> None:
    """records: iterable of (id, label, tokens float32 (T, dim), cls float32 (dim,))."""
    import numpy as np

    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", EMBED_VERSION, dim, len(records)))
        for doc_id, label, tokens, cls in records:
            tokens = np.ascontiguousarray(tokens, dtype="<f4")
            cls = np.ascontiguousarray(cls, dtype="<f4")
            fh.write(struct.pack("<IiI", doc_id, label, tokens.shape[0]))
            fh.write(cls.tobytes())
            fh.write(tokens.tobytes())


def export(rows: list[RawCorpusRow], cfg: ExportConfig) -> Path:
    """Run the frozen encoder over cleaned rows and write the DHEM file."""
    import torch
    from transformers import AutoModel, AutoTokenizer

    torch.set_num_threads(max(1, cfg.threads))
    try:
        tokenizer = AutoTokenizer.from_pretrained(cfg.model)
        model = AutoModel.from_pretrained(cfg.model)
    except Exception as exc:
        raise ExportError(f"cannot load model/tokenizer {cfg.model!r}: {exc}") from exc
    model.eval()
    dim = int(model.config.hidden_size)
    context = getattr(model.config, "max_position_embeddings", cfg.max_len)
    if cfg.max_len > context:
        raise ExportError(
            f"max_len {cfg.max_len} exceeds the model context window {context}"
        )

    kept: list[RawCorpusRow] = []
    skipped = 0
    for row in rows:
        if clean_text(row.text):
            kept.append(row)
        else:
            skipped += 1
            log.warning("doc %d: empty after cleaning, skipped", row.id)

    records = []
    truncated = 0
    with torch.no_grad():
        for lo in range(0, len(kept), cfg.batch_size):
            chunk = kept[lo : lo + cfg.batch_size]
            texts = [clean_text(row.text) for row in chunk]
            enc = tokenizer(
                texts,
                padding=True,
                truncation=True,
                max_length=cfg.max_len,
                return_tensors="pt",
                return_special_tokens_mask=True,
                return_overflowing_tokens=False,
            )
            special = enc.pop("special_tokens_mask")
            hidden = model(**enc).last_hidden_state  # (batch, seq, dim)
            for i, row in enumerate(chunk):
                attn = enc["attention_mask"][i].bool()
                ordinary = attn & (special[i] == 0)
                tokens = hidden[i][ordinary].cpu().numpy()
                cls = hidden[i][0].cpu().numpy()
                if tokens.shape[0] == 0:
                    skipped += 1
                    log.warning("doc %d: no ordinary tokens, skipped", row.id)
                    continue
                full_len = len(tokenizer(clean_text(row.text))["input_ids"])
                if full_len > cfg.max_len:
                    truncated += 1
                records.append((row.id, row.label, tokens, cls))
    if truncated:
        log.warning("%d documents truncated to %d positions", truncated, cfg.max_len)
    if skipped:
        log.warning("%d documents skipped", skipped)
    if not records:
        raise ExportError("no documents survived cleaning and tokenization")
    write_embeddings(cfg.out_path, dim, records)
    log.info("wrote %d documents, dim=%d, to %s", len(records), dim, cfg.out_path)
    return Path(cfg.out_path)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--input", required=True, help="TSV corpus: id, label, text")
    parser.add_argument("--model", required=True, help="model name or checkpoint path")
    parser.add_argument("--out", required=True, help="output embeddings path")
    parser.add_argument("--max-len", type=int, default=512, dest="max_len")
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    try:
        rows = read_rows(args.input)
        export(
            rows,
            ExportConfig(
                model=args.model,
                out_path=Path(args.out),
                max_len=args.max_len,
                batch_size=args.batch,
                threads=args.threads,
            ),
        )
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
