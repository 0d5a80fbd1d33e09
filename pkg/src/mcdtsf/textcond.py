"""Text conditioning: prompt assembly, per-window document selection, and
embedding providers that turn prompts into token-level context matrices.

Two providers are available. :class:`HashTokenProvider` hashes words into a
table of learned vectors and is trained with the denoiser.
:class:`PrecomputedProvider` serves matrices produced offline by an external
encoder, keyed by window id.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .featenc import Frequency, parse_date, temporal_embedding

NULL_ID = "__null__"
TEXT_LOOKBACK = 36

HEADER = (
    "Below is historical reporting information over the past {history_length} "
    "{sampling_period}s concerning the {target_variable}. Based on these reports, "
    "predict the potential trends and anomalies of the {target_variable} for the next "
    "{prediction_length} {sampling_period}s."
)


@dataclass(frozen=True)
class TextDocument:
    start_date: dt.date
    end_date: dt.date
    report: str

    def __post_init__(self):
        object.__setattr__(self, "start_date", parse_date(self.start_date))
        object.__setattr__(self, "end_date", parse_date(self.end_date))
        if self.start_date > self.end_date:
            raise ValueError(f"document starts after it ends: {self.start_date} > {self.end_date}")
        if not self.report.strip():
            raise ValueError("document report is empty")

    def to_json(self) -> dict:
        return {"start_date": self.start_date.isoformat(), "end_date": self.end_date.isoformat(),
                "report": self.report}


def load_documents(path) -> list[TextDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(TextDocument(obj["start_date"], obj["end_date"], obj["report"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad document record ({exc})") from exc
    return sorted(docs, key=lambda d: (d.start_date, d.end_date))


def save_documents(docs: Sequence[TextDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps(d.to_json()) + "\n")


def assemble_prompt(docs: Sequence[TextDocument], history_length: int, sampling_period: str,
                    target_variable: str, prediction_length: int) -> str:
    header = HEADER.format(history_length=history_length, sampling_period=sampling_period,
                           target_variable=target_variable, prediction_length=prediction_length)
    lines = [f"{d.start_date.isoformat()} to {d.end_date.isoformat()}: {d.report.rstrip().rstrip('.')}."
             for d in docs]
    return "\n".join([header, *lines]) if lines else header


def select_documents(docs: Sequence[TextDocument], end_date, freq,
                     lookback: int = TEXT_LOOKBACK) -> list[TextDocument]:
    """Documents overlapping the ``lookback`` intervals that end at ``end_date``.

    The window is the closed date range from ``lookback - 1`` intervals before
    ``end_date`` up to ``end_date``; any overlap includes the document.
    """
    end = parse_date(end_date)
    freq = Frequency.parse(freq)
    start = freq.step(end, -(lookback - 1))
    return [d for d in docs if d.start_date <= end and d.end_date >= start]


def attach_text(end_date, freq, docs: Sequence[TextDocument], history_length: int,
                prediction_length: int, target_variable: str,
                sampling_period: str | None = None) -> str:
    freq = Frequency.parse(freq)
    chosen = select_documents(docs, end_date, freq)
    return assemble_prompt(chosen, history_length, sampling_period or freq.period_word,
                           target_variable, prediction_length)


_TOKEN = re.compile(r"\d{4}-\d{2}-\d{2}|[a-z]+|\d+|[^\sa-z\d]")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashTokenProvider(nn.Module):
    """Words hashed (crc32) into ``vocab`` learned vectors.

    A fixed sinusoidal code of each token's distance from the end of the
    prompt is added so recent report lines are distinguishable. Prompts
    longer than ``max_tokens`` keep their first line (the header) and lose
    the oldest report lines first.
    """

    kind = "hash"

    def __init__(self, d_text: int = 32, vocab: int = 4096, max_tokens: int = 512,
                 recency: bool = True):
        super().__init__()
        self.d_text, self.vocab, self.max_tokens, self.recency = d_text, vocab, max_tokens, recency
        self.table = nn.Embedding(vocab, d_text)
        nn.init.normal_(self.table.weight, std=1.0)
        self._cache: dict[str, torch.Tensor] = {}

    def _hash(self, toks) -> list[int]:
        return [zlib.crc32(t.encode()) % self.vocab for t in toks]

    def token_ids(self, text: str) -> torch.Tensor:
        ids = self._cache.get(text)
        if ids is None:
            head, _, body = text.partition("\n")
            head_ids, body_ids = self._hash(tokenize(head)), self._hash(tokenize(body))
            room = max(self.max_tokens - len(head_ids), 0)
            kept = (head_ids + body_ids[len(body_ids) - room:]) if room else head_ids[:self.max_tokens]
            ids = torch.tensor(kept, dtype=torch.long)
            self._cache[text] = ids
        return ids

    def batch(self, keys: Sequence[str]):
        """Padded ``(B, T, d_text)`` embeddings and ``(B, T)`` padding mask."""
        ids = [self.token_ids(k) for k in keys]
        lens = torch.tensor([len(i) for i in ids])
        T = int(lens.max()) if len(ids) else 0
        padded = torch.zeros(len(ids), T, dtype=torch.long)
        for row, i in enumerate(ids):
            padded[row, :len(i)] = i
        pad = torch.arange(T)[None, :] >= lens[:, None]
        emb = self.table(padded)
        if self.recency and T:
            dist = (lens[:, None] - 1 - torch.arange(T)[None, :]).clamp(min=0)
            code = temporal_embedding(torch.arange(T), self.d_text).to(emb.dtype)
            emb = emb + code[dist]
        return emb.masked_fill(pad[..., None], 0.0), pad

    def forward(self, keys: Sequence[str]) -> list[torch.Tensor]:
        emb, pad = self.batch(keys)
        return [e[~p] for e, p in zip(emb, pad)]


class UnknownDocumentError(KeyError):
    pass


class PrecomputedProvider(nn.Module):
    """Serves ``n_tokens x d_text`` matrices loaded from an ``.npz`` or ``.csv`` file.

    CSV layout: header ``id,e0,e1,...``; consecutive rows sharing an id form
    that id's token sequence. Both formats must define the ``__null__`` id.
    """

    kind = "precomputed"

    def __init__(self, table: dict[str, np.ndarray], max_tokens: int = 512):
        super().__init__()
        if NULL_ID not in table:
            raise ValueError(f"embedding table lacks the reserved {NULL_ID!r} entry")
        widths = {np.atleast_2d(v).shape[1] for v in table.values()}
        if len(widths) != 1:
            raise ValueError(f"inconsistent embedding widths {sorted(widths)}")
        self.d_text = widths.pop()
        self.max_tokens = max_tokens
        self.table = {k: torch.as_tensor(np.atleast_2d(v), dtype=torch.float64) for k, v in table.items()}

    @classmethod
    def from_file(cls, path, max_tokens: int = 512) -> "PrecomputedProvider":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as z:
                table = {k: z[k] for k in z.files}
        else:
            rows: dict[str, list[list[float]]] = {}
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                next(reader)
                for rec in reader:
                    if rec:
                        rows.setdefault(rec[0], []).append([float(x) for x in rec[1:]])
            table = {k: np.array(v) for k, v in rows.items()}
        return cls(table, max_tokens=max_tokens)

    def null_rows(self) -> torch.Tensor:
        return self.table[NULL_ID]

    def forward(self, keys: Sequence[str]) -> list[torch.Tensor]:
        out = []
        for key in keys:
            try:
                out.append(self.table[key][-self.max_tokens:])
            except KeyError:
                raise UnknownDocumentError(f"no precomputed embedding for id {key!r}") from None
        return out


class TextConditioner(nn.Module):
    """Wraps a provider and owns the learned single-token null context."""

    def __init__(self, provider: nn.Module):
        super().__init__()
        self.provider = provider
        init = torch.randn(1, provider.d_text) * 0.02
        if isinstance(provider, PrecomputedProvider):
            init = provider.null_rows().mean(0, keepdim=True).float()
        self.null = nn.Parameter(init)

    @property
    def d_text(self) -> int:
        return self.provider.d_text

    def embed_text(self, key: str) -> torch.Tensor:
        """Token matrix for one prompt (or window id); empty input gives the null context."""
        if not key:
            return self.null
        return self.provider([key])[0].to(self.null.dtype)

    def forward(self, keys: Sequence[str | None], uncond: torch.Tensor | None = None):
        """Padded ``(B, T, d_text)`` contexts and a ``(B, T)`` key-padding mask
        (True marks padding). Rows flagged in ``uncond`` or with empty keys get
        the null context."""
        n = len(keys)
        use_null = [not k for k in keys]
        if uncond is not None:
            use_null = [a or bool(b) for a, b in zip(use_null, uncond.tolist())]
        live = [i for i, z in enumerate(use_null) if not z]
        dtype = self.null.dtype
        if not live:
            return self.null.expand(n, 1, self.d_text), torch.zeros(n, 1, dtype=torch.bool)
        if hasattr(self.provider, "batch"):
            emb, pad_live = self.provider.batch([keys[i] for i in live])
            emb = emb.to(dtype)
        else:
            seqs = self.provider([keys[i] for i in live])
            T = max(x.shape[0] for x in seqs)
            emb = torch.zeros(len(seqs), T, self.d_text, dtype=dtype)
            pad_live = torch.ones(len(seqs), T, dtype=torch.bool)
            for r, x in enumerate(seqs):
                emb[r, :x.shape[0]] = x.to(dtype)
                pad_live[r, :x.shape[0]] = False
        T = emb.shape[1]
        # null rows: the null token in slot 0, padding elsewhere
        null_row = torch.cat([self.null, self.null.new_zeros(T - 1, self.d_text)])
        null_pad = torch.ones(T, dtype=torch.bool)
        null_pad[0] = False
        ctx = null_row.expand(n, T, self.d_text)
        pad = null_pad.expand(n, T).clone()
        idx = torch.tensor(live)
        ctx = ctx.index_put((idx,), emb)
        pad[idx] = pad_live
        return ctx, pad
