"""Compact encoder-decoder transformer with an auxiliary encoder-side MLM head.

One embedding table serves encoder input, decoder input and the decoder
output projection. The MLM head is a separate projection used only by the
MLM loss; the translation path never reads it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .noising import DAE, MLM, MT, NoisedExample


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


@dataclass
class ModelConfig:
    vocab_size: int
    layers_enc: int = 2
    layers_dec: int = 2
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    dropout: float = 0.1
    label_smoothing: float = 0.1
    mlm_label_smoothing: Optional[float] = None
    max_len: int = 256
    activation: str = "relu"
    pad_id: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# GPU-scale shapes; far too slow to train on a CPU but expressible for completeness
LARGE_MODEL = dict(layers_enc=6, layers_dec=6, d_model=1024, d_ff=4096, heads=16, dropout=0.1)
SMALL_BILINGUAL_MODEL = dict(layers_enc=3, layers_dec=3, d_model=256, d_ff=1024, heads=4)


def sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(max_len, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d_model // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.h = heads
        self.d_k = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, mask):
        # mask: bool, broadcastable to (B, h, Tq, Tk), True = attend
        B, Tq, _ = query.shape
        Tk = key.shape[1]
        q = self.q(query).view(B, Tq, self.h, self.d_k).transpose(1, 2)
        k = self.k(key).view(B, Tk, self.h, self.d_k).transpose(1, 2)
        v = self.v(key).view(B, Tk, self.h, self.d_k).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, Tq, self.h * self.d_k)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float, activation: str):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)
        self.act = F.relu if activation == "relu" else F.gelu

    def forward(self, x):
        return self.w2(self.dropout(self.act(self.w1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout, cfg.activation)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout, cfg.activation)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_mask, cross_mask):
        h = self.ln1(y)
        y = y + self.drop(self.self_attn(h, h, self_mask))
        y = y + self.drop(self.cross_attn(self.ln2(y), memory, cross_mask))
        return y + self.drop(self.ff(self.ln3(y)))


class Seq2SeqTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.embed.weight, mean=0.0, std=d**-0.5)
        self.register_buffer("pos", sinusoidal_positions(cfg.max_len, d).float(), persistent=False)
        self.emb_drop = nn.Dropout(cfg.dropout)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers_enc))
        self.enc_ln = nn.LayerNorm(d)
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers_dec))
        self.dec_ln = nn.LayerNorm(d)
        self.mlm_head = nn.Linear(d, cfg.vocab_size)
        # counts MLM batches that had no masked position
        self.empty_mlm_batches = 0

    def _embed(self, ids):
        T = ids.shape[1]
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        x = self.embed(ids) * math.sqrt(self.cfg.d_model) + self.pos[:T].to(self.embed.weight.dtype)
        return self.emb_drop(x)

    def encode(self, src):
        src_mask = (src != self.cfg.pad_id)[:, None, None, :]
        x = self._embed(src)
        for layer in self.enc_layers:
            x = layer(x, src_mask)
        return self.enc_ln(x), src_mask

    def decode(self, tgt_in, memory, src_mask):
        T = tgt_in.shape[1]
        causal = torch.ones(T, T, dtype=torch.bool, device=tgt_in.device).tril()
        self_mask = causal[None, None] & (tgt_in != self.cfg.pad_id)[:, None, None, :]
        # a padded query row would otherwise see no key at all
        self_mask = self_mask | torch.eye(T, dtype=torch.bool, device=tgt_in.device)[None, None]
        y = self._embed(tgt_in)
        for layer in self.dec_layers:
            y = layer(y, memory, self_mask, src_mask)
        return self.dec_ln(y) @ self.embed.weight.t()

    def forward(self, src, tgt_in):
        """Translation logits (B, T_tgt, V); the MLM head is not involved."""
        memory, src_mask = self.encode(src)
        return self.decode(tgt_in, memory, src_mask)

    def mlm_logits(self, src):
        memory, _ = self.encode(src)
        return self.mlm_head(memory)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


@dataclass
class Seq2SeqBatch:
    src: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    mask: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


@dataclass
class MlmBatch:
    src: torch.Tensor
    labels: torch.Tensor
    mask: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def collate_seq2seq(examples: Sequence[NoisedExample], pad_id: int, bos_id: int, eos_id: int) -> Seq2SeqBatch:
    src = pad_batch([e.input_ids for e in examples], pad_id)
    tgt_in = pad_batch([[bos_id] + list(e.target_ids) for e in examples], pad_id)
    tgt_out = pad_batch([list(e.target_ids) + [eos_id] for e in examples], pad_id)
    mask = torch.zeros(tgt_out.shape, dtype=torch.bool)
    for i, e in enumerate(examples):
        mask[i, : len(e.target_ids) + 1] = True
    return Seq2SeqBatch(src, tgt_in, tgt_out, mask)


def collate_mlm(examples: Sequence[NoisedExample], pad_id: int) -> MlmBatch:
    src = pad_batch([e.input_ids for e in examples], pad_id)
    labels = pad_batch([e.target_ids for e in examples], pad_id)
    mask = torch.zeros(src.shape, dtype=torch.bool)
    for i, e in enumerate(examples):
        mask[i, : len(e.loss_mask)] = torch.as_tensor(e.loss_mask, dtype=torch.bool)
    return MlmBatch(src, labels, mask)


def smoothed_nll_sum(logits, target, mask, eps: float):
    """Sum over masked positions of label-smoothed cross-entropy, and the position count.

    The smoothed target puts 1-eps on the gold token and eps spread uniformly
    over the whole vocabulary.
    """
    lprobs = torch.log_softmax(logits, dim=-1)
    nll = -lprobs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    smooth = -lprobs.mean(dim=-1)
    per_pos = (1.0 - eps) * nll + eps * smooth
    m = mask.to(per_pos.dtype)
    return (per_pos * m).sum(), int(mask.sum())


def _check_finite(loss, name):
    if not torch.isfinite(loss).all():
        raise NumericalError(f"non-finite {name} loss: {loss.item()}")
    return loss


def seq2seq_loss_sum(model: Seq2SeqTransformer, batch: Seq2SeqBatch):
    logits = model(batch.src, batch.tgt_in)
    return smoothed_nll_sum(logits, batch.tgt_out, batch.mask, model.cfg.label_smoothing)


def mlm_loss_sum(model: Seq2SeqTransformer, batch: MlmBatch):
    if not batch.mask.any():
        model.empty_mlm_batches += 1
        zero = model.embed.weight.sum() * 0.0
        return zero, 0
    logits = model.mlm_logits(batch.src)
    eps = model.cfg.mlm_label_smoothing
    eps = model.cfg.label_smoothing if eps is None else eps
    return smoothed_nll_sum(logits, batch.labels, batch.mask, eps)


def forward_mt(model: Seq2SeqTransformer, batch: Seq2SeqBatch):
    """Per-token log-probs and the mean label-smoothed loss over non-pad target tokens."""
    logits = model(batch.src, batch.tgt_in)
    total, n = smoothed_nll_sum(logits, batch.tgt_out, batch.mask, model.cfg.label_smoothing)
    return torch.log_softmax(logits, -1), _check_finite(total / max(n, 1), MT)


def forward_dae(model: Seq2SeqTransformer, batch: Seq2SeqBatch):
    total, n = seq2seq_loss_sum(model, batch)
    return _check_finite(total / max(n, 1), DAE)


def forward_mlm(model: Seq2SeqTransformer, batch: MlmBatch):
    total, n = mlm_loss_sum(model, batch)
    return _check_finite(total / max(n, 1), MLM)


@dataclass
class TaskLosses:
    mt: torch.Tensor
    mlm: torch.Tensor
    dae: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.mt + self.mlm + self.dae

    def as_floats(self) -> dict[str, float]:
        return {MT: float(self.mt), MLM: float(self.mlm), DAE: float(self.dae), "total": float(self.total)}


def task_losses(model: Seq2SeqTransformer, batches: dict) -> TaskLosses:
    """Mean per-token loss for each task present in ``batches``; absent tasks contribute 0."""
    zero = model.embed.weight.new_zeros(())
    mt = forward_mt(model, batches[MT])[1] if MT in batches else zero
    mlm = forward_mlm(model, batches[MLM]) if MLM in batches else zero
    dae = forward_dae(model, batches[DAE]) if DAE in batches else zero
    return TaskLosses(mt, mlm, dae)


def gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradient of ``loss`` for every named parameter (zeros where it does not flow)."""
    names, params = zip(*model.named_parameters())
    if not loss.requires_grad:
        # constant loss, e.g. an absent task
        grads = [None] * len(params)
    else:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for n, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {n}")
        out[n] = g
    return out


def flat_params(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def set_flat_params(model: nn.Module, vec: torch.Tensor) -> None:
    torch.nn.utils.vector_to_parameters(vec, model.parameters())


def translation_path_parameters(model: Seq2SeqTransformer) -> list[str]:
    return [n for n, _ in model.named_parameters() if not n.startswith("mlm_head.")]
