"""Encoder over the user history and the bidirectional masked-diffusion decoder.

The encoder embeds each history item by concatenating its per-digit SID
embeddings, projecting to ``d_m`` and adding a positional embedding.  The
decoder reads ``n`` slots, each either a visible digit or the mask token,
self-attends across all slots without a causal mask, cross-attends to the
encoder output and emits one categorical distribution per digit.

Cross-attention keys/values depend only on the encoder output, so they are
computed once per history (:class:`EncoderState`) and reused by every view
and every decoding step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from sidiff.errors import ConfigError, DataError, FormatError
from sidiff.fileio import atomic_write_bytes

CHECKPOINT_MAGIC = b"SIDM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_m: int = 32
    d_ff: int = 64
    heads: int = 2
    encoder_layers: int = 1
    decoder_layers: int = 2
    n: int = 3
    M: int = 4
    L_input: int = 20
    dropout: float = 0.1

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name == "dropout":
                continue
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.d_m % self.heads:
            raise ConfigError(f"d_m={self.d_m} is not divisible by heads={self.heads}")

    @property
    def d_e(self) -> int:
        # the item projection absorbs any excess when n does not divide d_m
        return -(-self.d_m // self.n)

    @property
    def mask_token(self) -> int:
        return self.M


class Attention(nn.Module):
    def __init__(self, d_m: int, heads: int):
        super().__init__()
        self.heads = heads
        self.dh = d_m // heads
        self.q = nn.Linear(d_m, d_m)
        self.k = nn.Linear(d_m, d_m)
        self.v = nn.Linear(d_m, d_m)
        self.o = nn.Linear(d_m, d_m)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.dh).transpose(1, 2)

    def project_kv(self, mem: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(mem)), self._split(self.v(mem))

    def forward(
        self,
        x: Tensor,
        kv: tuple[Tensor, Tensor] | None = None,
        key_valid: Tensor | None = None,
    ) -> Tensor:
        if kv is None:
            kv = self.project_kv(x)
        k, v = kv
        q = self._split(self.q(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_m: int, d_ff: int, dropout: float):
        super().__init__()
        self.up = nn.Linear(d_m, d_ff)
        self.down = nn.Linear(d_ff, d_m)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(self.drop(F.gelu(self.up(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_m)
        self.attn = Attention(cfg.d_m, cfg.heads)
        self.ln2 = nn.LayerNorm(cfg.d_m)
        self.ff = FeedForward(cfg.d_m, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, key_valid: Tensor) -> Tensor:
        x = x + self.drop(self.attn(self.ln1(x), key_valid=key_valid))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_m)
        self.self_attn = Attention(cfg.d_m, cfg.heads)
        self.ln2 = nn.LayerNorm(cfg.d_m)
        self.cross_attn = Attention(cfg.d_m, cfg.heads)
        self.ln3 = nn.LayerNorm(cfg.d_m)
        self.ff = FeedForward(cfg.d_m, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y: Tensor, kv: tuple[Tensor, Tensor], key_valid: Tensor) -> Tensor:
        y = y + self.drop(self.self_attn(self.ln1(y)))
        y = y + self.drop(self.cross_attn(self.ln2(y), kv=kv, key_valid=key_valid))
        return y + self.drop(self.ff(self.ln3(y)))


@dataclass
class EncoderState:
    """Encoded histories plus per-decoder-layer cross-attention keys/values.

    All tensors share the leading batch dimension.
    """

    h: Tensor  # (B, L_input, d_m)
    key_valid: Tensor  # (B, L_input) bool
    kv: list[tuple[Tensor, Tensor]]

    def __len__(self) -> int:
        return self.h.shape[0]

    def select(self, index: Tensor | Sequence[int]) -> "EncoderState":
        """Rows ``index`` of the batch (repeats allowed)."""
        idx = torch.as_tensor(index, dtype=torch.long, device=self.h.device)
        return EncoderState(
            h=self.h.index_select(0, idx),
            key_valid=self.key_valid.index_select(0, idx),
            kv=[(k.index_select(0, idx), v.index_select(0, idx)) for k, v in self.kv],
        )


class SidDiffusionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, M, d_e, d_m = cfg.n, cfg.M, cfg.d_e, cfg.d_m
        self.sid_emb = nn.Parameter(torch.empty(n, M, d_e))
        self.mask_emb = nn.Parameter(torch.empty(d_e))
        self.pad_item = nn.Parameter(torch.empty(d_m))
        self.item_proj = nn.Linear(n * d_e, d_m)
        self.enc_pos = nn.Parameter(torch.empty(cfg.L_input, d_m))
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.enc_norm = nn.LayerNorm(d_m)
        self.dec_in = nn.Linear(d_e, d_m)
        self.dec_pos = nn.Parameter(torch.empty(n, d_m))
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.dec_norm = nn.LayerNorm(d_m)
        self.head_w = nn.Parameter(torch.empty(n, d_m, M))
        self.head_b = nn.Parameter(torch.empty(n, M))
        self.drop = nn.Dropout(cfg.dropout)
        self.reset_parameters()

    def reset_parameters(self, std: float = 0.02) -> None:
        for name, p in self.named_parameters():
            if name.endswith("bias") or name == "head_b":
                nn.init.zeros_(p)
            elif "ln" in name or "norm" in name:
                nn.init.ones_(p)
            else:
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)

    # -- encoder ---------------------------------------------------------

    def _history_tensors(self, contexts: Sequence[Sequence[Sequence[int]]]) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        B, L = len(contexts), cfg.L_input
        codes = torch.zeros(B, L, cfg.n, dtype=torch.long)
        is_pad = torch.ones(B, L, dtype=torch.bool)
        for b, ctx in enumerate(contexts):
            if len(ctx) > L:
                raise DataError(f"context length {len(ctx)} exceeds L_input={L}")
            if not ctx:
                continue
            t = torch.as_tensor([list(sid) for sid in ctx], dtype=torch.long)
            if t.shape[1] != cfg.n:
                raise DataError(f"context SIDs have {t.shape[1]} digits, model expects {cfg.n}")
            if t.min() < 0 or t.max() >= cfg.M:
                raise DataError(f"context digit out of range [0, {cfg.M})")
            # left-pad so the most recent item always sits in the last slot
            codes[b, L - len(ctx):] = t
            is_pad[b, L - len(ctx):] = False
        return codes, is_pad

    def encode(self, contexts: Sequence[Sequence[Sequence[int]]]) -> EncoderState:
        codes, is_pad = self._history_tensors(contexts)
        n = self.cfg.n
        parts = [self.sid_emb[k][codes[..., k]] for k in range(n)]
        items = self.item_proj(torch.cat(parts, dim=-1))
        items = torch.where(is_pad[..., None], self.pad_item.expand_as(items), items)
        x = self.drop(items + self.enc_pos)
        key_valid = ~is_pad
        # an all-PAD history attends over its PAD slots instead of nothing
        key_valid = key_valid | ~key_valid.any(dim=1, keepdim=True)
        for layer in self.enc_layers:
            x = layer(x, key_valid)
        h = self.enc_norm(x)
        kv = [layer.cross_attn.project_kv(h) for layer in self.dec_layers]
        return EncoderState(h=h, key_valid=key_valid, kv=kv)

    # -- decoder ---------------------------------------------------------

    def decoder_logits(self, slots: Tensor, state: EncoderState) -> Tensor:
        """Logits (B, n, M) for a (B, n) slot tensor; ``M`` marks a masked slot."""
        cfg = self.cfg
        slots = torch.as_tensor(slots, dtype=torch.long)
        if slots.dim() != 2 or slots.shape[1] != cfg.n:
            raise DataError(f"slot tensor must be (B, {cfg.n}), got {tuple(slots.shape)}")
        if slots.shape[0] != len(state):
            raise DataError(f"{slots.shape[0]} slot rows for an encoder state of {len(state)}")
        if slots.min() < 0 or slots.max() > cfg.M:
            raise DataError(f"slot values must lie in [0, {cfg.M}]")
        masked = slots == cfg.mask_token
        digit = torch.arange(cfg.n)
        visible = self.sid_emb[digit[None, :], slots.clamp(max=cfg.M - 1)]
        emb = torch.where(masked[..., None], self.mask_emb.expand_as(visible), visible)
        y = self.drop(self.dec_in(emb) + self.dec_pos)
        for layer, kv in zip(self.dec_layers, state.kv):
            y = layer(y, kv, state.key_valid)
        y = self.dec_norm(y)
        return torch.einsum("bnd,ndm->bnm", y, self.head_w) + self.head_b

    def decode_digits(self, slots: Tensor, state: EncoderState) -> Tensor:
        """Per-digit categorical distributions, shape (B, n, M)."""
        return torch.softmax(self.decoder_logits(slots, state), dim=-1)

    def log_probs(self, slots: Tensor, state: EncoderState) -> Tensor:
        return torch.log_softmax(self.decoder_logits(slots, state), dim=-1)

    def masked_slots(self, targets: Tensor, mask: Tensor) -> Tensor:
        """Replace masked positions of ``targets`` with the mask token."""
        return torch.where(mask, torch.full_like(targets, self.cfg.mask_token), targets)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> SidDiffusionModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = SidDiffusionModel(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


# -- loss ------------------------------------------------------------------


def smoothed_targets(targets: Tensor, M: int, alpha: float, dtype: torch.dtype | None = None) -> Tensor:
    """(1 - alpha) one-hot + alpha / M."""
    one_hot = F.one_hot(targets, M).to(dtype or torch.get_default_dtype())
    return one_hot * (1.0 - alpha) + alpha / M


def view_loss(
    model: SidDiffusionModel,
    state: EncoderState,
    targets: Tensor,
    views: Tensor,
    alpha: float,
) -> Tensor:
    """Mean over samples of the mean over views of the masked-digit CE.

    ``targets`` is (B, n) and ``views`` a (B, R, n) boolean mask tensor.
    """
    B, R, n = views.shape
    counts = views.sum(dim=-1)
    if bool((counts == 0).any()):
        raise DataError("every view must mask at least one digit")
    slots = model.masked_slots(targets[:, None, :].expand(B, R, n), views).reshape(B * R, n)
    rows = torch.arange(B).repeat_interleave(R)
    logp = model.log_probs(slots, state.select(rows)).view(B, R, n, -1)
    q = smoothed_targets(targets, model.cfg.M, alpha, logp.dtype)
    ce = -(q[:, None] * logp).sum(dim=-1)  # (B, R, n)
    per_view = (ce * views).sum(dim=-1) / counts
    return per_view.mean()


def loss_and_grad(
    model: SidDiffusionModel,
    contexts: Sequence[Sequence[Sequence[int]]],
    targets: Sequence[Sequence[int]],
    views: Tensor,
    alpha: float,
) -> tuple[float, dict[str, Tensor]]:
    """Loss on the given views and its gradient for every named parameter."""
    model.zero_grad(set_to_none=True)
    state = model.encode(contexts)
    t = torch.as_tensor([list(s) for s in targets], dtype=torch.long)
    loss = view_loss(model, state, t, torch.as_tensor(views, dtype=torch.bool), alpha)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return float(loss.detach()), grads


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, model: SidDiffusionModel, meta: dict[str, str] | None = None) -> None:
    """Magic, key=value config block, then named float32 tensors."""
    cfg = {f"model.{k}": str(v) for k, v in asdict(model.cfg).items()}
    cfg["format_version"] = str(CHECKPOINT_VERSION)
    for k, v in (meta or {}).items():
        cfg[f"meta.{k}"] = str(v)
    block = "".join(f"{k}={v}\n" for k, v in cfg.items()).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(block)), block]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def _parse_model_config(entries: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        key = f"model.{f.name}"
        if key not in entries:
            raise FormatError(f"checkpoint is missing {key}")
        kwargs[f.name] = float(entries[key]) if f.name == "dropout" else int(entries[key])
    return ModelConfig(**kwargs)


def load_checkpoint(path: str | Path) -> tuple[SidDiffusionModel, dict[str, str]]:
    import numpy as np

    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (blen,) = struct.unpack_from("<I", raw, 4)
    off = 8 + blen
    entries = dict(
        line.split("=", 1) for line in raw[8:off].decode("utf-8").splitlines() if line
    )
    if entries.get("format_version") != str(CHECKPOINT_VERSION):
        raise FormatError(
            f"{path}: checkpoint version {entries.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    model = SidDiffusionModel(_parse_model_config(entries))
    expected = model.state_dict()
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    loaded = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        name = raw[off + 4:off + 4 + nlen].decode("utf-8")
        off += 4 + nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{rank}I", raw, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(raw[off:off + 4 * size], dtype="<f4").reshape(shape)
        off += 4 * size
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise FormatError(f"{path}: unexpected tensor {name} {shape}")
        loaded[name] = torch.from_numpy(data.copy())
    if set(loaded) != set(expected):
        raise FormatError(f"{path}: missing tensors {sorted(set(expected) - set(loaded))}")
    model.load_state_dict(loaded)
    meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta.")}
    return model, meta
