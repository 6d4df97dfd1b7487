"""
Two-stream text/structured network.

Both streams run a stem, a stack of bottleneck residual blocks with
bidirectional adaptive feature infusion, and a multi-modal attentive fusion
module before a dropout + two-layer classifier head. Every tensor carries a
leading batch axis: text features are (B, C, L), structured features
(B, C, F).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigurationError, ContractError
from .params import ParamStore
from .tensor_core import Tensor

MODALITIES = ("both", "text", "struct")


@dataclass
class ModelConfig:
    channels: int = 64
    length: int = 256
    n_fields: int = 19
    vocab_size: int = 2
    reduction: int = 4
    n_blocks: int = 4
    n_classes: int = 4
    dropout: float = 0.5
    hidden: int | None = None
    depth_text: int | None = None
    depth_struct: int | None = None
    infusion: bool = True
    fusion: bool = True
    modality: str = "both"

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.channels
        if self.depth_text is None:
            self.depth_text = self.n_blocks
        if self.depth_struct is None:
            self.depth_struct = self.n_blocks
        self.validate()

    def validate(self) -> None:
        if self.channels % self.reduction:
            raise ConfigurationError(f"channels {self.channels} not divisible by reduction {self.reduction}")
        if self.n_fields > self.length:
            raise ConfigurationError(f"structured width {self.n_fields} exceeds text length {self.length}")
        if self.n_classes != 4:
            raise ConfigurationError("the classifier head has exactly 4 outputs")
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"modality must be one of {MODALITIES}")
        if min(self.channels, self.length, self.n_fields, self.vocab_size) < 1:
            raise ConfigurationError("channels, length, n_fields and vocab_size must be positive")
        if self.depth_text < 0 or self.depth_struct < 0:
            raise ConfigurationError("block depths must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def uses_text(self) -> bool:
        return self.modality in ("both", "text")

    @property
    def uses_struct(self) -> bool:
        return self.modality in ("both", "struct")

    @property
    def bottleneck(self) -> int:
        return self.channels // self.reduction

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        std = math.sqrt(2.0 / (c_in * k))
        self.weight = store.add(f"{name}.weight", rng.normal(0.0, std, size=(c_out, c_in, k)))
        self.bias = store.add(f"{name}.bias", np.zeros(c_out))
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv1d(x, self.weight, self.bias, self.padding)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return tc.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, train)


class LayerNorm:
    """Normalises over the channel axis of a (B, C, N) tensor."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta, axis=1)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = store.add(f"{name}.weight", rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_in, d_out)))
        self.bias = store.add(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class ResBlock:
    """1x1 reduce, 3-wide conv, 1x1 expand, each batch-normalised; identity shortcut."""

    def __init__(self, store, name, channels, reduction, rng):
        mid = channels // reduction
        self.reduce = Conv(store, f"{name}.reduce", channels, mid, 1, rng)
        self.bn1 = BatchNorm(store, f"{name}.bn1", mid)
        self.mid = Conv(store, f"{name}.mid", mid, mid, 3, rng)
        self.bn2 = BatchNorm(store, f"{name}.bn2", mid)
        self.expand = Conv(store, f"{name}.expand", mid, channels, 1, rng)
        self.bn3 = BatchNorm(store, f"{name}.bn3", channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = tc.relu(self.bn1(self.reduce(x), train))
        h = tc.relu(self.bn2(self.mid(h), train))
        h = self.bn3(self.expand(h), train)
        return tc.relu(tc.add(x, h))


class DomainTransfer:
    """Two 1x1 convolutions (C -> C/r -> C) with layer norm in between."""

    def __init__(self, store, name, channels, reduction, rng):
        mid = channels // reduction
        self.encode = Conv(store, f"{name}.encode", channels, mid, 1, rng)
        self.norm = LayerNorm(store, f"{name}.norm", mid)
        self.decode = Conv(store, f"{name}.decode", mid, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.norm(self.encode(x)))


class FeatureInfusion:
    """Reweight the infusion stream with a softmax over its positions, pool it
    into one C-vector, transfer it to the main stream's domain and add it at
    every main-stream position."""

    def __init__(self, store, name, channels, reduction, rng):
        self.squeeze = Conv(store, f"{name}.squeeze", channels, 1, 1, rng)
        self.transfer = DomainTransfer(store, f"{name}.transfer", channels, reduction, rng)

    def __call__(self, main: Tensor, infusion: Tensor, mask: np.ndarray | None = None):
        logits = self.squeeze(infusion)                                 # (B, 1, N_inf)
        weights = tc.softmax(logits, None if mask is None else mask[:, None, :])
        pooled = tc.matmul(infusion, tc.transpose(weights))            # (B, C, 1)
        moved = self.transfer(pooled)
        out = tc.add(main, tc.replicate(moved, main.shape[-1], axis=-1))
        return out, {"logits": logits, "weights": weights, "pooled": pooled}


class AttentiveFusion:
    def __init__(self, store, name, channels, reduction, rng):
        self.text_score = Conv(store, f"{name}.text_score", channels, 1, 1, rng)
        self.struct_score = Conv(store, f"{name}.struct_score", channels, 1, 1, rng)
        self.text_transfer = DomainTransfer(store, f"{name}.text_transfer", channels, reduction, rng)
        self.struct_transfer = DomainTransfer(store, f"{name}.struct_transfer", channels, reduction, rng)

    def __call__(self, t_m: Tensor, s_unpadded: Tensor, mask: np.ndarray):
        length = t_m.shape[-1]
        n_fields = s_unpadded.shape[-1]
        if n_fields > length:
            raise ConfigurationError(f"structured width {n_fields} exceeds text length {length}")
        s_m = tc.pad_length(s_unpadded, length)
        s_p = tc.softmax(self.struct_score(s_m))                         # (B, 1, L)
        t_p = tc.softmax(self.text_score(t_m), mask[:, None, :])         # (B, 1, L)
        s_w = tc.matmul(s_p, tc.transpose(t_m))                          # (B, 1, C)
        t_w = tc.matmul(t_p, tc.transpose(s_m))                          # (B, 1, C)
        t_o = tc.add(t_m, tc.replicate(self.text_transfer(tc.transpose(t_w)), length, axis=-1))
        s_o = tc.add(s_m, tc.replicate(self.struct_transfer(tc.transpose(s_w)), length, axis=-1))
        s_o = tc.crop_length(s_o, n_fields)
        return t_o, s_o, {"S_m": s_m, "T_m": t_m, "S_p": s_p, "T_p": t_p, "S_w": s_w, "T_w": t_w,
                          "S_o": s_o, "T_o": t_o}


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Named intermediates of one forward pass (batch axis first)."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    blocks: list[dict[str, np.ndarray]] = field(default_factory=list)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries


class FineGrainNet:
    """Parameters and forward pass of the two-stream classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        cfg = config
        rng = np.random.default_rng(seed)
        store = self.store = ParamStore()
        C, r = cfg.channels, cfg.reduction

        if cfg.uses_text:
            table = rng.normal(0.0, 1.0, size=(cfg.vocab_size, C))
            table[0] = 0.0
            self.table = store.add("embedding.table", table)
            self.text_stem1 = Conv(store, "text.stem.conv1", C, C, 3, rng)
            self.text_stem_bn = BatchNorm(store, "text.stem.bn", C)
            self.text_stem2 = Conv(store, "text.stem.conv2", C, C, 3, rng)
            self.text_blocks = [ResBlock(store, f"text.block{i}", C, r, rng) for i in range(cfg.depth_text)]
        if cfg.uses_struct:
            self.struct_stem = Conv(store, "struct.stem", 1, C, 1, rng)
            self.struct_blocks = [ResBlock(store, f"struct.block{i}", C, r, rng) for i in range(cfg.depth_struct)]
        self.n_infusion = min(cfg.depth_text, cfg.depth_struct) if (cfg.modality == "both" and cfg.infusion) else 0
        # into_text pools the structured stream; into_struct pools the text stream
        self.into_text = [FeatureInfusion(store, f"infuse{i}.into_text", C, r, rng) for i in range(self.n_infusion)]
        self.into_struct = [FeatureInfusion(store, f"infuse{i}.into_struct", C, r, rng) for i in range(self.n_infusion)]
        self.fusion = (AttentiveFusion(store, "fusion", C, r, rng)
                       if cfg.modality == "both" and cfg.fusion else None)
        if cfg.uses_struct:
            self.merge = Conv(store, "fusion.merge", C, 1, 1, rng)
        width = (C if cfg.uses_text else 0) + (cfg.n_fields if cfg.uses_struct else 0)
        self.fc1 = Linear(store, "head.fc1", width, cfg.hidden, rng)
        self.fc2 = Linear(store, "head.fc2", cfg.hidden, cfg.n_classes, rng)

    # -- pieces ------------------------------------------------------------

    def stem_text(self, T: Tensor, train: bool) -> Tensor:
        h = tc.relu(self.text_stem_bn(self.text_stem1(T), train))
        return self.text_stem2(h)

    def stem_structured(self, S: Tensor) -> Tensor:
        if S.shape[-1] != self.config.n_fields:
            raise ContractError(f"structured width {S.shape[-1]} != configured {self.config.n_fields}")
        return self.struct_stem(S)

    def classify(self, M: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        flat = tc.reshape(M, (M.shape[0], M.shape[-1]))
        h = tc.dropout(flat, self.config.dropout, train, rng)
        return self.fc2(tc.relu(self.fc1(h)))

    def embed(self, ids: np.ndarray) -> Tensor:
        return tc.embedding_lookup(self.table, ids, frozen_row=0)

    # -- forward -----------------------------------------------------------

    def forward(self, ids: np.ndarray, lengths: np.ndarray, values: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None, embedded: Tensor | None = None,
                trace: bool = False):
        """Return ``(logits (B, 4), ForwardTrace | None)``."""
        cfg = self.config
        ids = np.asarray(ids)
        values = np.asarray(values, dtype=np.float64)
        n = values.shape[0] if values.ndim == 2 else ids.shape[0]
        if train and cfg.dropout > 0 and rng is None:
            raise ContractError("training-mode forward needs a random generator for dropout")
        mask = np.arange(cfg.length)[None, :] < np.asarray(lengths)[:, None] if cfg.uses_text else None
        rec = ForwardTrace() if trace else None

        t = s = None
        if cfg.uses_text:
            if ids.shape != (n, cfg.length):
                raise ContractError(f"token ids shape {ids.shape} != ({n}, {cfg.length})")
            T = embedded if embedded is not None else self.embed(ids)
            t = self.stem_text(T, train)
            if rec:
                rec.entries["T"] = T.data
        if cfg.uses_struct:
            if values.shape != (n, cfg.n_fields):
                raise ContractError(f"structured values shape {values.shape} != ({n}, {cfg.n_fields})")
            S = Tensor(values[:, None, :])
            s = self.stem_structured(S)
            if rec:
                rec.entries["S"] = S.data

        for i in range(max(cfg.depth_text if t is not None else 0, cfg.depth_struct if s is not None else 0)):
            if t is not None and i < cfg.depth_text:
                t = self.text_blocks[i](t, train)
            if s is not None and i < cfg.depth_struct:
                s = self.struct_blocks[i](s, train)
            if i < self.n_infusion:
                t_new, info_t = self.into_text[i](t, s)
                s_new, info_s = self.into_struct[i](s, t, mask)
                if rec:
                    rec.blocks.append({
                        "S_i": s.data, "T_i": t.data,
                        "S0": info_t["logits"].data, "alpha": info_t["weights"].data, "S_r": info_t["pooled"].data,
                        "T0": info_s["logits"].data, "beta": info_s["weights"].data, "T_r": info_s["pooled"].data,
                    })
                t, s = t_new, s_new

        parts = []
        if self.fusion is not None:
            t, s, info = self.fusion(t, s, mask)
            if rec:
                rec.entries.update({k: v.data for k, v in info.items()})
        elif rec:
            if t is not None:
                rec.entries["T_m"] = rec.entries["T_o"] = t.data
            if s is not None:
                rec.entries["S_m"] = rec.entries["S_o"] = s.data
        if t is not None:
            T_c = tc.max_pool_length(t)
            parts.append(T_c)
            if rec:
                rec.entries["T_c"] = T_c.data
        if s is not None:
            S_c = self.merge(s)
            parts.append(S_c)
            if rec:
                rec.entries["S_c"] = S_c.data
        M = parts[0] if len(parts) == 1 else tc.concat(parts, axis=-1)
        logits = self.classify(M, train, rng)
        if rec:
            rec.entries["M"] = M.data
            rec.entries["P_o"] = logits.data
        return logits, rec

    def n_parameters(self) -> int:
        return self.store.n_parameters()
