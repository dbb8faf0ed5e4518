"""Encoder-decoder transformer forecaster with pluggable positional embeddings."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter, xavier_uniform
from .data import RevIN
from .embeddings import PEContext, PEMethodConfig, make_pe
from .errors import EmptyDataset, EmptyMask, NonFiniteLoss, ParseError, ShapeMismatch
from .ncde import NCDEEmbedding, PETable

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 1
    feedforward_width: int = 64
    label_len: int | None = None
    dropout_rate: float = 0.05
    pe: PEMethodConfig = field(default_factory=PEMethodConfig)

    def __post_init__(self):
        self.pe = PEMethodConfig.from_value(self.pe, d_model=self.d_model)
        if self.pe.d_model != self.d_model:
            self.pe.d_model = self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def resolved_label_len(self, lookback):
        label = lookback // 2 if self.label_len is None else self.label_len
        if label > lookback:
            raise ValueError(f"label_len {label} exceeds lookback {lookback}")
        return label

    def to_dict(self):
        out = asdict(self)
        out["pe"] = asdict(self.pe)
        return out


# -- modules ---------------------------------------------------------------

class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for sub in value:
                    if isinstance(sub, Module):
                        yield from sub.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True):
        self.weight = parameter(xavier_uniform(rng, fan_in, fan_out))
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        out = ad.as_tensor(x) @ self.weight
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class TokenEmbedding(Module):
    """Kernel-width-1 projection of values plus observation-indicator channels."""

    def __init__(self, n_vars, d_model, rng):
        self.n_vars = n_vars
        self.proj = Linear(2 * n_vars, d_model, rng)

    def __call__(self, values, mask):
        values = ad.as_tensor(values)
        if values.shape[-1] != self.n_vars or np.shape(mask) != values.shape:
            raise ShapeMismatch(f"expected {self.n_vars} variables with a matching mask")
        return self.proj(ad.concat([values, Tensor(np.asarray(mask, dtype=float))], axis=-1))


def causal_mask(length):
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d_model, n_heads, rng):
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.last_weights = None

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, query, memory=None, mask=None):
        memory = query if memory is None else memory
        if query.shape[-1] != memory.shape[-1]:
            raise ShapeMismatch("query and memory widths differ")
        if memory.shape[-2] == 0 or query.shape[-2] == 0:
            raise ShapeMismatch("attention over an empty sequence")
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        weights = ad.softmax(scores, axis=-1, mask=mask)
        self.last_weights = weights.data
        b, _, t, _ = q.shape
        merged = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, self.n_heads * self.head_dim)
        return self.out(merged)


def self_attention(attn, x, mask=None):
    return attn(x, mask=mask)


def cross_attention(attn, queries, memory):
    return attn(queries, memory)


class FeedForward(Module):
    def __init__(self, d_model, width, rng):
        self.lin1 = Linear(d_model, width, rng)
        self.lin2 = Linear(width, d_model, rng)

    def __call__(self, x):
        return self.lin2(ad.relu(self.lin1(x)))


def feed_forward(ff, x):
    return ff(x)


class EncoderLayer(Module):
    def __init__(self, cfg, rng, dropout_rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ff = FeedForward(cfg.d_model, cfg.feedforward_width, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.dropout_rate = cfg.dropout_rate
        self._rng = dropout_rng

    def _drop(self, x):
        return ad.dropout(x, self.dropout_rate, self._rng, self.training)

    def __call__(self, x):
        s = self.norm1(self._drop(self.attn(x)) + x)
        return self.norm2(self._drop(self.ff(s)) + s)


class DecoderLayer(EncoderLayer):
    def __init__(self, cfg, rng, dropout_rng):
        super().__init__(cfg, rng, dropout_rng)
        self.cross = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, x, memory):
        s1 = self.norm1(self._drop(self.attn(x, mask=causal_mask(x.shape[-2]))) + x)
        s2 = self.norm2(self._drop(self.cross(s1, memory)) + s1)
        return self.norm3(self._drop(self.ff(s2)) + s2)


def encoder_forward(layers, x0):
    x = x0
    for layer in layers:
        x = layer(x)
    return x


def decoder_forward(layers, x0, memory):
    x = x0
    for layer in layers:
        x = layer(x, memory)
    return x


# -- batches ---------------------------------------------------------------

@dataclass
class ForecastBatch:
    enc_values: np.ndarray  # (B, N, l), NaN where null
    enc_mask: np.ndarray
    dec_values: np.ndarray  # (B, label_len + M, l); prediction slots are 0
    dec_mask: np.ndarray
    target: np.ndarray  # (B, M, l), 0 where null
    target_mask: np.ndarray
    ctx: PEContext  # covers the combined N + M observations
    label_len: int

    @property
    def lookback(self):
        return self.enc_values.shape[1]

    @property
    def horizon(self):
        return self.target.shape[1]

    def __len__(self):
        return self.enc_values.shape[0]


def make_batch(windows, label_len, base_interval):
    if not windows:
        raise EmptyDataset("no windows to batch")
    enc = np.stack([w.past_values for w in windows])
    fut = np.stack([w.future_values for w in windows])
    tmask = np.stack([w.target_mask for w in windows])
    enc_mask = ~np.isnan(enc)
    M = fut.shape[1]
    label = enc[:, enc.shape[1] - label_len :]
    dec = np.concatenate([np.nan_to_num(label), np.zeros((enc.shape[0], M, enc.shape[2]))], axis=1)
    dec_mask = np.concatenate([enc_mask[:, enc.shape[1] - label_len :], np.zeros_like(tmask)], axis=1)
    return ForecastBatch(
        enc_values=enc,
        enc_mask=enc_mask,
        dec_values=dec,
        dec_mask=dec_mask,
        target=np.where(tmask, np.nan_to_num(fut), 0.0),
        target_mask=tmask,
        ctx=PEContext.from_windows(windows, base_interval),
        label_len=label_len,
    )


# -- forecaster ------------------------------------------------------------

class Forecaster(Module):
    """Informer-style encoder-decoder with RevIN and a configurable positional embedding."""

    def __init__(self, config, n_vars, lookback, horizon, seed=0, base_interval=3600.0, pe_table_size=None, median_gap=1.0):
        self.config = config
        self.n_vars = n_vars
        self.lookback = lookback
        self.horizon = horizon
        self.label_len = config.resolved_label_len(lookback)
        self.base_interval = float(base_interval)
        self.seed = seed
        self.pe_table_size = pe_table_size
        self.median_gap = float(median_gap)
        rng = np.random.default_rng(seed)
        self._dropout_rng = np.random.default_rng(seed + 7919)
        self.revin = RevIN(n_vars)
        self.enc_embed = TokenEmbedding(n_vars, config.d_model, rng)
        self.dec_embed = TokenEmbedding(n_vars, config.d_model, rng)
        self.encoder = [EncoderLayer(config, rng, self._dropout_rng) for _ in range(config.encoder_depth)]
        self.decoder = [DecoderLayer(config, rng, self._dropout_rng) for _ in range(config.decoder_depth)]
        self.head = Linear(config.d_model, n_vars, rng)
        self.pe = make_pe(
            config.pe,
            np.random.default_rng(seed + 104729),
            window_length=lookback + horizon,
            table_size=pe_table_size,
            median_gap=median_gap,
        )
        self.use_pe = True

    def named_parameters(self, prefix=""):
        yield from super().named_parameters(prefix)
        yield prefix + "revin.gain", self.revin.gain
        yield prefix + "revin.bias", self.revin.bias
        for i, p in enumerate(self.pe.parameters()):
            yield f"{prefix}pe.{i}", p

    def embed(self, batch):
        """Token + positional embeddings for encoder and decoder inputs."""
        norm, stats = self.revin.normalize(batch.enc_values, batch.enc_mask)
        n_obs = batch.lookback
        dec_label = norm[:, n_obs - batch.label_len :, :]
        dec_vals = ad.concat([dec_label, Tensor(np.zeros((len(batch), batch.horizon, self.n_vars)))], axis=1)
        x_enc = self.enc_embed(norm, batch.enc_mask)
        x_dec = self.dec_embed(dec_vals, batch.dec_mask)
        if self.use_pe:
            pe = self.pe(batch.ctx)
            x_enc = x_enc + pe[:, :n_obs, :]
            x_dec = x_dec + pe[:, n_obs - batch.label_len :, :]
        return x_enc, x_dec, stats

    def __call__(self, batch):
        x_enc, x_dec, stats = self.embed(batch)
        memory = encoder_forward(self.encoder, x_enc)
        states = decoder_forward(self.decoder, x_dec, memory)
        out = self.head(states)[:, -batch.horizon :, :]
        return self.revin.denormalize(out, stats)


def forecast(model, batch):
    return model(batch)


def encoder_permutation_deviation(model, batch, perm):
    """Max |enc(permuted input) - permuted enc(input)| over the lookback.

    Only the encoder values and mask are reordered; timestamps stay put,
    so any position signal breaks equivariance.
    """
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(batch.lookback)):
        raise ValueError("perm must be a permutation of the lookback positions")
    was_training = model.training
    model.eval()
    shuffled = replace(batch, enc_values=batch.enc_values[:, perm], enc_mask=batch.enc_mask[:, perm])
    base = encoder_forward(model.encoder, model.embed(batch)[0]).data
    moved = encoder_forward(model.encoder, model.embed(shuffled)[0]).data
    model.train(was_training)
    return float(np.max(np.abs(moved - base[:, perm])))


def mse_loss(pred, target, mask=None):
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    mask = np.ones(target.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no observed target entries")
    err = (pred - np.where(mask, target, 0.0)) * Tensor(mask.astype(float))
    return (err * err).sum() * (1.0 / count)


# -- training --------------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 3
    clip_norm: float = 5.0
    seed: int = 0
    max_batches_per_epoch: int | None = None


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    ncde: dict = field(default_factory=dict)


class EarlyStopping:
    """Stop once the monitored value fails to improve for ``patience`` updates."""

    def __init__(self, patience=3):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, value):
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _batches(windows, batch_size, rng=None, limit=None):
    order = np.arange(len(windows))
    if rng is not None:
        rng.shuffle(order)
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return chunks[:limit] if limit else chunks


def _train_step(model, optimizer, batch, clip_norm):
    pred = model(batch)
    loss = mse_loss(pred, batch.target, batch.target_mask)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss became {value}")
    ad.backward(loss, params=optimizer.params)
    grad_norm = ad.clip_grad_norm(optimizer.params, clip_norm)
    optimizer.step()
    return value, grad_norm


def ncde_pe_train_single_epoch(model, train_windows, optimizer, config, rng):
    """One pass over the windows with gradients through the CDE solver.

    Returns a dict with the first/last batch loss and per-batch gradient
    norms of the vector-field parameters.
    """
    pe = model.pe
    info = {"batch_losses": [], "field_grad_norms": []}
    if not train_windows:
        return info
    model.train()
    field_params = pe.params.field_parameters()
    for idx in _batches(train_windows, config.batch_size, rng, config.max_batches_per_epoch):
        batch = make_batch([train_windows[i] for i in idx], model.label_len, model.base_interval)
        pred = model(batch)
        loss = mse_loss(pred, batch.target, batch.target_mask)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} during NCDE training")
        ad.backward(loss, params=optimizer.params)
        info["field_grad_norms"].append(float(math.sqrt(sum(float((p.grad**2).sum()) for p in field_params))))
        ad.clip_grad_norm(optimizer.params, config.clip_norm)
        optimizer.step()
        info["batch_losses"].append(value)
    info["first_loss"] = info["batch_losses"][0]
    info["last_loss"] = info["batch_losses"][-1]
    log.info("NCDE-PE epoch: first batch loss %.4f, last %.4f", info["first_loss"], info["last_loss"])
    return info


def _snapshot(model):
    return [p.data.copy() for p in model.parameters()]


def _restore(model, snapshot):
    for p, saved in zip(model.parameters(), snapshot):
        p.data[...] = saved


def _rebuild_adam(old, params):
    new = ad.Adam(params, lr=old.learning_rate, betas=old.betas, eps=old.eps)
    index = {id(p): i for i, p in enumerate(old.params)}
    for j, p in enumerate(params):
        i = index.get(id(p))
        if i is not None:
            new.m[j][...] = old.m[i]
            new.v[j][...] = old.v[i]
    new.step_count = old.step_count
    return new


def train(model, train_windows, val_windows=(), config=None, on_epoch=None):
    """Adam training with validation early stopping and best-state retention."""
    config = config or TrainingConfig()
    log_ = TrainingLog()
    if config.epochs <= 0:
        return log_
    if not train_windows:
        raise EmptyDataset("training set has no windows")
    rng = np.random.default_rng(config.seed)
    optimizer = ad.Adam(model.parameters(), lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    best = _snapshot(model)
    start_epoch = 0

    pe = model.pe
    if isinstance(pe, NCDEEmbedding) and pe.train_mode == "single_epoch" and not pe.frozen:
        t0 = time.perf_counter()
        log_.ncde = ncde_pe_train_single_epoch(model, train_windows, optimizer, config, rng)
        pe.set_reference(train_windows)
        pe.freeze(resolution=pe.table_resolution or _default_table_resolution(model))
        optimizer = _rebuild_adam(optimizer, model.parameters())
        best = _snapshot(model)
        start_epoch = 1
        _finish_epoch(model, log_, 0, log_.ncde["batch_losses"], val_windows, config, stopper, t0)
        log_.best_epoch = 0
        if on_epoch:
            on_epoch(log_.epochs[-1])

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        model.train()
        losses = []
        for idx in _batches(train_windows, config.batch_size, rng, config.max_batches_per_epoch):
            batch = make_batch([train_windows[i] for i in idx], model.label_len, model.base_interval)
            value, _ = _train_step(model, optimizer, batch, config.clip_norm)
            losses.append(value)
        stop = _finish_epoch(model, log_, epoch, losses, val_windows, config, stopper, t0)
        if log_.epochs[-1]["improved"]:
            best = _snapshot(model)
            log_.best_epoch = epoch
        if on_epoch:
            on_epoch(log_.epochs[-1])
        if stop:
            log_.stopped_early = True
            break
    _restore(model, best)
    model.eval()
    return log_


def _default_table_resolution(model):
    # a quarter of the median gap, expressed in window-relative time
    return 0.25 / max(model.lookback + model.horizon - 1, 1)


def _finish_epoch(model, log_, epoch, losses, val_windows, config, stopper, t0):
    log_.batch_losses.extend(losses)
    train_loss = float(np.mean(losses)) if losses else math.nan
    if val_windows:
        val_mse, val_mae = evaluate(model, val_windows, batch_size=max(config.batch_size, 64))
        monitored = val_mse
    else:
        val_mse = val_mae = math.nan
        monitored = train_loss
    improved = monitored < stopper.best
    stop = stopper.update(monitored)
    row = {
        "epoch": epoch,
        "train_loss": train_loss,
        "val_mse": val_mse,
        "val_mae": val_mae,
        "improved": improved,
        "seconds": time.perf_counter() - t0,
    }
    log_.epochs.append(row)
    log.info("epoch %d: train %.4f val mse %.4f mae %.4f", epoch, train_loss, val_mse, val_mae)
    return stop


def predict(model, windows, batch_size=64):
    model.eval()
    out = []
    for idx in _batches(windows, batch_size):
        batch = make_batch([windows[i] for i in idx], model.label_len, model.base_interval)
        out.append(model(batch).data)
    return np.concatenate(out, axis=0)


def evaluate(model, windows, batch_size=64):
    """Masked (MSE, MAE) over every observed target entry of ``windows``."""
    if not windows:
        raise EmptyDataset("evaluation set has no windows")
    was_training = model.training
    model.eval()
    sq = ab = 0.0
    count = 0
    for idx in _batches(windows, batch_size):
        batch = make_batch([windows[i] for i in idx], model.label_len, model.base_interval)
        err = np.where(batch.target_mask, model(batch).data - batch.target, 0.0)
        sq += float((err * err).sum())
        ab += float(np.abs(err).sum())
        count += int(batch.target_mask.sum())
    model.train(was_training)
    if count == 0:
        raise EmptyMask("no observed targets in evaluation set")
    return sq / count, ab / count


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_HEADER = "irrcast-checkpoint v1"


def save_checkpoint(model, path, extras=None):
    """Write a text checkpoint; ``extras`` is echoed back as ``model.extras``."""
    meta = {
        "extras": extras or {},
        "model": model.config.to_dict(),
        "n_vars": model.n_vars,
        "lookback": model.lookback,
        "horizon": model.horizon,
        "seed": model.seed,
        "base_interval": model.base_interval,
        "pe_table_size": model.pe_table_size,
        "median_gap": model.median_gap,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write("config " + json.dumps(meta, sort_keys=True) + "\n")
        for name, p in model.named_parameters():
            shape = ",".join(str(s) for s in p.shape)
            fh.write(f"param {name} {shape} " + " ".join(f"{v:.17g}" for v in p.data.reshape(-1)) + "\n")
        pe = model.pe
        if isinstance(pe, NCDEEmbedding) and pe.frozen:
            for name, p in zip(("zeta_weight", "zeta_bias", "w1", "b1", "w2", "b2"), pe.params.parameters()):
                shape = ",".join(str(s) for s in p.shape)
                fh.write(f"ncde {name} {shape} " + " ".join(f"{v:.17g}" for v in p.data.reshape(-1)) + "\n")
            t = pe.table
            fh.write(f"table {t.resolution:.17g} {t.grid_values.shape[0]} {t.grid_values.shape[1]}\n")
            for g, row in zip(t.grid_times, t.grid_values):
                fh.write(" ".join(f"{v:.17g}" for v in (g, *row)) + "\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ParseError("not an irrcast checkpoint", 1)
    meta = json.loads(lines[1].split(" ", 1)[1])
    cfg_dict = dict(meta["model"])
    cfg_dict["pe"] = PEMethodConfig(**cfg_dict["pe"])
    model = Forecaster(
        ModelConfig(**cfg_dict),
        meta["n_vars"],
        meta["lookback"],
        meta["horizon"],
        seed=meta["seed"],
        base_interval=meta["base_interval"],
        pe_table_size=meta["pe_table_size"],
        median_gap=meta["median_gap"],
    )
    named = dict(model.named_parameters())
    ncde_params = model.pe.params.parameters() if isinstance(model.pe, NCDEEmbedding) else []
    ncde_names = dict(zip(("zeta_weight", "zeta_bias", "w1", "b1", "w2", "b2"), ncde_params))
    i = 2
    while i < len(lines):
        parts = lines[i].split(" ")
        kind = parts[0]
        if kind in ("param", "ncde"):
            name, shape = parts[1], tuple(int(s) for s in parts[2].split(",") if s)
            target = (named if kind == "param" else ncde_names).get(name)
            if target is None:
                raise ParseError(f"unknown parameter {name}", i + 1)
            if target.shape != shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {shape} vs model {target.shape}")
            target.data[...] = np.array(parts[3:], dtype=np.float64).reshape(shape)
            i += 1
        elif kind == "table":
            resolution, count, width = float(parts[1]), int(parts[2]), int(parts[3])
            rows = np.array([lines[i + 1 + k].split(" ") for k in range(count)], dtype=np.float64)
            model.pe.table = PETable(rows[:, 0], rows[:, 1 : 1 + width], resolution)
            i += 1 + count
        else:
            raise ParseError(f"unrecognised line kind {kind!r}", i + 1)
    model.extras = meta.get("extras", {})
    model.eval()
    return model


def clone_model(model):
    return copy.deepcopy(model)
