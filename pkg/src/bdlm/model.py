"""Encoder-decoder transformer with type and hard/soft position embeddings.

Encoder input: token + type + sinusoidal position. Decoder input: token +
type + learned hard position (absolute output slot) + learned soft position
(encoder anchor of the span being predicted); the soft table is only added
when use_soft is on, which is the pretraining mode. Pre-norm residual
blocks, ReLU feed-forward, output projection tied to the token embeddings.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (AllPositionsPadded, ConfigMismatch, SequenceTooLong,
                     ShapeMismatch, SoftPositionOutOfRange)

NEG_INF = -1e9   # exp(x - 1e9) underflows to exactly 0, so pads never leak

CKPT_MAGIC = "bdlm-ckpt v1"

CONFIG_FIELDS = ("vocab_size", "n_types", "d_model", "n_heads", "enc_layers",
                 "dec_layers", "ffn_dim", "dropout", "max_len", "label_smoothing")
_FLOAT_FIELDS = {"dropout", "label_smoothing"}


@dataclass
class ModelConfig:
    vocab_size: int
    n_types: int
    d_model: int = 128
    n_heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 6
    ffn_dim: int = 0          # 0 -> 4 * d_model
    dropout: float = 0.1
    max_len: int = 64
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ShapeMismatch(f"d_model {self.d_model} not divisible by "
                                f"{self.n_heads} heads")
        if self.max_len < 62:
            raise ShapeMismatch(f"max_len {self.max_len} cannot cover pretraining "
                                "sequences of 62 tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeMismatch("dropout must be in [0, 1)")


def sinusoidal_positions(n_pos: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """pe[p, 2i] = sin(p / 10000^(2i/d)), pe[p, 2i+1] = cos(same argument)."""
    pe = np.zeros((n_pos, d_model), dtype=np.float64)
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64)
                 * (-math.log(10000.0) / d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[:d_model // 2])
    return pe.astype(dtype)


def _glorot(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _attn_params(rng, d, dtype, prefix):
    out = {}
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{name}"] = _glorot(rng, d, d, dtype)
        out[f"{prefix}.{name[1]}b"] = np.zeros(d, dtype=dtype)
    return out


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Deterministic parameter table, insertion order fixed by construction."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.ffn_dim
    raw = {
        "tok_emb": rng.normal(0.0, d ** -0.5, size=(config.vocab_size, d)).astype(dtype),
        "type_emb": rng.normal(0.0, 0.02, size=(config.n_types, d)).astype(dtype),
        "dec_hard_pos": rng.normal(0.0, 0.02, size=(config.max_len, d)).astype(dtype),
        "dec_soft_pos": rng.normal(0.0, 0.02, size=(config.max_len, d)).astype(dtype),
    }

    def block(prefix, cross):
        raw[f"{prefix}.ln1g"] = np.ones(d, dtype=dtype)
        raw[f"{prefix}.ln1b"] = np.zeros(d, dtype=dtype)
        raw.update(_attn_params(rng, d, dtype, f"{prefix}.self"))
        nxt = 2
        if cross:
            raw[f"{prefix}.ln2g"] = np.ones(d, dtype=dtype)
            raw[f"{prefix}.ln2b"] = np.zeros(d, dtype=dtype)
            raw.update(_attn_params(rng, d, dtype, f"{prefix}.cross"))
            nxt = 3
        raw[f"{prefix}.ln{nxt}g"] = np.ones(d, dtype=dtype)
        raw[f"{prefix}.ln{nxt}b"] = np.zeros(d, dtype=dtype)
        raw[f"{prefix}.w1"] = _glorot(rng, d, f, dtype)
        raw[f"{prefix}.b1"] = np.zeros(f, dtype=dtype)
        raw[f"{prefix}.w2"] = _glorot(rng, f, d, dtype)
        raw[f"{prefix}.b2"] = np.zeros(d, dtype=dtype)

    for i in range(config.enc_layers):
        block(f"enc{i}", cross=False)
    raw["enc_lng"] = np.ones(d, dtype=dtype)
    raw["enc_lnb"] = np.zeros(d, dtype=dtype)
    for i in range(config.dec_layers):
        block(f"dec{i}", cross=True)
    raw["dec_lng"] = np.ones(d, dtype=dtype)
    raw["dec_lnb"] = np.zeros(d, dtype=dtype)
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def _pad_bias(real_mask, dtype):
    """(B, Tk) boolean real-token mask -> additive (B, 1, 1, Tk) bias."""
    return np.where(real_mask, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def _causal_bias(t, dtype):
    return (np.triu(np.full((t, t), NEG_INF), k=1)).astype(dtype)[None, None, :, :]


@dataclass
class Model:
    config: ModelConfig
    params: dict
    _pe_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        return cls(config, init_params(config, seed=seed, dtype=dtype))

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def _pe(self, t):
        key = (t, self.dtype)
        if key not in self._pe_cache:
            self._pe_cache[key] = sinusoidal_positions(t, self.config.d_model,
                                                       dtype=self.dtype)
        return self._pe_cache[key]

    def _attend(self, x_q, x_kv, bias, prefix, train, rng, collect=None):
        p, cfg = self.params, self.config
        if x_kv is None:
            x_kv = x_q
        B, Tq, D = x_q.shape
        Tk = x_kv.shape[1]
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

        def heads(x, w, b, t):
            h = ad.add(ad.matmul(x, p[f"{prefix}.{w}"]), p[f"{prefix}.{b}"])
            return ad.transpose(ad.reshape(h, (B, t, H, dh)), (0, 2, 1, 3))

        q = heads(x_q, "wq", "qb", Tq)
        k = heads(x_kv, "wk", "kb", Tk)
        v = heads(x_kv, "wv", "vb", Tk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                        1.0 / math.sqrt(dh))
        attn = ad.softmax(ad.add(scores, Tensor(bias)))
        if collect is not None:
            collect.append(attn.data)
        attn = ad.dropout(attn, cfg.dropout, rng, train)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, Tq, D))
        return ad.add(ad.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.ob"])

    def _ffn(self, x, prefix, train, rng):
        p, cfg = self.params, self.config
        h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        h = ad.dropout(h, cfg.dropout, rng, train)
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, x, gname, bname):
        return ad.layer_norm(x, self.params[gname], self.params[bname])

    def _check_batch(self, tokens, types, what):
        tokens, types = np.asarray(tokens), np.asarray(types)
        if tokens.shape != types.shape or tokens.ndim != 2:
            raise ShapeMismatch(f"{what}: tokens {tokens.shape} vs types {types.shape}")
        if tokens.shape[1] > self.config.max_len:
            raise SequenceTooLong(f"{what}: length {tokens.shape[1]} exceeds "
                                  f"max_len {self.config.max_len}")
        if np.any(tokens >= self.config.vocab_size) or np.any(tokens < 0):
            raise ShapeMismatch(f"{what}: token id outside vocabulary")
        if np.any(types >= self.config.n_types) or np.any(types < 0):
            raise ShapeMismatch(f"{what}: type id outside type table")
        return tokens, types

    def encode_forward(self, enc_tokens, enc_types, enc_mask=None,
                       train=False, rng=None):
        """-> (states Tensor (B,T,d), real-token mask (B,T) bool)."""
        cfg, p = self.config, self.params
        enc_tokens, enc_types = self._check_batch(enc_tokens, enc_types, "encoder")
        if enc_mask is None:
            enc_mask = enc_tokens != 0
        enc_mask = np.asarray(enc_mask, dtype=bool)
        if enc_mask.shape != enc_tokens.shape:
            raise ShapeMismatch("encoder mask shape mismatch")
        if not enc_mask.any(axis=1).all():
            raise AllPositionsPadded("encoder batch row with no real token")
        B, T = enc_tokens.shape
        scale = math.sqrt(cfg.d_model)
        x = ad.add(ad.mul(ad.embedding(p["tok_emb"], enc_tokens), scale),
                   ad.embedding(p["type_emb"], enc_types))
        x = ad.add(x, Tensor(self._pe(T)[None, :, :]))
        x = ad.dropout(x, cfg.dropout, rng, train)
        bias = _pad_bias(enc_mask, self.dtype)
        for i in range(cfg.enc_layers):
            pre = f"enc{i}"
            a = self._attend(self._ln(x, f"{pre}.ln1g", f"{pre}.ln1b"),
                             None, bias, f"{pre}.self", train, rng)
            x = ad.add(x, ad.dropout(a, cfg.dropout, rng, train))
            h = self._ffn(self._ln(x, f"{pre}.ln2g", f"{pre}.ln2b"), pre, train, rng)
            x = ad.add(x, ad.dropout(h, cfg.dropout, rng, train))
        return self._ln(x, "enc_lng", "enc_lnb"), enc_mask

    def decode_forward(self, dec_tokens, dec_types, dec_hard_pos, dec_soft_pos,
                       enc_states, enc_mask, use_soft, dec_mask=None,
                       train=False, rng=None, collect_attn=None):
        """-> logits Tensor (B, T, vocab). collect_attn, if a list, receives one
        (B, heads, T, Ts) cross-attention array per decoder layer."""
        cfg, p = self.config, self.params
        dec_tokens, dec_types = self._check_batch(dec_tokens, dec_types, "decoder")
        B, T = dec_tokens.shape
        if enc_states.shape[0] != B:
            raise ShapeMismatch("decoder/encoder batch size mismatch")
        hard = np.asarray(dec_hard_pos)
        if hard.shape != dec_tokens.shape:
            raise ShapeMismatch("hard position shape mismatch")
        if np.any(hard < 0) or np.any(hard >= cfg.max_len):
            raise SoftPositionOutOfRange("hard position outside position table")
        if dec_mask is None:
            dec_mask = dec_tokens != 0
        dec_mask = np.asarray(dec_mask, dtype=bool)

        scale = math.sqrt(cfg.d_model)
        x = ad.add(ad.mul(ad.embedding(p["tok_emb"], dec_tokens), scale),
                   ad.embedding(p["type_emb"], dec_types))
        x = ad.add(x, ad.embedding(p["dec_hard_pos"], hard))
        if use_soft:
            soft = np.asarray(dec_soft_pos)
            if soft.shape != dec_tokens.shape:
                raise ShapeMismatch("soft position shape mismatch")
            Ts = enc_states.shape[1]
            if np.any(soft < 0) or np.any(soft >= Ts):
                raise SoftPositionOutOfRange(
                    f"soft position outside encoder length {Ts}")
            x = ad.add(x, ad.embedding(p["dec_soft_pos"], soft))
        x = ad.dropout(x, cfg.dropout, rng, train)

        self_bias = _causal_bias(T, self.dtype) + _pad_bias(dec_mask, self.dtype)
        cross_bias = _pad_bias(enc_mask, self.dtype)
        for i in range(cfg.dec_layers):
            pre = f"dec{i}"
            a = self._attend(self._ln(x, f"{pre}.ln1g", f"{pre}.ln1b"),
                             None, self_bias, f"{pre}.self", train, rng)
            x = ad.add(x, ad.dropout(a, cfg.dropout, rng, train))
            c = self._attend(self._ln(x, f"{pre}.ln2g", f"{pre}.ln2b"),
                             enc_states, cross_bias, f"{pre}.cross", train, rng,
                             collect=collect_attn)
            x = ad.add(x, ad.dropout(c, cfg.dropout, rng, train))
            h = self._ffn(self._ln(x, f"{pre}.ln3g", f"{pre}.ln3b"), pre, train, rng)
            x = ad.add(x, ad.dropout(h, cfg.dropout, rng, train))
        x = self._ln(x, "dec_lng", "dec_lnb")
        # tied output projection
        return ad.matmul(x, ad.transpose(p["tok_emb"], (1, 0)))

    def loss(self, logits, targets, target_mask):
        """Label-smoothed NLL averaged over real target tokens.

        Returns (loss Tensor, stats dict with nll_sum / n_tokens / n_correct
        computed outside the graph).
        """
        cfg = self.config
        targets = np.asarray(targets)
        target_mask = np.asarray(target_mask, dtype=bool)
        if logits.shape[:2] != targets.shape or targets.shape != target_mask.shape:
            raise ShapeMismatch("loss: logits/targets/mask disagree")
        n_real = int(target_mask.sum())
        if n_real == 0:
            raise AllPositionsPadded("no real target token in batch")
        eps, V = cfg.label_smoothing, cfg.vocab_size
        logp = ad.log_softmax(logits)
        gold = ad.gather_last(logp, targets)
        mask = target_mask.astype(logits.dtype)
        nll = ad.mul(ad.tsum(ad.mul(gold, Tensor(mask))), -1.0 / n_real)
        if eps > 0.0:
            mean_all = ad.mul(ad.tsum(ad.mul(ad.tmean(logp, axis=-1), Tensor(mask))),
                              -1.0 / n_real)
            loss = ad.add(ad.mul(nll, 1.0 - eps), ad.mul(mean_all, eps))
        else:
            loss = nll
        pred = logits.data.argmax(-1)
        stats = {
            "n_tokens": n_real,
            "nll_sum": float(-(np.take_along_axis(
                logp.data, targets[..., None], -1)[..., 0] * mask).sum()),
            "n_correct": int(((pred == targets) & target_mask).sum()),
        }
        return loss, stats

    def greedy_decode_batch(self, src_tokens, src_types, tgt_type_id,
                            bos_id, eos_id, max_len=None):
        """-> (list of id lists without bos/eos, list of truncation flags).

        Argmax ties resolve to the lowest token id. No dropout, soft
        positions off.
        """
        cfg = self.config
        # max_len counts generated tokens; the hard position table caps it
        limit = cfg.max_len - 1 if max_len is None else min(max_len, cfg.max_len - 1)
        enc_states, enc_mask = self.encode_forward(src_tokens, src_types)
        B = enc_states.shape[0]
        seqs = np.full((B, 1), bos_id, dtype=np.int64)
        types = np.full((B, 1), tgt_type_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        while seqs.shape[1] - 1 < limit and not done.all():
            t = seqs.shape[1]
            hard = np.broadcast_to(np.arange(t), (B, t))
            logits = self.decode_forward(
                seqs, types, hard, None, enc_states, enc_mask, use_soft=False,
                dec_mask=np.ones((B, t), dtype=bool))
            nxt = logits.data[:, -1, :].argmax(-1)
            nxt = np.where(done, eos_id, nxt)
            done |= nxt == eos_id
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            types = np.concatenate([types, np.full((B, 1), tgt_type_id)], axis=1)
        out, truncated = [], []
        for b in range(B):
            ids = []
            for t in seqs[b, 1:]:
                if t == eos_id:
                    break
                ids.append(int(t))
            out.append(ids)
            truncated.append(not bool(done[b]))
        return out, truncated

    def greedy_decode(self, src_tokens, src_types, tgt_type_id, bos_id, eos_id,
                      max_len=None):
        """Single-sentence greedy decoding; returns (ids, truncated)."""
        outs, trunc = self.greedy_decode_batch(
            np.asarray(src_tokens)[None, :], np.asarray(src_types)[None, :],
            tgt_type_id, bos_id, eos_id, max_len=max_len)
        return outs[0], trunc[0]

    def clone_params(self):
        return {k: Tensor(t.data.copy(), requires_grad=True)
                for k, t in self.params.items()}

    def astype(self, dtype):
        return Model(self.config,
                     {k: Tensor(t.data.astype(dtype), requires_grad=True)
                      for k, t in self.params.items()})


def save_checkpoint(path, model: Model):
    """`bdlm-ckpt v1`, config lines, then named little-endian f32 tensors."""
    cfg = model.config
    head = [CKPT_MAGIC.encode()]
    for k in CONFIG_FIELDS:
        head.append(f"config {k} {getattr(cfg, k)!r}".encode())
    head.append(f"#tensors {len(model.params)}".encode())
    blob = b"\n".join(head) + b"\n"
    parts = [blob]
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        dims = " ".join(str(d) for d in arr.shape)
        parts.append(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        buf = f.read()

    def take_line(pos):
        end = buf.index(b"\n", pos)
        return buf[pos:end].decode(), end + 1

    line, pos = take_line(0)
    if line != CKPT_MAGIC:
        raise ConfigMismatch(f"{path}: not a {CKPT_MAGIC} file")
    kv = {}
    line, pos = take_line(pos)
    while line.startswith("config "):
        _, k, v = line.split(" ", 2)
        kv[k] = float(v) if k in _FLOAT_FIELDS else int(v)
        line, pos = take_line(pos)
    missing = [k for k in CONFIG_FIELDS if k not in kv]
    if missing or not line.startswith("#tensors "):
        raise ConfigMismatch(f"{path}: malformed checkpoint header ({missing})")
    config = ModelConfig(**kv)
    n_tensors = int(line.split(" ", 1)[1])
    params = {}
    for _ in range(n_tensors):
        line, pos = take_line(pos)
        fields = line.split(" ")
        name, rank = fields[0], int(fields[1])
        shape = tuple(int(x) for x in fields[2:2 + rank])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
        pos += count * 4
        params[name] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    expected = init_params(config, seed=0)
    if set(expected) != set(params):
        raise ConfigMismatch(f"{path}: tensor names do not match config")
    for k in expected:
        if expected[k].shape != params[k].shape:
            raise ShapeMismatch(f"{path}: tensor {k} has shape {params[k].shape}, "
                                f"config implies {expected[k].shape}")
    return Model(config, params)
