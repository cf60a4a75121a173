"""Conditional clean-token predictors p(x0 | x_t, condition).

Two implementations share one calling convention:

* :class:`TinyTransformer` -- a small trainable transformer over the N grid
  positions.  Each block applies bidirectional self-attention, optional
  cross-attention to the encoded condition sequence, and a feed-forward
  net; the timestep enters through adaptive layer norm (scale/shift from a
  linear map of a learned step embedding).  A ``causal=True`` variant with
  no timestep input doubles as the autoregressive baseline.
* :class:`OracleDenoiser` -- the exact Bayes posterior over an enumerated
  dataset, used as ground truth in tests and verification runs.

``predict_x0`` returns per-position probability rows over the K ordinary
tokens (MASK is never a prediction target).  Gradients for training come
from ``loss_and_gradients``, which replays the forward rule on the autodiff
tape and backpropagates an objective callback's loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codec import TokenGrid
from .diffusion import ZeroProbabilityError
from .schedule import NoiseSchedule

PROB_FLOOR = 1e-30
_NEG_BIG = 1e30

Condition = tuple  # sequence of integer condition tokens; () = unconditional


def _flat_tokens(x) -> np.ndarray:
    t = x.tokens if isinstance(x, TokenGrid) else np.asarray(x)
    return t.reshape(-1).astype(np.int64)


@dataclass
class ModelConfig:
    K: int
    T: int
    grid_h: int
    grid_w: int
    blocks: int = 2
    width: int = 64
    heads: int = 2
    ffn_mult: int = 4
    cond_vocab: int = 0
    max_cond_len: int = 0
    causal: bool = False
    use_timestep: bool = True

    @property
    def n_positions(self) -> int:
        return self.grid_h * self.grid_w

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.cond_vocab > 0 and self.max_cond_len < 1:
            raise ValueError("cond_vocab > 0 requires max_cond_len >= 1")


class TinyTransformer:
    """Trainable denoiser; parameters live in a fixed-order name -> Tensor dict."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.calls = 0  # forward-pass counter, read by samplers and manifests
        rng = np.random.default_rng(seed)
        C, F = cfg.width, cfg.width * cfg.ffn_mult

        def w(name, shape):
            self.params[name] = Tensor(rng.uniform(-0.02, 0.02, size=shape))

        def z(name, shape):
            self.params[name] = Tensor(np.zeros(shape))

        w("tok_emb", (cfg.K + 1, C))      # MASK row doubles as the AR start token
        w("pos_emb", (cfg.n_positions, C))
        if cfg.use_timestep:
            w("time_emb", (cfg.T, C))
        if cfg.cond_vocab > 0:
            w("cond_emb", (cfg.cond_vocab, C))
            w("cond_pos_emb", (cfg.max_cond_len, C))
        for i in range(cfg.blocks):
            if cfg.use_timestep:
                z(f"b{i}.ada_attn.W", (C, 2 * C))
            for nm in ("Wq", "Wk", "Wv", "Wo"):
                w(f"b{i}.attn.{nm}", (C, C))
            for nm in ("bq", "bk", "bv", "bo"):
                z(f"b{i}.attn.{nm}", (C,))
            if cfg.cond_vocab > 0:
                if cfg.use_timestep:
                    z(f"b{i}.ada_cross.W", (C, 2 * C))
                for nm in ("Wq", "Wk", "Wv", "Wo"):
                    w(f"b{i}.cross.{nm}", (C, C))
                for nm in ("bq", "bk", "bv", "bo"):
                    z(f"b{i}.cross.{nm}", (C,))
            if cfg.use_timestep:
                z(f"b{i}.ada_ffn.W", (C, 2 * C))
            w(f"b{i}.ffn.W1", (C, F))
            z(f"b{i}.ffn.b1", (F,))
            w(f"b{i}.ffn.W2", (F, C))
            z(f"b{i}.ffn.b2", (C,))
        if cfg.use_timestep:
            z("ada_final.W", (C, 2 * C))
        w("head.W", (C, cfg.K))
        z("head.b", (cfg.K,))

        if not cfg.causal:
            self._attn_mask = None
        else:
            n = cfg.n_positions
            self._attn_mask = np.triu(np.full((n, n), -_NEG_BIG), k=1)

    # -- convenience views ------------------------------------------------
    @property
    def K(self) -> int:
        return self.cfg.K

    @property
    def T(self) -> int:
        return self.cfg.T

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.cfg.grid_h, self.cfg.grid_w)

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # -- forward rule ------------------------------------------------------
    def _adaln(self, h, t: int | None, site: str):
        hn = ag.layer_norm_rows(h)
        if t is None or not self.cfg.use_timestep:
            return hn
        e = ag.take_rows(self.params["time_emb"], np.array([t - 1]))
        ss = e @ self.params[f"{site}.W"]  # (1, 2C): [scale delta | shift]
        C = self.cfg.width
        a = ag.slice_cols(ss, 0, C) + 1.0
        b = ag.slice_cols(ss, C, 2 * C)
        return hn * a + b

    def _attention(self, q_in, kv_in, prefix: str, mask):
        C, H = self.cfg.width, self.cfg.heads
        dh = C // H
        p = self.params
        q = q_in @ p[f"{prefix}.Wq"] + p[f"{prefix}.bq"]
        k = kv_in @ p[f"{prefix}.Wk"] + p[f"{prefix}.bk"]
        v = kv_in @ p[f"{prefix}.Wv"] + p[f"{prefix}.bv"]
        out = None
        for h in range(H):
            qh = ag.slice_cols(q, h * dh, (h + 1) * dh)
            kh = ag.slice_cols(k, h * dh, (h + 1) * dh)
            vh = ag.slice_cols(v, h * dh, (h + 1) * dh)
            scores = (qh @ ag.transpose(kh)) * (1.0 / np.sqrt(dh))
            if mask is not None:
                scores = scores + mask
            att = ag.softmax_rows(scores) @ vh
            piece = att @ ag.slice_rows(p[f"{prefix}.Wo"], h * dh, (h + 1) * dh)
            out = piece if out is None else out + piece
        return out + p[f"{prefix}.bo"]

    def _encode_condition_graph(self, y: Condition):
        if len(y) == 0:
            return None
        if self.cfg.cond_vocab == 0:
            raise ValueError("model has no condition vocabulary")
        if len(y) > self.cfg.max_cond_len:
            raise ValueError(f"condition length {len(y)} exceeds {self.cfg.max_cond_len}")
        y = np.asarray(y, dtype=np.int64)
        if np.any(y < 0) or np.any(y >= self.cfg.cond_vocab):
            raise ValueError("condition token out of vocabulary")
        emb = ag.take_rows(self.params["cond_emb"], y)
        pos = ag.slice_rows(self.params["cond_pos_emb"], 0, len(y))
        return emb + pos

    def forward_graph(self, x_tokens, t: int | None, y: Condition = ()) -> Tensor:
        """Log-probability rows (N, K) as a live autodiff node."""
        x = _flat_tokens(x_tokens)
        cfg = self.cfg
        if x.shape != (cfg.n_positions,):
            raise ValueError(f"expected {cfg.n_positions} tokens, got {x.shape}")
        if np.any(x < 0) or np.any(x > cfg.K):
            raise ValueError("token index out of range")
        if cfg.use_timestep:
            if t is None or not 1 <= t <= cfg.T:
                raise ValueError(f"timestep {t} outside [1, {cfg.T}]")
        cond = self._encode_condition_graph(tuple(y))
        h = ag.take_rows(self.params["tok_emb"], x) + self.params["pos_emb"]
        for i in range(cfg.blocks):
            h = h + self._attention(self._adaln(h, t, f"b{i}.ada_attn"), None, f"b{i}.attn",
                                    self._attn_mask)
            if cond is not None:
                h = h + self._attention(self._adaln(h, t, f"b{i}.ada_cross"), cond,
                                        f"b{i}.cross", None)
            hn = self._adaln(h, t, f"b{i}.ada_ffn")
            ff = ag.gelu(hn @ self.params[f"b{i}.ffn.W1"] + self.params[f"b{i}.ffn.b1"])
            h = h + (ff @ self.params[f"b{i}.ffn.W2"] + self.params[f"b{i}.ffn.b2"])
        h = self._adaln(h, t, "ada_final")
        self.calls += 1
        return ag.log_softmax_rows(h @ self.params["head.W"] + self.params["head.b"])

    def _attention_kv(self, q_in, kv, prefix, mask):  # pragma: no cover - reserved
        raise NotImplementedError

    def predict_x0(self, x_t, t: int, y: Condition = ()) -> np.ndarray:
        """Probability rows (N, K); strictly positive (floored at 1e-30)."""
        logp = self.forward_graph(x_t, t, y).value
        return np.maximum(np.exp(logp), PROB_FLOOR)

    def predict_x0_batch(self, x_t_batch: np.ndarray, t: int, y: Condition = ()) -> np.ndarray:
        return np.stack([self.predict_x0(row, t, y) for row in np.asarray(x_t_batch)])


def encode_condition(model: TinyTransformer, y: Condition) -> np.ndarray:
    """Deterministic (M, width) feature sequence for a condition; M may be 0."""
    node = model._encode_condition_graph(tuple(y))
    if node is None:
        return np.zeros((0, model.cfg.width))
    return node.value.copy()


def predict_x0(model, x_t, t: int, y: Condition = ()) -> np.ndarray:
    """Functional form of the shared predictor interface."""
    return model.predict_x0(x_t, t, y)


def loss_and_gradients(model: TinyTransformer, batch, objective):
    """Loss and exact parameter gradients for a batch, by reverse accumulation.

    ``objective(logp_node, example) -> scalar Tensor`` builds each example's
    loss on the tape from the forward output; contributions are summed in
    ascending batch order, so duplicating an example doubles its share.
    Raises on a non-finite loss, naming the offending example.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    for p in model.params.values():
        p.grad = None
    total = None
    for i, ex in enumerate(batch):
        logp = model.forward_graph(ex["x_t"], ex.get("t"), ex.get("y", ()))
        loss_i = objective(logp, ex)
        v = float(loss_i.value)
        if not np.isfinite(v):
            raise ValueError(f"non-finite loss {v} at batch index {i}")
        total = loss_i if total is None else total + loss_i
    ag.backward(total)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.value))
             for name, p in model.params.items()}
    return float(total.value), grads


class OracleDenoiser:
    """Exact Bayes-optimal predictor over an enumerated dataset.

    The dataset is a list of (TokenGrid, condition) or (TokenGrid, condition,
    probability) entries; probabilities default to uniform and must sum to 1.
    Conditioning filters to exactly matching condition sequences.
    """

    def __init__(self, dataset, s: NoiseSchedule):
        if not dataset:
            raise ValueError("dataset must be nonempty")
        self.schedule = s
        seqs, conds, probs = [], [], []
        for entry in dataset:
            g, y = entry[0], tuple(entry[1])
            p = entry[2] if len(entry) > 2 else 1.0 / len(dataset)
            if g.K != s.K:
                raise ValueError("dataset grid K does not match schedule K")
            if g.has_mask():
                raise ValueError("dataset grids must be mask-free")
            seqs.append(g.tokens.reshape(-1))
            conds.append(y)
            probs.append(float(p))
        self.grid_shape = (dataset[0][0].h, dataset[0][0].w)
        self.seqs = np.stack(seqs)                       # (S, N)
        self.conds = conds
        self.probs = np.asarray(probs)
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("dataset probabilities must sum to 1")
        self.K = s.K
        self.T = s.T
        self.calls = 0
        # one-hot over ordinary tokens, used to scatter sequence weights
        S, N = self.seqs.shape
        self._onehot = np.zeros((S, N, self.K))
        self._onehot[np.arange(S)[:, None], np.arange(N)[None, :], self.seqs] = 1.0

    def _select(self, y: Condition):
        idx = [i for i, c in enumerate(self.conds) if c == tuple(y)]
        if not idx:
            raise ValueError(f"condition {tuple(y)} not present in dataset")
        return np.asarray(idx)

    def predict_x0_batch(self, x_t_batch, t: int, y: Condition = ()) -> np.ndarray:
        """(B, N, K) exact posteriors p(x0_i = k | x_t, y) for a batch of grids."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        x = np.asarray(x_t_batch, dtype=np.int64)
        sel = self._select(y)
        seqs, ohot = self.seqs[sel], self._onehot[sel]
        pri = self.probs[sel] / self.probs[sel].sum()
        s = self.schedule
        ab, bb, gb = s.alpha_bar[t], s.beta_bar[t], s.gamma_bar[t]
        is_mask = x == s.mask_index                      # (B, N)
        # log q(x_t^j | seq^j) per (batch, seq, position)
        match = x[:, None, :] == seqs[None, :, :]
        q = np.where(is_mask[:, None, :], gb, np.where(match, ab + bb, bb))
        with np.errstate(divide="ignore"):
            logq = np.where(q > 0.0, np.log(np.maximum(q, 1e-300)), -np.inf)
        logw = logq.sum(axis=2) + np.log(pri)[None, :]   # (B, S)
        shift = logw.max(axis=1, keepdims=True)
        if np.any(~np.isfinite(shift)):
            raise ZeroProbabilityError("x_t unreachable from every dataset sequence")
        w = np.exp(logw - shift)
        numer = np.einsum("bs,snk->bnk", w, ohot)
        return numer / w.sum(axis=1)[:, None, None]

    def predict_x0(self, x_t, t: int, y: Condition = ()) -> np.ndarray:
        out = self.predict_x0_batch(_flat_tokens(x_t)[None, :], t, y)[0]
        self.calls += 1
        return out


# ---------------------------------------------------------------------------
# Checkpoint bytes (model parameters only; trainer state wraps this)
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"TDMZ"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sI12I")


def model_to_bytes(model: TinyTransformer) -> bytes:
    c = model.cfg
    head = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, c.K, c.T, c.grid_h, c.grid_w,
                        c.blocks, c.width, c.heads, c.ffn_mult, c.cond_vocab,
                        c.max_cond_len, int(c.causal), int(c.use_timestep))
    blobs = [p.value.astype("<f8").tobytes() for p in model.params.values()]
    return head + b"".join(blobs)


def model_from_bytes(data: bytes) -> TinyTransformer:
    if len(data) < _HEADER.size:
        raise ValueError("truncated checkpoint")
    magic, version, *dims = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(K=dims[0], T=dims[1], grid_h=dims[2], grid_w=dims[3],
                      blocks=dims[4], width=dims[5], heads=dims[6], ffn_mult=dims[7],
                      cond_vocab=dims[8], max_cond_len=dims[9], causal=bool(dims[10]),
                      use_timestep=bool(dims[11]))
    model = TinyTransformer(cfg, seed=0)
    off = _HEADER.size
    for p in model.params.values():
        n = p.value.size * 8
        if off + n > len(data):
            raise ValueError("truncated checkpoint")
        p.value = np.frombuffer(data[off:off + n], dtype="<f8").reshape(p.value.shape).copy()
        off += n
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return model


def save_model(model: TinyTransformer, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> TinyTransformer:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
