"""Temporal Fusion Transformer forward and backward passes.

Component order:

1. per-variable transforms to width ``d`` (linear for reals, embeddings for
   categorical statics);
2. static variable selection, then four static context GRNs (selection,
   LSTM initial hidden, LSTM initial cell, enrichment);
3. encoder / decoder variable selection conditioned on the selection context;
4. LSTM encoder over ``k`` steps (state from the static contexts), LSTM
   decoder over ``tau`` steps;
5. gate + add + norm over the LSTM outputs;
6. static enrichment GRN;
7. interpretable multi-head attention (decoder queries, causal mask, one
   shared value projection, head weights averaged);
8. gate + add + norm, position-wise GRN, final gate + add + norm against the
   post-LSTM residual;
9. one affine output per quantile level.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import WindowBatch
from ..nn import (
    ParamStore,
    ShapeError,
    causal_mask,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    elu_backward,
    elu_forward,
    embedding_backward,
    embedding_forward,
    glu_backward,
    glu_forward,
    layernorm_backward,
    layernorm_forward,
    lstm_backward,
    lstm_forward,
    quantile_loss,
    scaled_dot_attention,
    scaled_dot_attention_backward,
    softmax_backward,
    softmax_forward,
)


@dataclass
class TftConfig:
    hidden_size: int = 16
    n_heads: int = 4
    dropout: float = 0.1
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    encoder_length: int = 168
    decoder_length: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0
    target_history_mode: str = "observed"
    grad_clip: float | None = 1.0
    exclude_gap_labels: bool = True

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if 0.5 not in self.quantiles:
            raise ValueError("quantile levels must include the median 0.5")
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError("quantile levels must lie in (0, 1)")

    @property
    def median_index(self) -> int:
        return self.quantiles.index(0.5)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d) -> "TftConfig":
        return cls(**d)


@dataclass
class ChannelLayout:
    encoder_channels: tuple[str, ...]
    decoder_channels: tuple[str, ...]
    static_cat_names: tuple[str, ...] = ()
    static_cat_sizes: tuple[int, ...] = ()
    static_real_names: tuple[str, ...] = ()

    def __post_init__(self):
        for f in ("encoder_channels", "decoder_channels", "static_cat_names", "static_cat_sizes",
                  "static_real_names"):
            setattr(self, f, tuple(getattr(self, f)))

    @classmethod
    def from_batch(cls, batch: WindowBatch, vocab_sizes) -> "ChannelLayout":
        return cls(batch.encoder_channels, batch.decoder_channels, batch.static_cat_names,
                   tuple(vocab_sizes), batch.static_real_names)

    @property
    def static_names(self) -> tuple[str, ...]:
        return self.static_cat_names + self.static_real_names

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "ChannelLayout":
        return cls(**d)


@dataclass
class TftOutput:
    quantiles: np.ndarray          # (B, tau, Q), sorted along Q
    raw_quantiles: np.ndarray      # (B, tau, Q), as produced by the heads
    attention: np.ndarray          # (B, heads, tau, k + tau)
    encoder_weights: np.ndarray    # (B, k, m_enc)
    decoder_weights: np.ndarray    # (B, tau, m_dec)
    static_weights: np.ndarray     # (B, m_s)

    @property
    def mean_attention(self) -> np.ndarray:
        return self.attention.mean(axis=1)


def _seeded(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class TemporalFusionTransformer:
    """All learnable parameters live in ``self.store`` keyed by name; per
    variable parameters are keyed by the variable's channel name."""

    def __init__(self, config: TftConfig, layout: ChannelLayout, store: ParamStore | None = None):
        self.config = config
        self.layout = layout
        self.d = config.hidden_size
        self.n_heads = config.n_heads
        self.d_head = self.d // self.n_heads
        self.n_q = len(config.quantiles)
        if store is None:
            store = ParamStore()
            self._init_params(store)
        self.store = store

    # -- parameter construction ------------------------------------------

    def _dense(self, s, name, n_in, n_out, bias=True):
        limit = np.sqrt(6.0 / (n_in + n_out))
        s.add(name + ".W", _seeded(self.config.seed, name).uniform(-limit, limit, (n_in, n_out)))
        if bias:
            s.add(name + ".b", np.zeros(n_out))

    def _grn(self, s, name, n_in, n_out, ctx=False):
        d = self.d
        self._dense(s, name + ".fc1", n_in, d)
        if ctx:
            self._dense(s, name + ".ctx", d, d, bias=False)
        self._dense(s, name + ".fc2", d, n_out)
        self._gan(s, name, n_out, skip_in=n_in)

    def _gan(self, s, name, n_out, skip_in=None):
        self._dense(s, name + ".gate", n_out, n_out)
        self._dense(s, name + ".value", n_out, n_out)
        if skip_in is not None and skip_in != n_out:
            self._dense(s, name + ".skip", skip_in, n_out)
        s.add(name + ".ln.g", np.ones(n_out))
        s.add(name + ".ln.b", np.zeros(n_out))

    def _vsn(self, s, name, names, ctx):
        d = self.d
        if not names:
            return
        self._grn(s, name + ".flat", len(names) * d, len(names), ctx=ctx)
        for v in names:
            self._grn(s, f"{name}.var.{v}", d, d)

    def _real_transform(self, s, name):
        s.add(name + ".w", _seeded(self.config.seed, name).normal(0.0, 1.0, self.d))
        s.add(name + ".b", np.zeros(self.d))

    def _init_params(self, s: ParamStore):
        lay, d = self.layout, self.d
        for name, size in zip(lay.static_cat_names, lay.static_cat_sizes):
            s.add(f"static.emb.{name}", _seeded(self.config.seed, name).normal(0.0, 1.0, (size, d)))
        for name in lay.static_real_names:
            self._real_transform(s, f"static.lin.{name}")
        for name in lay.encoder_channels:
            self._real_transform(s, f"enc.lin.{name}")
        for name in lay.decoder_channels:
            self._real_transform(s, f"dec.lin.{name}")
        self._vsn(s, "static_vsn", lay.static_names, ctx=False)
        for c in ("ctx_select", "ctx_hidden", "ctx_cell", "ctx_enrich"):
            self._grn(s, c, d, d)
        self._vsn(s, "enc_vsn", lay.encoder_channels, ctx=True)
        self._vsn(s, "dec_vsn", lay.decoder_channels, ctx=True)
        for lstm in ("lstm_enc", "lstm_dec"):
            self._dense(s, lstm + ".Wx", d, 4 * d, bias=False)
            self._dense(s, lstm + ".Wh", d, 4 * d, bias=False)
            b = np.zeros(4 * d)
            b[d:2 * d] = 1.0
            s.add(lstm + ".b", b)
        self._gan(s, "post_lstm", d)
        self._grn(s, "enrich", d, d, ctx=True)
        self._dense(s, "attn.q", d, self.n_heads * self.d_head)
        self._dense(s, "attn.k", d, self.n_heads * self.d_head)
        self._dense(s, "attn.v", d, self.d_head)
        self._dense(s, "attn.out", self.d_head, d)
        self._gan(s, "post_attn", d)
        self._grn(s, "positionwise", d, d)
        self._gan(s, "pre_output", d)
        self._dense(s, "output", d, self.n_q)

    # -- building blocks -------------------------------------------------

    def _lin(self, name, x):
        P = self.store.params
        return dense_forward(x, P[name + ".W"], P[name + ".b"])

    def _lin_back(self, name, dy, cache):
        dx, dW, db = dense_backward(dy, cache)
        self.store.accumulate(name + ".W", dW)
        self.store.accumulate(name + ".b", db)
        return dx

    def _gan_fwd(self, name, x, skip, train, rng):
        P = self.store.params
        xd, c_drop = dropout_forward(x, self.config.dropout, rng, train)
        g, c_g = self._lin(name + ".gate", xd)
        v, c_v = self._lin(name + ".value", xd)
        glu, c_glu = glu_forward(g, v)
        if name + ".skip.W" in P:
            sk, c_sk = self._lin(name + ".skip", skip)
        else:
            sk, c_sk = skip, None
        out, c_ln = layernorm_forward(sk + glu, P[name + ".ln.g"], P[name + ".ln.b"])
        return out, (c_drop, c_g, c_v, c_glu, c_sk, c_ln)

    def _gan_back(self, name, dout, cache):
        """Returns ``(dx, dskip)``."""
        c_drop, c_g, c_v, c_glu, c_sk, c_ln = cache
        ds, dgam, dbet = layernorm_backward(dout, c_ln)
        self.store.accumulate(name + ".ln.g", dgam)
        self.store.accumulate(name + ".ln.b", dbet)
        dg, dv = glu_backward(ds, c_glu)
        dxd = self._lin_back(name + ".gate", dg, c_g) + self._lin_back(name + ".value", dv, c_v)
        dx = dropout_backward(dxd, c_drop)
        dskip = self._lin_back(name + ".skip", ds, c_sk) if c_sk is not None else ds
        return dx, dskip

    def _grn_fwd(self, name, a, ctx=None, train=False, rng=None):
        P = self.store.params
        h, c1 = self._lin(name + ".fc1", a)
        if ctx is not None:
            cp = ctx @ P[name + ".ctx.W"]
            h = h + (cp[:, None, :] if h.ndim == 3 else cp)
        e, c_elu = elu_forward(h)
        h2, c2 = self._lin(name + ".fc2", e)
        out, c_gan = self._gan_fwd(name, h2, a, train, rng)
        return out, (c1, ctx, c_elu, c2, c_gan)

    def _grn_back(self, name, dout, cache):
        """Returns ``(da, dctx)``."""
        c1, ctx, c_elu, c2, c_gan = cache
        dh2, da_skip = self._gan_back(name, dout, c_gan)
        de = self._lin_back(name + ".fc2", dh2, c2)
        dh = elu_backward(de, c_elu)
        dctx = None
        if ctx is not None:
            dcp = dh.sum(axis=1) if dh.ndim == 3 else dh
            W = self.store.params[name + ".ctx.W"]
            self.store.accumulate(name + ".ctx.W", ctx.T @ dcp)
            dctx = dcp @ W.T
        da = self._lin_back(name + ".fc1", dh, c1) + da_skip
        return da, dctx

    def _vsn_fwd(self, name, xs, names, ctx, train, rng):
        flat = np.concatenate(xs, axis=-1)
        logits, c_flat = self._grn_fwd(name + ".flat", flat, ctx, train, rng)
        w, c_sm = softmax_forward(logits)
        procs, c_procs = [], []
        for x, v in zip(xs, names):
            p, c = self._grn_fwd(f"{name}.var.{v}", x, None, train, rng)
            procs.append(p)
            c_procs.append(c)
        P = np.stack(procs, axis=-1)
        out = (P * w[..., None, :]).sum(axis=-1)
        return out, w, (c_flat, c_sm, c_procs, P, w, names)

    def _vsn_back(self, name, dout, cache):
        """Returns ``(list of dx per variable, dctx)``."""
        c_flat, c_sm, c_procs, P, w, names = cache
        dw = (dout[..., None] * P).sum(axis=-2)
        dP = dout[..., None] * w[..., None, :]
        dlogits = softmax_backward(dw, c_sm)
        dflat, dctx = self._grn_back(name + ".flat", dlogits, c_flat)
        dxs = np.split(dflat, len(names), axis=-1)
        out = []
        for j, v in enumerate(names):
            dx, _ = self._grn_back(f"{name}.var.{v}", dP[..., j], c_procs[j])
            out.append(dxs[j] + dx)
        return out, dctx

    def _real_fwd(self, name, x):
        P = self.store.params
        return x[..., None] * P[name + ".w"] + P[name + ".b"]

    def _real_back(self, name, dy, x):
        d = self.d
        self.store.accumulate(name + ".w", (dy * x[..., None]).reshape(-1, d).sum(axis=0))
        self.store.accumulate(name + ".b", dy.reshape(-1, d).sum(axis=0))

    # -- forward / backward ----------------------------------------------

    def check_batch(self, batch: WindowBatch) -> None:
        lay, cfg = self.layout, self.config
        if not batch.normalized:
            raise ValueError("tft_forward expects normalised windows")
        if (tuple(batch.encoder_channels) != lay.encoder_channels
                or tuple(batch.decoder_channels) != lay.decoder_channels
                or tuple(batch.static_cat_names) != lay.static_cat_names
                or tuple(batch.static_real_names) != lay.static_real_names):
            raise ShapeError("tft_forward: batch channels do not match the model layout")
        if batch.encoder_length != cfg.encoder_length or batch.decoder_length != cfg.decoder_length:
            raise ShapeError(
                f"tft_forward: windows are k={batch.encoder_length}, tau={batch.decoder_length}; "
                f"model expects k={cfg.encoder_length}, tau={cfg.decoder_length}")

    def forward(self, batch: WindowBatch, train: bool = False, rng=None):
        """Returns ``(TftOutput, cache)``."""
        self.check_batch(batch)
        P = self.store.params
        lay, d = self.layout, self.d
        B, k, tau = len(batch), self.config.encoder_length, self.config.decoder_length

        # 1-2: statics and contexts
        s_in, c_emb = [], []
        for j, name in enumerate(lay.static_cat_names):
            e, c = embedding_forward(batch.static_cat[:, j].astype(np.int64), P[f"static.emb.{name}"])
            s_in.append(e)
            c_emb.append(c)
        for j, name in enumerate(lay.static_real_names):
            s_in.append(self._real_fwd(f"static.lin.{name}", batch.static_real[:, j]))
        if s_in:
            s_emb, w_static, c_svsn = self._vsn_fwd("static_vsn", s_in, lay.static_names, None, train, rng)
        else:
            s_emb, w_static, c_svsn = np.zeros((B, d)), np.zeros((B, 0)), None
        ctx = {}
        for c in ("ctx_select", "ctx_hidden", "ctx_cell", "ctx_enrich"):
            ctx[c] = self._grn_fwd(c, s_emb, None, train, rng)

        # 3: temporal variable selection
        enc_in = [self._real_fwd(f"enc.lin.{n}", batch.encoder[..., j])
                  for j, n in enumerate(lay.encoder_channels)]
        dec_in = [self._real_fwd(f"dec.lin.{n}", batch.decoder[..., j])
                  for j, n in enumerate(lay.decoder_channels)]
        cs = ctx["ctx_select"][0]
        E, w_enc, c_evsn = self._vsn_fwd("enc_vsn", enc_in, lay.encoder_channels, cs, train, rng)
        D, w_dec, c_dvsn = self._vsn_fwd("dec_vsn", dec_in, lay.decoder_channels, cs, train, rng)

        # 4: LSTMs
        H_enc, (h_T, c_T), c_lenc = lstm_forward(E, ctx["ctx_hidden"][0], ctx["ctx_cell"][0],
                                                 P["lstm_enc.Wx.W"], P["lstm_enc.Wh.W"], P["lstm_enc.b"])
        H_dec, _, c_ldec = lstm_forward(D, h_T, c_T, P["lstm_dec.Wx.W"], P["lstm_dec.Wh.W"], P["lstm_dec.b"])
        L = np.concatenate([H_enc, H_dec], axis=1)
        X = np.concatenate([E, D], axis=1)

        # 5-6
        Phi, c_post = self._gan_fwd("post_lstm", L, X, train, rng)
        Theta, c_enr = self._grn_fwd("enrich", Phi, ctx["ctx_enrich"][0], train, rng)

        # 7: interpretable attention
        T = k + tau
        Qp, c_q = self._lin("attn.q", Theta[:, k:])
        Kp, c_k = self._lin("attn.k", Theta)
        Vp, c_v = self._lin("attn.v", Theta)
        Qh = Qp.reshape(B, tau, self.n_heads, self.d_head).transpose(0, 2, 1, 3)
        Kh = Kp.reshape(B, T, self.n_heads, self.d_head).transpose(0, 2, 1, 3)
        Vh = np.broadcast_to(Vp[:, None], (B, self.n_heads, T, self.d_head))
        heads, A, c_att = scaled_dot_attention(Qh, Kh, Vh, causal_mask(tau, T))
        M = heads.mean(axis=1)
        att, c_out = self._lin("attn.out", M)

        # 8
        delta, c_pa = self._gan_fwd("post_attn", att, Theta[:, k:], train, rng)
        psi, c_pw = self._grn_fwd("positionwise", delta, None, train, rng)
        psi2, c_po = self._gan_fwd("pre_output", psi, Phi[:, k:], train, rng)

        # 9
        yq, c_o = self._lin("output", psi2)

        out = TftOutput(np.sort(yq, axis=-1), yq, A, w_enc, w_dec, w_static)
        cache = dict(batch=batch, c_emb=c_emb, c_svsn=c_svsn, ctx=ctx, c_evsn=c_evsn, c_dvsn=c_dvsn,
                     c_lenc=c_lenc, c_ldec=c_ldec, c_post=c_post, c_enr=c_enr, c_q=c_q, c_k=c_k,
                     c_v=c_v, c_att=c_att, c_out=c_out, c_pa=c_pa, c_pw=c_pw, c_po=c_po, c_o=c_o)
        return out, cache

    def backward(self, dyq, cache) -> None:
        """Accumulate parameter gradients for upstream gradient ``dyq`` on the
        raw quantile outputs."""
        P = self.store.params
        lay = self.layout
        batch = cache["batch"]
        B, k, tau = len(batch), self.config.encoder_length, self.config.decoder_length
        T = k + tau

        dpsi2 = self._lin_back("output", dyq, cache["c_o"])
        dpsi, dPhi_dec = self._gan_back("pre_output", dpsi2, cache["c_po"])
        ddelta, _ = self._grn_back("positionwise", dpsi, cache["c_pw"])
        datt, dTheta_dec = self._gan_back("post_attn", ddelta, cache["c_pa"])

        dM = self._lin_back("attn.out", datt, cache["c_out"])
        dheads = np.broadcast_to(dM[:, None] / self.n_heads, (B, self.n_heads, tau, self.d_head))
        dQh, dKh, dVh = scaled_dot_attention_backward(dheads, cache["c_att"])
        dVp = dVh.sum(axis=1)
        dKp = dKh.transpose(0, 2, 1, 3).reshape(B, T, -1)
        dQp = dQh.transpose(0, 2, 1, 3).reshape(B, tau, -1)
        dTheta = self._lin_back("attn.k", dKp, cache["c_k"]) + self._lin_back("attn.v", dVp, cache["c_v"])
        dTheta[:, k:] += self._lin_back("attn.q", dQp, cache["c_q"]) + dTheta_dec

        dPhi, dce = self._grn_back("enrich", dTheta, cache["c_enr"])
        dPhi[:, k:] += dPhi_dec
        dL, dX = self._gan_back("post_lstm", dPhi, cache["c_post"])

        dHs, dhT, dcT, gWx, gWh, gb = lstm_backward(
            dL[:, k:], np.zeros((B, self.d)), np.zeros((B, self.d)), cache["c_ldec"],
            P["lstm_dec.Wx.W"], P["lstm_dec.Wh.W"])
        self.store.accumulate("lstm_dec.Wx.W", gWx)
        self.store.accumulate("lstm_dec.Wh.W", gWh)
        self.store.accumulate("lstm_dec.b", gb)
        dD = dX[:, k:] + dHs
        dEs, dh0, dc0, gWx, gWh, gb = lstm_backward(
            dL[:, :k], dhT, dcT, cache["c_lenc"], P["lstm_enc.Wx.W"], P["lstm_enc.Wh.W"])
        self.store.accumulate("lstm_enc.Wx.W", gWx)
        self.store.accumulate("lstm_enc.Wh.W", gWh)
        self.store.accumulate("lstm_enc.b", gb)
        dE = dX[:, :k] + dEs

        d_enc_in, dcs1 = self._vsn_back("enc_vsn", dE, cache["c_evsn"])
        d_dec_in, dcs2 = self._vsn_back("dec_vsn", dD, cache["c_dvsn"])
        for j, n in enumerate(lay.encoder_channels):
            self._real_back(f"enc.lin.{n}", d_enc_in[j], batch.encoder[..., j])
        for j, n in enumerate(lay.decoder_channels):
            self._real_back(f"dec.lin.{n}", d_dec_in[j], batch.decoder[..., j])

        ds = np.zeros((B, self.d))
        for name, g in (("ctx_select", dcs1 + dcs2), ("ctx_hidden", dh0), ("ctx_cell", dc0),
                        ("ctx_enrich", dce)):
            da, _ = self._grn_back(name, g, cache["ctx"][name][1])
            ds += da
        if cache["c_svsn"] is not None:
            d_static, _ = self._vsn_back("static_vsn", ds, cache["c_svsn"])
            nc = len(lay.static_cat_names)
            for j, name in enumerate(lay.static_cat_names):
                self.store.accumulate(f"static.emb.{name}", embedding_backward(d_static[j], cache["c_emb"][j]))
            for j, name in enumerate(lay.static_real_names):
                self._real_back(f"static.lin.{name}", d_static[nc + j], batch.static_real[:, j])

    def loss(self, batch: WindowBatch, backward: bool = False, train: bool = False, rng=None) -> float:
        """Mean pinball loss over quantiles and unmasked labels; with
        ``backward`` the parameter gradients are accumulated."""
        out, cache = self.forward(batch, train, rng)
        value, grad = quantile_loss(batch.label, out.raw_quantiles, self.config.quantiles, batch.label_mask)
        if backward:
            self.backward(grad, cache)
        return value

    # -- persistence -----------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        self.store.save(directory)
        (directory / "tft_config.json").write_text(json.dumps(self.config.to_dict(), indent=2))
        (directory / "layout.json").write_text(json.dumps(self.layout.to_dict(), indent=2))

    @classmethod
    def load(cls, directory) -> "TemporalFusionTransformer":
        directory = Path(directory)
        cfg = TftConfig.from_dict(json.loads((directory / "tft_config.json").read_text()))
        layout = ChannelLayout.from_dict(json.loads((directory / "layout.json").read_text()))
        return cls(cfg, layout, ParamStore.load(directory))
