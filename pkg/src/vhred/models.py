"""RNNLM, HRED and VHRED graphs plus the diagonal-Gaussian latent machinery.

Scoring convention: every utterance is ``<s> w_1 ... w_k </s>`` and ``<s>`` is
given, so an utterance contributes ``k + 1`` scored tokens.  HRED and VHRED
treat the first utterance of a dialogue as context only and score utterances
2..N; the RNNLM scores the whole dialogue stream after its first token.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cells import GruParams, LstmParams, output_part, run_masked, scaled_uniform
from .data import EOU, PAD, SOU, UNK, Batch, Dialogue, Segment, Vocabulary, make_rng
from .tensor import (ContractError, DimensionError, Tensor, as_tensor, cols, concat, log,
                     reshape, rows, softmax_xent, softplus, sqrt, take_rows, tanh,
                     vstack, where_rows)

KINDS = ("rnnlm", "hred", "vhred")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "vhred"
    vocab_size: int = 10
    emb_dim: int = 16
    enc_dim: int = 16
    ctx_dim: int = 16
    dec_dim: int = 16
    gate_dim: int = 16
    latent_dim: int = 4
    bidirectional: bool = False
    carry_encoder_state: bool = False
    gating: str = "tanh"
    latent_layers: int = 2
    covariance_scale: float = 0.1
    latent_init_std: float = 0.1
    rnnlm_cell: str = "lstm"
    rnnlm_hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.gating not in ("tanh", "product"):
            raise ValueError(f"gating must be 'tanh' or 'product', got {self.gating!r}")
        if self.latent_layers not in (1, 2):
            raise ValueError("latent_layers must be 1 or 2")
        if self.rnnlm_cell not in ("lstm", "gru"):
            raise ValueError("rnnlm_cell must be 'lstm' or 'gru'")

    @property
    def enc_out(self) -> int:
        return self.enc_dim * (2 if self.bidirectional else 1)

    @property
    def decoder_input(self) -> int:
        return self.emb_dim + self.gate_dim + (self.latent_dim if self.kind == "vhred" else 0)


# ------------------------------------------------------------------ Gaussians

@dataclass
class DiagGaussian:
    mean: Tensor
    variance: Tensor

    def __post_init__(self):
        self.mean, self.variance = as_tensor(self.mean), as_tensor(self.variance)
        if self.mean.shape != self.variance.shape:
            raise DimensionError(f"mean {self.mean.shape} vs variance {self.variance.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians; one value per row for batched inputs."""
    if q.mean.shape != p.mean.shape:
        raise DimensionError(f"gaussian_kl: shapes {q.mean.shape} and {p.mean.shape}")
    if (q.variance.data <= 0).any() or (p.variance.data <= 0).any():
        raise ContractError("gaussian_kl: variances must be strictly positive")
    diff = q.mean - p.mean
    terms = log(p.variance) - log(q.variance) + (q.variance + diff * diff) / p.variance - 1.0
    return (terms * 0.5).sum(axis=-1)


def reparam_sample(g: DiagGaussian, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != g.dim:
        raise DimensionError(f"noise width {noise.shape[-1]} != latent dim {g.dim}")
    return g.mean + sqrt(g.variance) * Tensor(noise)


class LatentNetParams:
    """Two tanh layers then separate mean and softplus-variance heads.

    ``covariance_scale`` multiplies the variance on every forward pass.
    ``layers=1`` drops the second tanh layer.
    """

    def __init__(self, n_in: int, dz: int, covariance_scale: float = 0.1, layers: int = 2,
                 rng: np.random.Generator | None = None, init_std: float = 0.1):
        self.n_in, self.dz, self.layers = n_in, dz, layers
        self.covariance_scale = covariance_scale

        def w(a, b):
            return Tensor(np.zeros((a, b)) if rng is None else rng.normal(0.0, init_std, (a, b)),
                          requires_grad=True)

        def b():
            return Tensor(np.zeros(dz), requires_grad=True)

        self.l1, self.b1 = w(n_in, dz), b()
        self.l2, self.b2 = w(dz, dz), b()
        self.mu, self.b_mu = w(dz, dz), b()
        self.sig, self.b_sig = w(dz, dz), b()

    def params(self) -> dict[str, Tensor]:
        out = {"l1": self.l1, "b1": self.b1, "mu": self.mu, "b_mu": self.b_mu,
               "sig": self.sig, "b_sig": self.b_sig}
        if self.layers == 2:
            out.update(l2=self.l2, b2=self.b2)
        return out

    def __call__(self, x) -> DiagGaussian:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"latent net expects width {self.n_in}, got shape {x.shape}")
        h = tanh(x @ self.l1 + self.b1)
        if self.layers == 2:
            h = tanh(h @ self.l2 + self.b2)
        return DiagGaussian(h @ self.mu + self.b_mu,
                            softplus(h @ self.sig + self.b_sig) * self.covariance_scale)


def prior_of(ctx_state, net: LatentNetParams) -> DiagGaussian:
    return net(ctx_state)


def posterior_of(ctx_state, next_utt_encoding, net: LatentNetParams) -> DiagGaussian:
    return net(concat([as_tensor(ctx_state), as_tensor(next_utt_encoding)]))


def word_drop_mask(length: int, rate: float, seed) -> np.ndarray:
    """Keep-mask over decoder inputs: ``False`` entries become ``<unk>``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"word drop rate must lie in [0, 1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, "word_drop")
    return rng.random(length) >= rate


@dataclass
class ElboBreakdown:
    reconstruction: list[float]
    kl: list[float]
    bound: float
    n_tokens: list[int] = field(default_factory=list)


@dataclass
class Terms:
    """Per-target scores for one batch segment.

    ``targets[i] = (dialogue, utterance)``; ``nll`` and ``kl`` hold one entry
    per target (``kl`` is None for deterministic models).  ``carry`` is the
    detached state handed to the next segment.
    """

    targets: list[tuple[int, int]]
    nll: Tensor
    kl: Tensor | None
    n_tokens: np.ndarray
    carry: dict

    def bound(self, kl_weight: float = 1.0) -> Tensor:
        total = -self.nll.sum()
        if self.kl is not None:
            total = total - self.kl.sum() * kl_weight
        return total


# --------------------------------------------------------------------- model

class ModelBundle:
    """Parameters and graph for one of the three model kinds."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None, init: bool = True):
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} entries, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        c = config
        rng = make_rng(c.seed, "init") if init else None

        def mat(a, b):
            return Tensor(np.zeros((a, b)) if rng is None else scaled_uniform(rng, a, b),
                          requires_grad=True)

        def vec(n):
            return Tensor(np.zeros(n), requires_grad=True)

        emb = np.zeros((c.vocab_size, c.emb_dim)) if rng is None else rng.normal(0, 0.1, (c.vocab_size, c.emb_dim))
        self.embedding = Tensor(emb, requires_grad=True)
        self.modules: dict[str, object] = {}
        if c.kind == "rnnlm":
            cell = LstmParams if c.rnnlm_cell == "lstm" else GruParams
            self.lm = cell(c.emb_dim, c.rnnlm_hidden, rng)
            self.out_w, self.out_b = mat(c.rnnlm_hidden, c.vocab_size), vec(c.vocab_size)
            self.modules = {"lm": self.lm}
        else:
            self.enc_fwd = GruParams(c.emb_dim, c.enc_dim, rng)
            self.modules["enc.fwd"] = self.enc_fwd
            self.enc_bwd = None
            if c.bidirectional:
                self.enc_bwd = GruParams(c.emb_dim, c.enc_dim, rng)
                self.modules["enc.bwd"] = self.enc_bwd
            self.ctx = GruParams(c.enc_out, c.ctx_dim, rng)
            self.dec = GruParams(c.decoder_input, c.dec_dim, rng)
            self.gate_w, self.gate_b = mat(c.ctx_dim, c.gate_dim), vec(c.gate_dim)
            self.gate_u = mat(c.dec_dim, c.ctx_dim) if c.gating == "product" else None
            self.out_w, self.out_b = mat(c.dec_dim, c.vocab_size), vec(c.vocab_size)
            self.modules.update(ctx=self.ctx, dec=self.dec)
            if c.kind == "vhred":
                lrng = make_rng(c.seed, "latent_init") if init else None
                self.prior = LatentNetParams(c.ctx_dim, c.latent_dim, c.covariance_scale,
                                             c.latent_layers, lrng, c.latent_init_std)
                self.posterior = LatentNetParams(c.ctx_dim + c.enc_out, c.latent_dim,
                                                 c.covariance_scale, c.latent_layers, lrng,
                                                 c.latent_init_std)
                self.modules.update(prior=self.prior, posterior=self.posterior)

    @property
    def kind(self) -> str:
        return self.config.kind

    def params(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for name, mod in self.modules.items():
            for k, t in mod.params().items():
                out[f"{name}.{k}"] = t
        if self.kind != "rnnlm":
            out["gate.w"], out["gate.b"] = self.gate_w, self.gate_b
            if self.gate_u is not None:
                out["gate.u"] = self.gate_u
        out["out.w"], out["out.b"] = self.out_w, self.out_b
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.grad = None

    def zero_parameters(self):
        for p in self.params().values():
            p.data[...] = 0.0

    def randomize_parameters(self, seed: int = 0, scale: float = 0.5):
        """Overwrite every parameter with N(0, scale^2) draws (for gradient checks)."""
        rng = make_rng(seed, "randomize")
        for p in self.params().values():
            p.data[...] = rng.normal(0.0, scale, p.shape)

    def zero_latent_decoder_weights(self):
        """Zero the decoder input rows fed by z, so the decoder ignores it."""
        if self.kind != "vhred":
            raise ContractError("only VHRED decoders read a latent variable")
        c = self.config
        self.dec.w_x.data[c.emb_dim + c.gate_dim:] = 0.0

    # ------------------------------------------------------------- encoder

    def _embed_time_major(self, tokens: np.ndarray) -> Tensor:
        return take_rows(self.embedding, tokens.T.reshape(-1))

    def _run_encoder(self, cell, tokens: np.ndarray, h0: Tensor) -> Tensor:
        n_rows, length = tokens.shape
        xw = self._embed_time_major(tokens) @ cell.w_x + cell.b
        steps = [rows(xw, t * n_rows, (t + 1) * n_rows) for t in range(length)]
        return run_masked(cell, steps, tokens != PAD, h0)

    def encode_utterances(self, tokens: np.ndarray, h0: Tensor | None = None) -> Tensor:
        """Final encoder state for each row of a padded ``(R, L)`` token matrix.

        All-padding rows return ``h0`` unchanged.
        """
        c = self.config
        n_rows = tokens.shape[0]
        if h0 is None:
            h0 = Tensor(np.zeros((n_rows, c.enc_out)))
        if tokens.shape[1] == 0:
            return h0
        if not c.bidirectional:
            return self._run_encoder(self.enc_fwd, tokens, h0)
        lengths = (tokens != PAD).sum(axis=1)
        rev = np.full_like(tokens, PAD)
        for r, n in enumerate(lengths):
            rev[r, :n] = tokens[r, :n][::-1]
        hf = self._run_encoder(self.enc_fwd, tokens, cols(h0, 0, c.enc_dim))
        hb = self._run_encoder(self.enc_bwd, rev, cols(h0, c.enc_dim, 2 * c.enc_dim))
        return concat([hf, hb])

    # ------------------------------------------------------------- decoder

    def _gate(self, ctx: Tensor, h_dec: Tensor | None) -> Tensor:
        if self.config.gating == "tanh":
            return tanh(ctx @ self.gate_w + self.gate_b)
        return tanh(((h_dec @ self.gate_u) * ctx) @ self.gate_w + self.gate_b)

    def _decoder_blocks(self):
        c = self.config
        w = self.dec.w_x
        e, g = c.emb_dim, c.emb_dim + c.gate_dim
        return rows(w, 0, e), rows(w, e, g), (rows(w, g, c.decoder_input) if c.kind == "vhred" else None)

    def _decoder_const(self, ctx: Tensor, z: Tensor | None, blocks) -> Tensor:
        """Per-row input projection that stays fixed across decoding steps."""
        _, w_gate, w_z = blocks
        const = self.dec.b
        if self.config.gating == "tanh":
            const = const + self._gate(ctx, None) @ w_gate
        if z is not None:
            const = const + z @ w_z
        return const

    def _decoder_step(self, h: Tensor, xw_emb: Tensor, const: Tensor, ctx: Tensor, blocks) -> Tensor:
        xw = xw_emb + const
        if self.config.gating == "product":
            xw = xw + self._gate(ctx, h) @ blocks[1]
        return self.dec.step_projected(h, xw)

    def decoder_nll(self, ctx: Tensor, tokens: np.ndarray, z: Tensor | None = None,
                    keep: np.ndarray | None = None) -> Tensor:
        """Teacher-forced NLL of each padded target row given its context state.

        ``tokens`` rows are ``<s> ... </s>`` padded with PAD; ``keep`` is a
        keep-mask over the decoder inputs (``tokens[:, :-1]``); dropped
        positions read ``<unk>``.  Position 0 is never dropped.
        """
        inputs = tokens[:, :-1].copy()
        targets = tokens[:, 1:]
        if keep is not None:
            keep = np.asarray(keep, dtype=bool).copy()
            keep[:, 0] = True
            inputs[~keep & (inputs != PAD)] = UNK
        n_rows, steps = inputs.shape
        blocks = self._decoder_blocks()
        xw_emb = self._embed_time_major(inputs) @ blocks[0]
        const = self._decoder_const(ctx, z, blocks)
        h = Tensor(np.zeros((n_rows, self.config.dec_dim)))
        hs = []
        for t in range(steps):
            h = self._decoder_step(h, rows(xw_emb, t * n_rows, (t + 1) * n_rows), const, ctx, blocks)
            hs.append(h)
        logits = vstack(hs) @ self.out_w + self.out_b
        tgt = targets.T.reshape(-1)
        mask = (tgt != PAD).astype(np.float64)
        losses = softmax_xent(logits, tgt) * mask
        return reshape(losses, (steps, n_rows)).sum(axis=0)

    # ------------------------------------------------------------ HRED/VHRED

    def forward_segment(self, batch: Batch, seg: Segment, carry: dict | None = None,
                        noise: dict | None = None, keep: dict | None = None,
                        rng: np.random.Generator | None = None, word_drop: float = 0.0,
                        latent: str = "posterior_sample") -> Terms:
        """Score the targets inside one segment of a batch.

        ``noise[(b, n)]`` / ``keep[(b, n)]`` pin the latent noise and the word
        drop keep-mask of target ``n`` of dialogue ``b``; missing entries are
        drawn from ``rng``.  ``latent`` picks ``posterior_sample``,
        ``posterior_mean`` or ``prior_mean`` for VHRED.
        """
        if self.kind == "rnnlm":
            return self._rnnlm_segment(batch, seg, carry)
        c = self.config
        B = batch.size
        carry = carry or {}
        ctx = Tensor(carry["ctx"]) if "ctx" in carry else Tensor(np.zeros((B, c.ctx_dim)))
        utts = range(seg.start, seg.stop)

        if c.carry_encoder_state:
            enc_prev = Tensor(carry["enc"]) if "enc" in carry else Tensor(np.zeros((B, c.enc_out)))
            encs = []
            for n in utts:
                enc_prev = self.encode_utterances(batch.tokens[n], enc_prev)
                encs.append(enc_prev)
        else:
            width = max(batch.tokens[n].shape[1] for n in utts)
            stacked = np.full((B * len(utts), width), PAD, dtype=np.int64)
            for i, n in enumerate(utts):
                stacked[i * B:(i + 1) * B, :batch.tokens[n].shape[1]] = batch.tokens[n]
            enc_all = self.encode_utterances(stacked)
            encs = [rows(enc_all, i * B, (i + 1) * B) for i in range(len(utts))]

        ctx_before = []
        for i, n in enumerate(utts):
            ctx_before.append(ctx)
            ctx = where_rows(batch.present[n], self.ctx.step(ctx, encs[i]), ctx)

        targets, cond, enc_t, tok_rows = [], [], [], []
        for i, n in enumerate(utts):
            if n == 0:
                continue
            idx = np.flatnonzero(batch.present[n])
            if idx.size == 0:
                continue
            targets.extend((int(b), n) for b in idx)
            cond.append(take_rows(ctx_before[i], idx))
            enc_t.append(take_rows(encs[i], idx))
            tok_rows.extend(batch.tokens[n][b] for b in idx)

        new_carry = {"ctx": ctx.data.copy()}
        if c.carry_encoder_state:
            new_carry["enc"] = enc_prev.data.copy()
        if not targets:
            empty = Tensor(np.zeros(0))
            return Terms([], empty, empty if c.kind == "vhred" else None, np.zeros(0, int), new_carry)

        width = max(int((r != PAD).sum()) for r in tok_rows)
        tokens = np.full((len(tok_rows), width), PAD, dtype=np.int64)
        for i, r in enumerate(tok_rows):
            r = r[r != PAD]
            tokens[i, :len(r)] = r
        cond = vstack(cond)
        n_tokens = (tokens[:, 1:] != PAD).sum(axis=1)

        keep_mat = None
        if word_drop > 0.0 or keep:
            keep_mat = np.ones((len(targets), width - 1), dtype=bool)
            for i, key in enumerate(targets):
                if keep and key in keep:
                    k = np.asarray(keep[key], dtype=bool)
                    keep_mat[i, :len(k)] = k
                elif word_drop > 0.0:
                    keep_mat[i] = word_drop_mask(width - 1, word_drop, rng)

        z, kl = None, None
        if c.kind == "vhred":
            prior = self.prior(cond)
            post = self.posterior(concat([cond, vstack(enc_t)]))
            if latent == "posterior_sample":
                eps = np.empty((len(targets), c.latent_dim))
                for i, key in enumerate(targets):
                    eps[i] = noise[key] if noise and key in noise else rng.standard_normal(c.latent_dim)
                z = reparam_sample(post, eps)
            elif latent == "posterior_mean":
                z = post.mean
            elif latent == "prior_mean":
                z = prior.mean
            else:
                raise ValueError(f"unknown latent mode {latent!r}")
            kl = gaussian_kl(post, prior)
        nll = self.decoder_nll(cond, tokens, z, keep_mat)
        return Terms(targets, nll, kl, n_tokens, new_carry)

    def conditionals(self, dialogue: Dialogue):
        """Context state, target encoding, prior and posterior for every target utterance."""
        batch = Batch.from_dialogues([dialogue])
        B = 1
        ctx = Tensor(np.zeros((B, self.config.ctx_dim)))
        enc = None
        out = []
        for n in range(len(dialogue)):
            h0 = enc if self.config.carry_encoder_state else None
            enc = self.encode_utterances(batch.tokens[n], h0)
            if n > 0:
                item = {"ctx": ctx, "enc": enc, "tokens": batch.tokens[n]}
                if self.kind == "vhred":
                    item["prior"] = self.prior(ctx)
                    item["posterior"] = self.posterior(concat([ctx, enc]))
                out.append(item)
            ctx = self.ctx.step(ctx, enc)
        return out

    # ----------------------------------------------------------------- RNNLM

    def _rnnlm_segment(self, batch: Batch, seg: Segment, carry: dict | None) -> Terms:
        streams = []
        for d in batch.dialogues:
            s = [t for n in range(seg.start, min(seg.stop, len(d))) for t in d[n]]
            if seg.carry and s:
                s = [EOU] + s
            streams.append(s)
        state0 = None if not carry else Tensor(carry["state"])
        nll, n_tok, state = self._rnnlm_streams(streams, state0)
        targets = [(b, -1) for b in range(batch.size)]
        return Terms(targets, nll, None, n_tok, {"state": state.data.copy()})

    def _rnnlm_streams(self, streams: Sequence[Sequence[int]], state0: Tensor | None = None):
        n_rows = len(streams)
        width = max(len(s) for s in streams)
        tokens = np.full((n_rows, max(width, 1)), PAD, dtype=np.int64)
        for i, s in enumerate(streams):
            tokens[i, :len(s)] = s
        cell = self.lm
        h = state0 if state0 is not None else Tensor(np.zeros((n_rows, cell.state_size)))
        inputs, targets = tokens[:, :-1], tokens[:, 1:]
        steps = inputs.shape[1]
        if steps == 0:
            return Tensor(np.zeros(n_rows)), np.zeros(n_rows, int), h
        xw = self._embed_time_major(inputs) @ cell.w_x + cell.b
        hs = []
        for t in range(steps):
            h = where_rows(targets[:, t] != PAD,
                           cell.step_projected(h, rows(xw, t * n_rows, (t + 1) * n_rows)), h)
            hs.append(output_part(cell, h))
        logits = vstack(hs) @ self.out_w + self.out_b
        tgt = targets.T.reshape(-1)
        losses = softmax_xent(logits, tgt) * (tgt != PAD).astype(np.float64)
        return reshape(losses, (steps, n_rows)).sum(axis=0), (targets != PAD).sum(axis=1), h

    # ------------------------------------------------------------ generation

    def decoder_session(self, context: Dialogue, z=None) -> "DecoderSession":
        return DecoderSession(self, context, z)

    def latent_prior(self, context: Dialogue) -> DiagGaussian:
        if self.kind != "vhred":
            raise ContractError("only VHRED has a latent prior")
        return self.prior(self._context_state(context))

    def _context_state(self, context: Dialogue) -> Tensor:
        ctx = Tensor(np.zeros((1, self.config.ctx_dim)))
        enc = None
        for utt in context:
            tokens = np.asarray([utt], dtype=np.int64)
            enc = self.encode_utterances(tokens, enc if self.config.carry_encoder_state else None)
            ctx = self.ctx.step(ctx, enc)
        return ctx

    # ----------------------------------------------------------- checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = self.params()
        if strict and set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise KeyError(f"parameter mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if k in params:
                if params[k].data.shape != v.shape:
                    raise DimensionError(f"{k}: checkpoint shape {v.shape} vs model {params[k].shape}")
                params[k].data[...] = v

    def copy(self) -> "ModelBundle":
        other = ModelBundle(self.config, self.vocab, init=False)
        other.load_state_dict(self.state_dict())
        return other

    def save(self, path, rng_state: dict | None = None, extra: dict | None = None):
        meta = {"format": "vhred-checkpoint", "version": CHECKPOINT_VERSION,
                "config": asdict(self.config),
                "vocab": None if self.vocab is None else self.vocab.words,
                "rng_state": rng_state, "extra": extra or {}}
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        # fixed zip timestamps keep identical models byte-identical on disk
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple["ModelBundle", dict]:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != "vhred-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint ({meta.get('format')} v{meta.get('version')})")
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        vocab = None if meta["vocab"] is None else Vocabulary(meta["vocab"])
        model = cls(ModelConfig(**meta["config"]), vocab, init=False)
        model.load_state_dict(state)
        return model, meta


class DecoderSession:
    """Incremental decoder for one response, batched over hypotheses."""

    def __init__(self, model: ModelBundle, context: Dialogue, z=None):
        if not context:
            raise ContractError("generation needs a nonempty context")
        self.model = model
        c = model.config
        if model.kind == "rnnlm":
            h = Tensor(np.zeros((1, model.lm.state_size)))
            for tok in (t for u in context for t in u):
                h = model.lm.step(h, take_rows(model.embedding, [tok]))
            self.initial = h.data[0]
            return
        self.ctx = model._context_state(context)
        zt = None
        if c.kind == "vhred":
            if z is None:
                z = model.prior(self.ctx).mean.data
            zt = Tensor(np.asarray(z, dtype=np.float64).reshape(1, c.latent_dim))
        self.blocks = model._decoder_blocks()
        self.const = model._decoder_const(self.ctx, zt, self.blocks)
        self.initial = np.zeros(c.dec_dim)

    def start(self, k: int = 1) -> np.ndarray:
        return np.tile(self.initial, (k, 1))

    def step(self, states: np.ndarray, prev: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Log-probabilities of the next token for each hypothesis, and new states."""
        m = self.model
        prev = np.asarray(prev, dtype=np.int64)
        h = Tensor(states)
        if m.kind == "rnnlm":
            cell = m.lm
            h_out = cell.step(h, take_rows(m.embedding, prev))
            logits = output_part(cell, h_out) @ m.out_w + m.out_b
            return _log_softmax(logits.data), h_out.data
        xw_emb = take_rows(m.embedding, prev) @ self.blocks[0]
        ctx = self.ctx
        h_new = m._decoder_step(h, xw_emb, self.const, ctx, self.blocks)
        logits = h_new @ m.out_w + m.out_b
        return _log_softmax(logits.data), h_new.data


def _log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ------------------------------------------------------------ public scoring

def _single(d: Dialogue, max_unroll=None) -> Batch:
    return Batch.from_dialogues([d], max_unroll)


def rnnlm_nll(m: ModelBundle, tokens: Sequence[int]) -> tuple[float, np.ndarray]:
    """Total and per-token NLL of a token stream; the first token is given."""
    if m.kind != "rnnlm":
        raise ContractError(f"rnnlm_nll needs an RNNLM bundle, got {m.kind}")
    tokens = list(tokens)
    if len(tokens) < 2:
        raise ContractError("rnnlm_nll needs at least 2 tokens")
    if min(tokens) < 0 or max(tokens) >= m.config.vocab_size:
        raise IndexError("token id out of vocabulary")
    per_token = []
    cell = m.lm
    h = Tensor(np.zeros(cell.state_size))
    for prev, nxt in zip(tokens[:-1], tokens[1:]):
        h = cell.step(h, take_rows(m.embedding, prev))
        logits = output_part(cell, h) @ m.out_w + m.out_b
        per_token.append(float(softmax_xent(logits, nxt).data))
    per_token = np.array(per_token)
    return float(per_token.sum()), per_token


def _check_dialogue(m: ModelBundle, d: Dialogue):
    if m.kind not in ("hred", "vhred"):
        raise ContractError(f"needs an HRED or VHRED bundle, got {m.kind}")
    if len(d) < 2:
        raise ContractError("a dialogue needs at least one context and one target utterance")
    if any(len(u) == 0 for u in d):
        raise ContractError("empty utterance")
    flat = [t for u in d for t in u]
    if min(flat) < 0 or max(flat) >= m.config.vocab_size:
        raise IndexError("token id out of vocabulary")


def hred_forward(m: ModelBundle, d: Dialogue) -> list[float]:
    """Per-target-utterance NLL; a VHRED bundle decodes with z at the prior mean."""
    _check_dialogue(m, d)
    batch = _single(d)
    terms = m.forward_segment(batch, batch.segments[0], latent="prior_mean")
    return [float(v) for v in terms.nll.data]


def vhred_elbo_terms(m: ModelBundle, d: Dialogue, kl_weight: float = 1.0, noise=None,
                     keep=None) -> tuple[Terms, Tensor]:
    """Tensor-valued version of :func:`vhred_elbo` for gradient checks."""
    if m.kind != "vhred":
        raise ContractError(f"vhred_elbo needs a VHRED bundle, got {m.kind}")
    if not 0.0 <= kl_weight <= 1.0:
        raise ContractError(f"kl_weight must lie in [0, 1], got {kl_weight}")
    _check_dialogue(m, d)
    batch = _single(d)
    n_targets = len(d) - 1
    if noise is None:
        noise = np.zeros((n_targets, m.config.latent_dim))
    noise = {(0, n + 1): np.asarray(noise[n]) for n in range(n_targets)}
    keep = None if keep is None else {(0, n + 1): keep[n] for n in range(n_targets)}
    terms = m.forward_segment(batch, batch.segments[0], noise=noise, keep=keep)
    return terms, terms.bound(kl_weight)


def vhred_elbo(m: ModelBundle, d: Dialogue, kl_weight: float = 1.0, noise=None,
               word_drop_mask=None) -> ElboBreakdown:
    """Per-utterance reconstruction NLL and KL with the weighted bound.

    ``noise[i]`` is the standard-normal draw for target utterance ``i + 1``
    (zeros if omitted); ``word_drop_mask[i]`` its decoder-input keep-mask.
    The bound is ``-sum(reconstruction_n + kl_weight * kl_n)``.
    """
    terms, bound = vhred_elbo_terms(m, d, kl_weight, noise, word_drop_mask)
    return ElboBreakdown([float(v) for v in terms.nll.data], [float(v) for v in terms.kl.data],
                         float(bound.data), [int(v) for v in terms.n_tokens])


def warm_start_from_hred(vhred: ModelBundle, hred: ModelBundle):
    """Copy an HRED's parameters into a VHRED; the decoder's z rows are zeroed."""
    if vhred.kind != "vhred" or hred.kind != "hred":
        raise ContractError("warm start copies an HRED into a VHRED")
    src = hred.state_dict()
    dst = vhred.params()
    c = vhred.config
    for k, v in src.items():
        if k == "dec.w_x":
            dst[k].data[:v.shape[0]] = v
            dst[k].data[v.shape[0]:] = 0.0
        elif dst[k].data.shape != v.shape:
            raise DimensionError(f"{k}: HRED shape {v.shape} vs VHRED {dst[k].shape}")
        else:
            dst[k].data[...] = v
    assert dst["dec.w_x"].data.shape[0] == c.decoder_input
