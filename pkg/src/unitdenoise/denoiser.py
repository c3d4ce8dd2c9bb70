"""Encoder-decoder denoiser over layered features: predicts the clean
deduplicated unit sequence for a distorted utterance.

Covers the external and adapter variants, encoder-only (pure CTC) and
decoder-only ablations, hybrid CTC+attention training, joint one-pass beam
decoding with exact CTC prefix scoring, and encoder-only test-time adaptation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import pseudo_ssl, substrate
from .metrics import edit_distance
from .pseudo_ssl import PseudoEncoderConfig
from .quantizer import UnitSequence
from .substrate import (
    AdamState,
    ScheduleConfig,
    Tape,
    Tensor,
    adam_step,
    backward,
    lr_at_step,
)

_NEG_BIG = -1e30  # attention mask value; keeps everything finite


class DenoiserError(Exception):
    pass


class CtcTargetTooLong(DenoiserError):
    pass


class NumericalError(DenoiserError):
    """Training produced a non-finite loss."""


@dataclass
class DenoiserConfig:
    variant: str = "external"          # external | adapter
    encoder_kind: str = "transformer"  # transformer | none
    encoder_layers: int = 2
    decoder_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    ctc_train_weight: float = 0.3
    dropout: float = 0.1
    num_units: int = 16
    input_dim: int = 64
    num_feature_layers: int = 7  # L+1 including the frontend state
    adapter_bottleneck: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("external", "adapter"):
            raise DenoiserError(f"unknown variant {self.variant}")
        if self.encoder_kind not in ("transformer", "none"):
            raise DenoiserError(f"unknown encoder kind {self.encoder_kind}")
        if not 0.0 <= self.ctc_train_weight <= 1.0:
            raise DenoiserError("ctc_train_weight must be in [0, 1]")
        if self.decoder_layers == 0 and self.ctc_train_weight != 1.0:
            raise DenoiserError("a decoder-free model must train with pure CTC")
        if self.ctc_train_weight == 0.0 and self.decoder_layers < 1:
            raise DenoiserError("pure attention training needs a decoder")
        if self.model_dim % self.heads != 0:
            raise DenoiserError("model_dim must divide evenly into heads")

    # vocabulary layout: units, then the special symbols
    @property
    def blank_id(self) -> int:
        return self.num_units

    @property
    def sos_id(self) -> int:
        return self.num_units + 1

    @property
    def eos_id(self) -> int:
        return self.num_units + 2

    @property
    def pad_id(self) -> int:
        return self.num_units + 3

    @property
    def vocab_size(self) -> int:
        return self.num_units + 4


@dataclass
class TrainingExample:
    """Distorted (or clean) feature stack paired with the clean-target units."""

    utt_id: str
    stack: np.ndarray          # (L+1, T, D)
    target: list[int]          # deduplicated clean units


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


class DenoiserModel:
    """Owns all trainable parameters (including adapters in the adapter variant)."""

    def __init__(self, config: DenoiserConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._pe_cache: np.ndarray | None = None
        self._init_params()

    # -- initialisation -----------------------------------------------------

    def _linear(self, rng, name: str, fan_in: int, fan_out: int):
        self.params[f"{name}.w"] = Tensor(
            rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out))

    def _ln(self, name: str):
        self.params[f"{name}.g"] = Tensor(np.ones(self.config.model_dim))
        self.params[f"{name}.b"] = Tensor(np.zeros(self.config.model_dim))

    def _attn_block(self, rng, name: str):
        d = self.config.model_dim
        for part in ("wq", "wk", "wv", "wo"):
            self.params[f"{name}.{part}"] = Tensor(
                rng.standard_normal((d, d)) / np.sqrt(d))
        for part in ("bq", "bk", "bv", "bo"):
            self.params[f"{name}.{part}"] = Tensor(np.zeros(d))

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 0xD1])
        # zero logits: the initial weighted sum is the plain layer average
        self.params["ws.logits"] = Tensor(np.zeros(cfg.num_feature_layers))
        self._linear(rng, "proj", cfg.input_dim, cfg.model_dim)

        if cfg.encoder_kind == "transformer":
            for i in range(cfg.encoder_layers):
                self._ln(f"enc.{i}.ln1")
                self._attn_block(rng, f"enc.{i}.attn")
                self._ln(f"enc.{i}.ln2")
                self._linear(rng, f"enc.{i}.ffn.fc1", cfg.model_dim, cfg.ffn_dim)
                self._linear(rng, f"enc.{i}.ffn.fc2", cfg.ffn_dim, cfg.model_dim)
            self._ln("enc.final_ln")

        self._linear(rng, "ctc", cfg.model_dim, cfg.vocab_size)

        if cfg.decoder_layers > 0:
            self.params["dec.emb"] = Tensor(
                rng.standard_normal((cfg.vocab_size, cfg.model_dim))
                / np.sqrt(cfg.model_dim))
            for i in range(cfg.decoder_layers):
                self._ln(f"dec.{i}.ln1")
                self._attn_block(rng, f"dec.{i}.self")
                self._ln(f"dec.{i}.ln2")
                self._attn_block(rng, f"dec.{i}.cross")
                self._ln(f"dec.{i}.ln3")
                self._linear(rng, f"dec.{i}.ffn.fc1", cfg.model_dim, cfg.ffn_dim)
                self._linear(rng, f"dec.{i}.ffn.fc2", cfg.ffn_dim, cfg.model_dim)
            self._ln("dec.final_ln")
            self._linear(rng, "dec.out", cfg.model_dim, cfg.vocab_size)

        if cfg.variant == "adapter":
            arng = np.random.default_rng([cfg.seed, 0xAD])
            ssl_dim = cfg.input_dim
            for i in range(cfg.num_feature_layers - 1):
                down = arng.standard_normal((ssl_dim, cfg.adapter_bottleneck))
                self.params[f"adapt.{i}.down"] = Tensor(down / np.sqrt(ssl_dim))
                self.params[f"adapt.{i}.bias_b"] = Tensor(np.zeros(cfg.adapter_bottleneck))
                # zero up-projection: the block is the identity at init
                self.params[f"adapt.{i}.up"] = Tensor(
                    np.zeros((cfg.adapter_bottleneck, ssl_dim)))
                self.params[f"adapt.{i}.bias_d"] = Tensor(np.zeros(ssl_dim))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable_names(self, prefixes: tuple[str, ...] | None = None) -> list[str]:
        if prefixes is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefixes)]

    def adapter_tensor_dicts(self) -> list[dict[str, Tensor]]:
        return [
            {k: self.params[f"adapt.{i}.{k}"] for k in ("down", "bias_b", "up", "bias_d")}
            for i in range(self.config.num_feature_layers - 1)
        ]

    def adapter_blocks(self) -> list[pseudo_ssl.AdapterBlock]:
        return [
            pseudo_ssl.AdapterBlock(
                down=self.params[f"adapt.{i}.down"].data,
                bias_b=self.params[f"adapt.{i}.bias_b"].data,
                up=self.params[f"adapt.{i}.up"].data,
                bias_d=self.params[f"adapt.{i}.bias_d"].data,
            )
            for i in range(self.config.num_feature_layers - 1)
        ]

    def _pe(self, length: int) -> np.ndarray:
        if self._pe_cache is None or self._pe_cache.shape[0] < length:
            self._pe_cache = sinusoidal_positions(max(length, 512), self.config.model_dim)
        return self._pe_cache[:length]

    # -- forward pieces -----------------------------------------------------

    def _affine(self, name: str, x: Tensor) -> Tensor:
        return substrate.add(substrate.matmul(x, self.params[f"{name}.w"]),
                             self.params[f"{name}.b"])

    def _lnorm(self, name: str, x: Tensor) -> Tensor:
        y = substrate.layer_norm(x)
        return substrate.add(substrate.mul(y, self.params[f"{name}.g"]),
                             self.params[f"{name}.b"])

    def _mha(self, name: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None,
             train: bool, rng) -> Tensor:
        """Multi-head attention over (T, d) inputs, or (B, T, d) for batched
        tape-free decoding; kv may stay 2-d while q is batched."""
        cfg = self.config
        d, h = cfg.model_dim, cfg.heads
        dh = d // h
        P = self.params

        def heads_of(x, t):
            if x.data.ndim == 2:
                return substrate.transpose(substrate.reshape(x, (t, h, dh)), (1, 0, 2))
            b = x.shape[0]
            return substrate.transpose(substrate.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

        def swap_last(x):
            axes = list(range(x.data.ndim))
            axes[-1], axes[-2] = axes[-2], axes[-1]
            return substrate.transpose(x, tuple(axes))

        tq = q_in.shape[-2]
        tk = kv_in.shape[-2]
        q = heads_of(substrate.add(substrate.matmul(q_in, P[f"{name}.wq"]), P[f"{name}.bq"]), tq)
        k = heads_of(substrate.add(substrate.matmul(kv_in, P[f"{name}.wk"]), P[f"{name}.bk"]), tk)
        v = heads_of(substrate.add(substrate.matmul(kv_in, P[f"{name}.wv"]), P[f"{name}.bv"]), tk)

        scores = substrate.scale(substrate.matmul(q, swap_last(k)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = substrate.add(scores, substrate.constant(mask))
        attn = substrate.softmax(scores, axis=-1)
        attn = substrate.dropout(attn, self.config.dropout, train, rng)
        ctx = substrate.matmul(attn, v)  # (..., h, tq, dh)
        if ctx.data.ndim == 3:
            merged = substrate.reshape(substrate.transpose(ctx, (1, 0, 2)), (tq, d))
        else:
            merged = substrate.reshape(substrate.transpose(ctx, (0, 2, 1, 3)),
                                       (ctx.shape[0], tq, d))
        return substrate.add(substrate.matmul(merged, P[f"{name}.wo"]), P[f"{name}.bo"])

    def _ffn(self, name: str, x: Tensor, train: bool, rng) -> Tensor:
        hidden = substrate.gelu(self._affine(f"{name}.fc1", x))
        return self._affine(f"{name}.fc2", hidden)

    def stack_tensors(self, stack: np.ndarray,
                      ssl_config: PseudoEncoderConfig | None = None) -> list[Tensor]:
        """Per-layer feature tensors; the adapter variant recomputes the frozen
        stack from the layer-0 state so gradients reach the adapters."""
        if self.config.variant == "adapter":
            if ssl_config is None:
                raise DenoiserError("adapter variant needs the feature encoder config")
            layer0 = np.asarray(stack[0], dtype=np.float64)
            return pseudo_ssl.stack_from_layer0_taped(
                layer0, ssl_config, self.adapter_tensor_dicts())
        return [substrate.constant(np.asarray(stack[i], dtype=np.float64))
                for i in range(stack.shape[0])]

    def encode(self, layers: list[Tensor], train: bool = False, rng=None
               ) -> tuple[Tensor, Tensor]:
        """Weighted sum -> projection -> optional transformer encoder -> CTC head.

        Frame count is preserved end to end (no temporal subsampling).
        """
        cfg = self.config
        if len(layers) != cfg.num_feature_layers:
            raise DenoiserError(
                f"expected {cfg.num_feature_layers} feature layers, got {len(layers)}")
        if layers[0].shape[1] != cfg.input_dim:
            raise DenoiserError(
                f"feature dim {layers[0].shape[1]} != model input dim {cfg.input_dim}")
        weights = substrate.softmax(self.params["ws.logits"], axis=-1)
        combined = substrate.linear_combination(weights, layers)
        x = self._affine("proj", combined)

        if cfg.encoder_kind == "transformer":
            t = x.shape[0]
            x = substrate.add(x, substrate.constant(self._pe(t)))
            for i in range(cfg.encoder_layers):
                attn_in = self._lnorm(f"enc.{i}.ln1", x)
                x = substrate.add(x, substrate.dropout(
                    self._mha(f"enc.{i}.attn", attn_in, attn_in, None, train, rng),
                    cfg.dropout, train, rng))
                ffn_in = self._lnorm(f"enc.{i}.ln2", x)
                x = substrate.add(x, substrate.dropout(
                    self._ffn(f"enc.{i}.ffn", ffn_in, train, rng),
                    cfg.dropout, train, rng))
            x = self._lnorm("enc.final_ln", x)

        ctc_logprobs = substrate.log_softmax(self._affine("ctc", x), axis=-1)
        return x, ctc_logprobs

    def decoder_logprobs(self, enc_states: Tensor, ids,
                         train: bool = False, rng=None) -> Tensor:
        """Teacher-forced next-token log-probs for the prefix ids (sos first).

        ids may be one prefix (length n) or a batch of equal-length prefixes
        (B, n); the batched form is for tape-free beam decoding.
        """
        cfg = self.config
        if cfg.decoder_layers < 1:
            raise DenoiserError("this model has no decoder")
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        emb = substrate.scale(
            substrate.embedding_lookup(self.params["dec.emb"], ids),
            np.sqrt(cfg.model_dim))
        x = substrate.add(emb, substrate.constant(self._pe(n)))
        causal = np.triu(np.full((n, n), _NEG_BIG), k=1)
        for i in range(cfg.decoder_layers):
            sa_in = self._lnorm(f"dec.{i}.ln1", x)
            x = substrate.add(x, substrate.dropout(
                self._mha(f"dec.{i}.self", sa_in, sa_in, causal, train, rng),
                cfg.dropout, train, rng))
            ca_in = self._lnorm(f"dec.{i}.ln2", x)
            x = substrate.add(x, substrate.dropout(
                self._mha(f"dec.{i}.cross", ca_in, enc_states, None, train, rng),
                cfg.dropout, train, rng))
            ffn_in = self._lnorm(f"dec.{i}.ln3", x)
            x = substrate.add(x, substrate.dropout(
                self._ffn(f"dec.{i}.ffn", ffn_in, train, rng),
                cfg.dropout, train, rng))
        x = self._lnorm("dec.final_ln", x)
        return substrate.log_softmax(self._affine("dec.out", x), axis=-1)

    def clone(self) -> "DenoiserModel":
        other = DenoiserModel(self.config)
        for name, p in self.params.items():
            other.params[name].data = p.data.copy()
        return other


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _ctc_checks(T: int, target: list[int], blank: int, vocab: int):
    for u in target:
        if not (0 <= u < vocab) or u == blank:
            raise DenoiserError(f"target symbol {u} outside the unit vocabulary")
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    if T < len(target) + repeats:
        raise CtcTargetTooLong(
            f"{len(target)} labels (+{repeats} repeats) cannot align to {T} frames")


def _ctc_alpha(logp: np.ndarray, ext: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    T, S = logp.shape[0], ext.size
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip_ok[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + logp[t, ext]
    return alpha


def _ctc_beta(logp: np.ndarray, ext: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    """beta[t, s]: log-prob of completing from state s at time t, excluding
    the emission at t (so alpha + beta sums to the full log-likelihood)."""
    T, S = logp.shape[0], ext.size
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        skip_to = np.zeros(S, dtype=bool)
        skip_to[:-2] = skip_ok[2:]
        acc[:-2] = np.where(skip_to[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


def ctc_loss(log_probs: Tensor, target: list[int], blank: int) -> Tensor:
    """Negative log-likelihood of the target under the CTC forward algorithm.

    log_probs is a (T, vocab) tensor of per-frame log posteriors; the gradient
    is the standard state-posterior form, so the op tapes like any other.
    """
    lp = log_probs.data
    T, vocab = lp.shape
    target = [int(u) for u in target]
    _ctc_checks(T, target, blank, vocab)

    ext = np.empty(2 * len(target) + 1, dtype=np.int64)
    ext[0::2] = blank
    ext[1::2] = target
    skip_ok = np.zeros(ext.size, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = _ctc_alpha(lp, ext, skip_ok)
    if ext.size > 1:
        log_p = np.logaddexp(alpha[T - 1, -1], alpha[T - 1, -2])
    else:
        log_p = alpha[T - 1, -1]
    if not np.isfinite(log_p):
        raise NumericalError("CTC likelihood underflowed to zero")

    def vjp(g):
        beta = _ctc_beta(lp, ext, skip_ok)
        post = np.exp(alpha + beta - log_p)  # (T, S) state posteriors
        grad = np.zeros_like(lp)
        np.add.at(grad.T, ext, post.T)
        return (-float(g) * grad,)

    return substrate.record_custom(np.asarray(-log_p), (log_probs,), vjp)


def ctc_full_logprob(log_probs: np.ndarray, target: list[int], blank: int) -> float:
    """log P(target | log_probs); numpy-only twin of ctc_loss for scoring."""
    return -float(ctc_loss(substrate.constant(log_probs), target, blank).data)


def decoder_ce_loss(model: DenoiserModel, enc_states: Tensor, target: list[int],
                    train: bool = False, rng=None) -> Tensor:
    """Teacher-forced cross-entropy over [sos]+target -> target+[eos], averaged
    over target positions."""
    cfg = model.config
    ids_in = [cfg.sos_id] + list(target)
    ids_out = list(target) + [cfg.eos_id]
    lp = model.decoder_logprobs(enc_states, ids_in, train=train, rng=rng)
    picked = substrate.take_per_row(lp, ids_out)
    return substrate.scale(substrate.mean(picked), -1.0)


def hybrid_loss(model: DenoiserModel, example: TrainingExample, lam: float,
                train: bool = False, rng=None,
                ssl_config: PseudoEncoderConfig | None = None) -> Tensor:
    """lam * ctc + (1 - lam) * decoder cross-entropy for one example."""
    cfg = model.config
    if lam < 1.0 and cfg.decoder_layers < 1:
        raise DenoiserError("lam < 1 needs a decoder")
    layers = model.stack_tensors(example.stack, ssl_config)
    enc, ctc_lp = model.encode(layers, train=train, rng=rng)
    if lam == 0.0:
        return decoder_ce_loss(model, enc, example.target, train=train, rng=rng)
    closs = ctc_loss(ctc_lp, example.target, cfg.blank_id)
    if lam == 1.0:
        return closs
    celoss = decoder_ce_loss(model, enc, example.target, train=train, rng=rng)
    return substrate.add(substrate.scale(closs, lam), substrate.scale(celoss, 1.0 - lam))


def forward_encode(model: DenoiserModel, features,
                   ssl_config: PseudoEncoderConfig | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Tape-free encoder pass; accepts LayerStackFeatures or an (L+1,T,D) array."""
    stack = features.layers if hasattr(features, "layers") else np.asarray(features)
    if model.config.variant == "adapter":
        if ssl_config is None:
            raise DenoiserError("adapter variant needs the feature encoder config")
        stack = pseudo_ssl.stack_from_layer0(
            np.asarray(stack[0], dtype=np.float64), ssl_config, model.adapter_blocks())
        layers = [substrate.constant(stack[i]) for i in range(stack.shape[0])]
    else:
        layers = [substrate.constant(np.asarray(stack[i], dtype=np.float64))
                  for i in range(stack.shape[0])]
    enc, ctc_lp = model.encode(layers, train=False)
    return enc.data, ctc_lp.data


# ---------------------------------------------------------------------------
# joint CTC/attention beam search
# ---------------------------------------------------------------------------

class CtcPrefixScorer:
    """Exact prefix scoring with two forward variables per hypothesis
    (paths ending in blank vs. non-blank)."""

    def __init__(self, logp: np.ndarray, blank: int):
        self.logp = logp
        self.blank = blank
        self.T = logp.shape[0]

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        r_nb = np.full(self.T, -np.inf)
        r_b = np.cumsum(self.logp[:, self.blank])
        return r_nb, r_b

    def extend_all(self, state, last: int | None):
        """Prefix scores and new states for every vocabulary symbol at once.

        Returns (psi, r_nb, r_b): psi is (V,), the state arrays are (T, V);
        column c is the state after appending symbol c.
        """
        r_nb, r_b = state
        T, V = self.logp.shape
        phi = np.logaddexp(r_b, r_nb)
        phi_prev = np.empty((T, V))
        phi_prev[0] = -np.inf if last is not None else 0.0
        phi_prev[1:] = phi[:-1, None]
        if last is not None:
            # repeating the last symbol must cross a blank first
            col = np.empty(T)
            col[0] = -np.inf
            col[1:] = r_b[:-1]
            phi_prev[:, last] = col

        new_r_nb = np.empty((T, V))
        new_r_b = np.empty((T, V))
        prev_nb = np.full(V, -np.inf)
        prev_b = np.full(V, -np.inf)
        lp_b = self.logp[:, self.blank]
        for t in range(T):
            new_r_nb[t] = self.logp[t] + np.logaddexp(prev_nb, phi_prev[t])
            new_r_b[t] = lp_b[t] + np.logaddexp(prev_b, prev_nb)
            prev_nb = new_r_nb[t]
            prev_b = new_r_b[t]

        scores = phi_prev + self.logp
        m = scores.max(axis=0)
        safe_m = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            psi = np.where(
                np.isfinite(m),
                safe_m + np.log(np.exp(scores - safe_m).sum(axis=0)),
                -np.inf,
            )
        return psi, new_r_nb, new_r_b

    def final(self, state) -> float:
        r_nb, r_b = state
        return float(np.logaddexp(r_nb[-1], r_b[-1]))


@dataclass
class _Hyp:
    tokens: tuple
    att_lp: float
    ctc_psi: float
    state: tuple | None

    def score(self, alpha: float) -> float:
        return (1.0 - alpha) * self.att_lp + alpha * self.ctc_psi


def ctc_greedy_decode(log_probs: np.ndarray, num_units: int, blank: int,
                      utt_id: str = "") -> UnitSequence:
    """Best per-frame symbol, repeats collapsed, blanks dropped.

    A unit repeated across a blank survives plain collapse, but targets are
    deduplicated sequences, so the result is deduplicated once more.
    """
    path = log_probs[:, :num_units + 1].argmax(axis=1)
    units: list[int] = []
    prev = -1
    for s in path:
        if s != prev and s != blank and (not units or units[-1] != s):
            units.append(int(s))
        prev = s
    return UnitSequence(units=units, utt_id=utt_id, deduplicated=True)


def beam_search_decode(model: DenoiserModel, features, beam_size: int = 20,
                       ctc_decode_weight: float = 0.3, max_len: int | None = None,
                       utt_id: str = "",
                       ssl_config: PseudoEncoderConfig | None = None) -> UnitSequence:
    """One-pass joint decoding: hypotheses are scored by
    (1-alpha)*attention + alpha*CTC prefix score and finalised at eos with the
    full CTC log-likelihood. A decoder-free model falls back to greedy CTC.

    Hypotheses never extend with the unit just emitted, so the output is
    deduplicated by construction.
    """
    if beam_size < 1:
        raise DenoiserError("beam size must be >= 1")
    cfg = model.config
    enc_np, ctc_lp = forward_encode(model, features, ssl_config)
    T = enc_np.shape[0]
    if T == 0:
        raise DenoiserError("empty features")
    if cfg.decoder_layers < 1:
        return ctc_greedy_decode(ctc_lp, cfg.num_units, cfg.blank_id, utt_id)

    alpha = float(ctc_decode_weight)
    if max_len is None:
        max_len = 2 * T
    enc = substrate.constant(enc_np)
    scorer = CtcPrefixScorer(ctc_lp, cfg.blank_id) if alpha > 0.0 else None

    live = [_Hyp(tokens=(), att_lp=0.0, ctc_psi=0.0,
                 state=scorer.initial_state() if scorer else None)]
    finished: list[tuple[float, tuple]] = []

    while live:
        # one batched decoder pass covers every live hypothesis of this level
        ids = np.array([[cfg.sos_id] + list(h.tokens) for h in live])
        lp_all = model.decoder_logprobs(enc, ids).data[:, -1, :]

        candidates: list[tuple[float, bool, _Hyp]] = []
        for hyp, lp_next in zip(live, lp_all):
            last = hyp.tokens[-1] if hyp.tokens else None

            # eos competes with unit expansions; its CTC term is the full
            # sequence log-likelihood, not a prefix score
            ctc_final = scorer.final(hyp.state) if scorer else 0.0
            eos_hyp = _Hyp(tokens=hyp.tokens,
                           att_lp=hyp.att_lp + float(lp_next[cfg.eos_id]),
                           ctc_psi=ctc_final, state=None)
            candidates.append((eos_hyp.score(alpha), True, eos_hyp))

            if len(hyp.tokens) >= max_len:
                continue
            if scorer:
                psi, r_nb, r_b = scorer.extend_all(hyp.state, last)
            for c in range(cfg.num_units):
                if c == last:
                    continue
                new = _Hyp(
                    tokens=hyp.tokens + (c,),
                    att_lp=hyp.att_lp + float(lp_next[c]),
                    ctc_psi=float(psi[c]) if scorer else 0.0,
                    state=(r_nb[:, c].copy(), r_b[:, c].copy()) if scorer else None,
                )
                candidates.append((new.score(alpha), False, new))

        candidates.sort(key=lambda c: c[0], reverse=True)
        live = []
        for score, is_eos, hyp in candidates[:beam_size]:
            if is_eos:
                finished.append((score, hyp.tokens))
            else:
                live.append(hyp)

        # prefix scores only shrink along extensions, so once the best ended
        # hypothesis beats every live prefix nothing better can still appear
        if finished and live:
            best_done = max(f[0] for f in finished)
            if best_done >= max(h.score(alpha) for h in live):
                break

    best_score, best_tokens = max(finished, key=lambda f: f[0])
    return UnitSequence(units=list(best_tokens), utt_id=utt_id, deduplicated=True)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_uer: float


@dataclass
class TrainLog:
    epochs: list[EpochStats]
    best_epoch: int
    parameter_count: int

    def lines(self) -> list[str]:
        return [f"{e.epoch}\t{e.train_loss:.6f}\t{e.valid_loss:.6f}\t{e.valid_uer:.4f}"
                for e in self.epochs]


def _example_loss(model, ex, lam, train, rng, ssl_config):
    loss = hybrid_loss(model, ex, lam, train=train, rng=rng, ssl_config=ssl_config)
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite loss on {ex.utt_id}")
    return loss


def _pooled_uer(model, examples, ssl_config, beam_size, alpha) -> float:
    errors = 0
    refs = 0
    for ex in examples:
        hyp = beam_search_decode(model, ex.stack, beam_size=beam_size,
                                 ctc_decode_weight=alpha, utt_id=ex.utt_id,
                                 ssl_config=ssl_config)
        counts = edit_distance(hyp.units, ex.target)
        errors += counts.total_errors
        refs += counts.ref_length
    return 100.0 * errors / max(refs, 1)


def train_denoiser(model: DenoiserModel, train_examples: list[TrainingExample],
                   valid_examples: list[TrainingExample], epochs: int,
                   batch_size: int, schedule: ScheduleConfig, seed: int,
                   ssl_config: PseudoEncoderConfig | None = None,
                   valid_beam: int = 1, valid_ctc_weight: float = 0.3,
                   log_fn=None) -> TrainLog:
    """Seeded shuffled mini-batches, Adam with the warmup/decay schedule, and
    best-checkpoint selection by validation UER. The model is updated in place
    and left holding the best parameters."""
    if not train_examples:
        raise DenoiserError("empty training set")
    for ex in train_examples + valid_examples:
        if ex.target is None:
            raise DenoiserError(f"missing clean-unit target for {ex.utt_id}")
    lam = model.config.ctc_train_weight
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    state = AdamState()
    names = model.trainable_names()
    trainable = {n: model.params[n] for n in names}
    step = 0
    stats: list[EpochStats] = []
    best = (np.inf, -1, None)  # (uer, epoch, params)

    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_examples))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [train_examples[i] for i in order[start:start + batch_size]]
            grad_sum: dict[str, np.ndarray] = {}
            for ex in batch:
                with Tape() as tape:
                    tape.register_all(trainable)
                    loss = _example_loss(model, ex, lam, True, dropout_rng, ssl_config)
                grads = backward(tape, loss)
                losses.append(float(loss.data))
                inv = 1.0 / len(batch)
                for n, g in grads.items():
                    if n in grad_sum:
                        grad_sum[n] += g * inv
                    else:
                        grad_sum[n] = g * inv
            step += 1
            adam_step(trainable, grad_sum, state, lr_at_step(schedule, step))

        valid_losses = [
            float(_example_loss(model, ex, lam, False, None, ssl_config).data)
            for ex in valid_examples
        ]
        valid_uer = _pooled_uer(model, valid_examples, ssl_config,
                                valid_beam, valid_ctc_weight) if valid_examples else 0.0
        entry = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            valid_loss=float(np.mean(valid_losses)) if valid_losses else 0.0,
            valid_uer=valid_uer,
        )
        stats.append(entry)
        if log_fn:
            log_fn(entry)
        if valid_uer < best[0]:
            best = (valid_uer, epoch, {n: p.data.copy() for n, p in model.params.items()})

    if best[2] is not None:
        for n, data in best[2].items():
            model.params[n].data = data
    return TrainLog(epochs=stats, best_epoch=best[1], parameter_count=model.num_parameters())


ENCODER_PREFIXES = ("ws.", "proj.", "enc.")


def finetune_encoder(model: DenoiserModel, examples: list[TrainingExample],
                     steps: int, lr: float, batch_size: int = 8, seed: int = 0,
                     ssl_config: PseudoEncoderConfig | None = None) -> DenoiserModel:
    """Adapt to a target environment by updating only the encoder-side
    parameters (weighted sum, projection, encoder); everything else stays
    bitwise unchanged. Returns an adapted copy."""
    if steps > 0 and not examples:
        raise DenoiserError("empty adaptation set")
    adapted = model.clone()
    if steps == 0:
        return adapted
    lam = adapted.config.ctc_train_weight
    names = adapted.trainable_names(ENCODER_PREFIXES)
    trainable = {n: adapted.params[n] for n in names}
    shuffle_rng = np.random.default_rng([seed, 11])
    dropout_rng = np.random.default_rng([seed, 12])
    state = AdamState()
    order: list[int] = []
    for _ in range(steps):
        while len(order) < batch_size:
            order += list(shuffle_rng.permutation(len(examples)))
        batch = [examples[i] for i in order[:batch_size]]
        order = order[batch_size:]
        grad_sum: dict[str, np.ndarray] = {}
        for ex in batch:
            with Tape() as tape:
                tape.register_all(trainable)
                loss = _example_loss(adapted, ex, lam, True, dropout_rng, ssl_config)
            grads = backward(tape, loss)
            inv = 1.0 / len(batch)
            for n, g in grads.items():
                if n in grad_sum:
                    grad_sum[n] += g * inv
                else:
                    grad_sum[n] = g * inv
        adam_step(trainable, grad_sum, state, lr)
    return adapted


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(model: DenoiserModel, path) -> None:
    substrate.save_tensors(
        path,
        {n: p.data for n, p in model.params.items()},
        config_json=json.dumps(asdict(model.config), sort_keys=True),
    )


def load_model(path) -> DenoiserModel:
    tensors, config_json = substrate.load_tensors(path)
    if config_json is None:
        raise DenoiserError(f"{path}: checkpoint is missing its config block")
    model = DenoiserModel(DenoiserConfig(**json.loads(config_json)))
    for name, p in model.params.items():
        if name not in tensors:
            raise DenoiserError(f"{path}: checkpoint is missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise DenoiserError(f"{path}: shape mismatch for {name}")
        p.data = tensors[name].copy()
    return model
