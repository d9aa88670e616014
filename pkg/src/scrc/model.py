"""The retrieval scorer: word-sequence likelihood conditioned on a region
descriptor, its spatial layout, and whole-image context.

Three LSTM units run in lockstep over the token sequence. A language unit
consumes the embedded words; at every step a local unit consumes
[language state, region feature, spatial descriptor] and a global unit
consumes [language state, context feature]. A linear two-branch head turns
their states into next-word logits:

    logits_t = W_local h_local_t + W_global h_global_t + r

A candidate's score is the log-likelihood of the query under this model,
with a <bos> marker feeding the first step and an <eos> term closing the
sum so that scores of different-length sequences are comparable.

Mode flags:
  caption_mode  - drop the W_local term and skip the local unit entirely;
                  the model then scores/generates from context alone.
  mask_context  - drop the W_global term (the global unit is skipped since
                  its output would be unused).
  mask_spatial  - zero the spatial entries of the local unit's input.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, InputError, ShapeError
from .geometry import SPATIAL_DIM
from .nncore import (DEFAULT_INIT_RADIUS, LstmParams, LstmState, LstmStepCache,
                     ParamTensor, log_softmax, lstm_step, lstm_step_backward)
from .textproc import BOS_ID, EOS_ID

_CONFIG_KEYS = ("vocab_size", "embed_dim", "hidden_dim", "feat_dim", "spatial_dim",
                "caption_mode", "mask_spatial", "mask_context")


@dataclass(frozen=True)
class ScrcConfig:
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    feat_dim: int
    spatial_dim: int = SPATIAL_DIM
    caption_mode: bool = False
    mask_spatial: bool = False
    mask_context: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "feat_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.spatial_dim != SPATIAL_DIM:
            raise ConfigError(f"spatial_dim is fixed at {SPATIAL_DIM}, got {self.spatial_dim}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover the three reserved tokens")

    @property
    def local_input_dim(self) -> int:
        return self.hidden_dim + self.feat_dim + self.spatial_dim

    @property
    def global_input_dim(self) -> int:
        return self.hidden_dim + self.feat_dim

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _CONFIG_KEYS}

    @classmethod
    def from_dict(cls, d: dict) -> "ScrcConfig":
        unknown = set(d) - set(_CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ScrcConfig":
        return dataclasses.replace(self, **changes)


class ScrcParams:
    """All learnable weights: embedding, three LSTM units, prediction head."""

    def __init__(self, E: ParamTensor, lstm_language: LstmParams, lstm_local: LstmParams,
                 lstm_global: LstmParams, W_local: ParamTensor, W_global: ParamTensor,
                 r: ParamTensor):
        self.E = E
        self.lstm_language = lstm_language
        self.lstm_local = lstm_local
        self.lstm_global = lstm_global
        self.W_local = W_local
        self.W_global = W_global
        self.r = r

    @classmethod
    def init(cls, config: ScrcConfig, rng: np.random.Generator,
             radius: float = DEFAULT_INIT_RADIUS, dtype=np.float32) -> "ScrcParams":
        """Uniform weights, zero biases. Draw order: E, language unit, local
        unit, global unit, W_local, W_global (r is a bias, zero)."""
        E = ParamTensor.uniform("E", (config.embed_dim, config.vocab_size), rng, radius, dtype)
        lang = LstmParams.init("lstm_language", config.hidden_dim, config.embed_dim,
                               rng, radius, dtype)
        local = LstmParams.init("lstm_local", config.hidden_dim, config.local_input_dim,
                                rng, radius, dtype)
        glob = LstmParams.init("lstm_global", config.hidden_dim, config.global_input_dim,
                               rng, radius, dtype)
        W_local = ParamTensor.uniform("W_local", (config.vocab_size, config.hidden_dim),
                                      rng, radius, dtype)
        W_global = ParamTensor.uniform("W_global", (config.vocab_size, config.hidden_dim),
                                       rng, radius, dtype)
        r = ParamTensor.zeros("r", (config.vocab_size,), dtype)
        return cls(E, lang, local, glob, W_local, W_global, r)

    @classmethod
    def zeros(cls, config: ScrcConfig, dtype=np.float32) -> "ScrcParams":
        E = ParamTensor.zeros("E", (config.embed_dim, config.vocab_size), dtype)
        lang = LstmParams.zeros("lstm_language", config.hidden_dim, config.embed_dim, dtype)
        local = LstmParams.zeros("lstm_local", config.hidden_dim, config.local_input_dim, dtype)
        glob = LstmParams.zeros("lstm_global", config.hidden_dim, config.global_input_dim, dtype)
        W_local = ParamTensor.zeros("W_local", (config.vocab_size, config.hidden_dim), dtype)
        W_global = ParamTensor.zeros("W_global", (config.vocab_size, config.hidden_dim), dtype)
        r = ParamTensor.zeros("r", (config.vocab_size,), dtype)
        return cls(E, lang, local, glob, W_local, W_global, r)

    def tensors(self) -> list[ParamTensor]:
        return ([self.E] + self.lstm_language.tensors() + self.lstm_local.tensors()
                + self.lstm_global.tensors() + [self.W_local, self.W_global, self.r])

    def zero_grads(self):
        for t in self.tensors():
            t.zero_grad()

    @property
    def dtype(self):
        return self.E.value.dtype

    def check_config(self, config: ScrcConfig):
        if (self.E.value.shape != (config.embed_dim, config.vocab_size)
                or self.lstm_language.input_dim != config.embed_dim
                or self.lstm_language.hidden_dim != config.hidden_dim
                or self.lstm_local.input_dim != config.local_input_dim
                or self.lstm_global.input_dim != config.global_input_dim
                or self.W_local.value.shape != (config.vocab_size, config.hidden_dim)):
            raise ConfigError("parameter shapes do not match the configuration")


@dataclass
class ScoreRequest:
    """One (query, candidate) scoring instance. The feature vectors may be
    None for branches the active mode never reads."""

    query: Sequence[int]
    x_box: Optional[np.ndarray]
    x_context: Optional[np.ndarray]
    x_spatial: Optional[np.ndarray]


@dataclass
class PreparedFeatures:
    x_box: np.ndarray
    x_spatial: np.ndarray
    x_context: np.ndarray


@dataclass
class DecoderState:
    lang: LstmState
    local: LstmState
    glob: LstmState


def initial_state(config: ScrcConfig, dtype=np.float32) -> DecoderState:
    return DecoderState(LstmState.zeros(config.hidden_dim, dtype),
                        LstmState.zeros(config.hidden_dim, dtype),
                        LstmState.zeros(config.hidden_dim, dtype))


def prepare_features(config: ScrcConfig, x_box, x_context, x_spatial,
                     dtype=np.float32) -> PreparedFeatures:
    """Validate feature dimensions and apply the mask flags."""
    def coerce(v, dim, name, required):
        if v is None:
            if required:
                raise InputError(f"{name} is required in this mode")
            return np.zeros(dim, dtype=dtype)
        v = np.asarray(v, dtype=dtype)
        if v.shape != (dim,):
            raise ShapeError(f"{name}: expected shape ({dim},), got {v.shape}")
        return v

    need_local = not config.caption_mode
    need_global = not config.mask_context
    box = coerce(x_box, config.feat_dim, "x_box", need_local)
    ctx = coerce(x_context, config.feat_dim, "x_context", need_global)
    if config.mask_spatial or x_spatial is None:
        if need_local and not config.mask_spatial and x_spatial is None:
            raise InputError("x_spatial is required in this mode")
        sp = np.zeros(config.spatial_dim, dtype=dtype)
    else:
        sp = np.asarray(x_spatial, dtype=dtype)
        if sp.shape != (config.spatial_dim,):
            raise ShapeError(f"x_spatial: expected shape ({config.spatial_dim},), got {sp.shape}")
    return PreparedFeatures(box, sp, ctx)


@dataclass
class StepRecord:
    input_id: int
    cache_lang: LstmStepCache
    cache_local: Optional[LstmStepCache]
    cache_glob: Optional[LstmStepCache]
    probs: np.ndarray


@dataclass
class ForwardTrace:
    """Per-step caches of one scoring pass, sufficient for backprop."""

    inputs: list[int]
    targets: list[int]
    feats: PreparedFeatures
    steps: list[StepRecord]
    log_prob: float


def _step(params: ScrcParams, config: ScrcConfig, x_word: np.ndarray,
          state: DecoderState, feats: PreparedFeatures):
    lang, cache_lang = lstm_step(params.lstm_language, x_word, state.lang)
    local, cache_local = state.local, None
    glob, cache_glob = state.glob, None
    if not config.caption_mode:
        x_local = np.concatenate([lang.h, feats.x_box, feats.x_spatial])
        local, cache_local = lstm_step(params.lstm_local, x_local, state.local)
    if not config.mask_context:
        x_glob = np.concatenate([lang.h, feats.x_context])
        glob, cache_glob = lstm_step(params.lstm_global, x_glob, state.glob)
    logits = params.r.value.copy()
    if not config.caption_mode:
        logits += params.W_local.value @ local.h
    if not config.mask_context:
        logits += params.W_global.value @ glob.h
    return logits, DecoderState(lang, local, glob), cache_lang, cache_local, cache_glob


def step_logits(params: ScrcParams, config: ScrcConfig, x_word: np.ndarray,
                state: DecoderState, feats: PreparedFeatures):
    """Advance one step: next-word logits and the updated decoder state."""
    logits, new_state, *_ = _step(params, config, x_word, state, feats)
    return logits, new_state


def _check_query(config: ScrcConfig, query: Sequence[int]) -> list[int]:
    ids = list(query)
    if not ids:
        raise InputError("empty query")
    for t in ids:
        if not 0 <= t < config.vocab_size:
            raise InputError(f"token id {t} out of range for vocab size {config.vocab_size}")
    return ids


def _forward(params: ScrcParams, config: ScrcConfig, request: ScoreRequest,
             keep_trace: bool) -> ForwardTrace:
    params.check_config(config)
    query = _check_query(config, request.query)
    feats = prepare_features(config, request.x_box, request.x_context, request.x_spatial,
                             dtype=params.dtype)
    inputs = [BOS_ID] + query
    targets = query + [EOS_ID]
    state = initial_state(config, params.dtype)
    steps: list[StepRecord] = []
    total = 0.0
    for w_in, w_tgt in zip(inputs, targets):
        x_word = params.E.value[:, w_in].copy()
        logits, state, c_lang, c_local, c_glob = _step(params, config, x_word, state, feats)
        logp = log_softmax(logits)
        total += float(logp[w_tgt])
        if keep_trace:
            steps.append(StepRecord(w_in, c_lang, c_local, c_glob, np.exp(logp)))
    return ForwardTrace(inputs, targets, feats, steps, total)


def sequence_log_prob(params: ScrcParams, config: ScrcConfig, request: ScoreRequest) -> float:
    """log p(query, <eos> | features): the sum over steps of the target
    word's log-probability, starting from the <bos> marker."""
    return _forward(params, config, request, keep_trace=False).log_prob


def forward_trace(params: ScrcParams, config: ScrcConfig, request: ScoreRequest) -> ForwardTrace:
    return _forward(params, config, request, keep_trace=True)


def score_candidates(params: ScrcParams, config: ScrcConfig,
                     requests: Sequence[ScoreRequest]) -> list[float]:
    """Score each request independently; output order matches input order."""
    if not requests:
        raise InputError("empty candidate list")
    scores = []
    for idx, req in enumerate(requests):
        try:
            scores.append(sequence_log_prob(params, config, req))
        except ShapeError as e:
            raise ShapeError(f"candidate {idx}: {e}") from e
        except InputError as e:
            raise InputError(f"candidate {idx}: {e}") from e
    return scores


def backward(params: ScrcParams, config: ScrcConfig, trace: ForwardTrace,
             targets: Sequence[int], scale: float = 1.0):
    """Accumulate gradients of scale * (-log-likelihood) into params.

    Branches disabled by the mode flags receive exactly zero gradient; so do
    the spatial input columns of the local unit when mask_spatial is set.
    """
    params.check_config(config)
    if list(targets) != trace.targets:
        raise ContractError("trace was produced for a different target sequence")
    if not trace.steps or len(trace.steps) != len(trace.targets):
        raise ContractError("trace lacks per-step caches; use forward_trace")
    hidden = config.hidden_dim
    zeros = np.zeros(hidden, dtype=params.dtype)
    dh_lang_next, dc_lang_next = zeros.copy(), zeros.copy()
    dh_local_next, dc_local_next = zeros.copy(), zeros.copy()
    dh_glob_next, dc_glob_next = zeros.copy(), zeros.copy()

    for t in reversed(range(len(trace.steps))):
        rec = trace.steps[t]
        dlogits = rec.probs.copy()
        dlogits[trace.targets[t]] -= 1.0
        if scale != 1.0:
            dlogits *= scale
        params.r.grad += dlogits
        dh_lang = dh_lang_next
        if not config.caption_mode:
            h_local = rec.cache_local.h
            params.W_local.grad += np.outer(dlogits, h_local)
            dh_local = params.W_local.value.T @ dlogits + dh_local_next
            dx_local, dh_local_next, dc_local_next = lstm_step_backward(
                params.lstm_local, rec.cache_local, dh_local, dc_local_next)
            dh_lang = dh_lang + dx_local[:hidden]
        if not config.mask_context:
            h_glob = rec.cache_glob.h
            params.W_global.grad += np.outer(dlogits, h_glob)
            dh_glob = params.W_global.value.T @ dlogits + dh_glob_next
            dx_glob, dh_glob_next, dc_glob_next = lstm_step_backward(
                params.lstm_global, rec.cache_glob, dh_glob, dc_glob_next)
            dh_lang = dh_lang + dx_glob[:hidden]
        dx_lang, dh_lang_next, dc_lang_next = lstm_step_backward(
            params.lstm_language, rec.cache_lang, dh_lang, dc_lang_next)
        params.E.grad[:, rec.input_id] += dx_lang


@dataclass
class _Beam:
    tokens: tuple[int, ...]
    log_prob: float
    state: DecoderState
    next_logp: np.ndarray


def generate_description(params: ScrcParams, config: ScrcConfig, x_box, x_context,
                         x_spatial, beam_width: int, max_len: int):
    """Beam-search for the most likely token sequence given the features.

    Every hypothesis terminates with the <eos> term (hypotheses reaching
    max_len are forced to take it), so all scores are directly comparable
    with sequence scoring. Ties break toward the lexicographically smaller
    token-id sequence. Returns (token ids, log-probability).
    """
    if beam_width < 1:
        raise InputError(f"beam_width must be >= 1, got {beam_width}")
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    params.check_config(config)
    feats = prepare_features(config, x_box, x_context, x_spatial, dtype=params.dtype)
    state = initial_state(config, params.dtype)
    logits, state = step_logits(params, config, params.E.value[:, BOS_ID].copy(), state, feats)
    live = [_Beam((), 0.0, state, log_softmax(logits))]
    finished: list[tuple[float, tuple[int, ...]]] = []

    while live:
        candidates = []  # (log_prob, tokens-after-choice, beam, chosen id)
        for beam in live:
            at_cap = len(beam.tokens) == max_len
            for tid in range(config.vocab_size):
                if tid == BOS_ID:
                    continue
                if at_cap and tid != EOS_ID:
                    continue
                toks = beam.tokens if tid == EOS_ID else beam.tokens + (tid,)
                candidates.append((beam.log_prob + float(beam.next_logp[tid]),
                                   toks, beam, tid))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for lp, toks, beam, tid in candidates[:beam_width]:
            if tid == EOS_ID:
                finished.append((lp, toks))
            else:
                logits, new_state = step_logits(
                    params, config, params.E.value[:, tid].copy(), beam.state, feats)
                live.append(_Beam(toks, lp, new_state, log_softmax(logits)))

    best_lp, best_toks = min(finished, key=lambda f: (-f[0], f[1]))
    return list(best_toks), best_lp
