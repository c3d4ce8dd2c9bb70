#!/usr/bin/env python3
"""The sequence machinery on a toy model: CTC loss by enumeration, prefix
scores, and joint CTC/attention beam decoding.

Everything here is small enough to verify by brute force, which is exactly
how the test suite pins these components down.
"""

import itertools

import numpy as np

from unitdenoise import substrate as sub
from unitdenoise.denoiser import (
    CtcPrefixScorer,
    DenoiserConfig,
    DenoiserModel,
    beam_search_decode,
    ctc_full_logprob,
    ctc_loss,
)

# --- CTC against explicit path enumeration -----------------------------------
T, V, blank = 3, 3, 0
rng = np.random.default_rng(1)
logits = rng.standard_normal((T, V))
logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
target = [1, 2]

total = 0.0
for path in itertools.product(range(V), repeat=T):
    merged = [s for i, s in enumerate(path) if i == 0 or s != path[i - 1]]
    if [s for s in merged if s != blank] == target:
        total += np.exp(sum(logp[t, s] for t, s in enumerate(path)))
enumerated = -np.log(total)

forward = float(ctc_loss(sub.constant(logp), target, blank).data)
print(f"CTC nll, forward algorithm: {forward:.10f}")
print(f"CTC nll, path enumeration : {enumerated:.10f}")

# --- prefix scoring is consistent with the forward algorithm ------------------
scorer = CtcPrefixScorer(logp, blank)
state = scorer.initial_state()
last = None
for tok in target:
    psi, r_nb, r_b = scorer.extend_all(state, last)
    state = (r_nb[:, tok].copy(), r_b[:, tok].copy())
    last = tok
print(f"prefix score finalised at eos: {scorer.final(state):.10f}")
print(f"-ctc_loss of the sequence    : {ctc_full_logprob(logp, target, blank):.10f}")

# --- joint beam decoding on a random tiny model -------------------------------
cfg = DenoiserConfig(encoder_layers=1, decoder_layers=1, model_dim=8, heads=2,
                     ffn_dim=16, num_units=3, input_dim=8, num_feature_layers=3,
                     dropout=0.0, seed=4)
model = DenoiserModel(cfg)
stack = rng.standard_normal((3, 5, 8))
for alpha in (0.0, 0.3, 1.0):
    out = beam_search_decode(model, stack, beam_size=8, ctc_decode_weight=alpha)
    print(f"beam decode with ctc weight {alpha:3.1f}: units {out.units}")
